#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ltp {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline std::uint64_t& flop_counter() {
    thread_local std::uint64_t flops = 0;
    return flops;
}

} // namespace detail

/// One recorded value in the dynamic graph. Leaves have no backward function.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t sequence = detail::next_sequence();
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
class Tensor {
public:
    Tensor() : node_(std::make_shared<Node>()) { node_->shape = {0}; }

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1, 1}, {v}, requires_grad);
    }

    static Tensor row(std::vector<double> v, bool requires_grad = false) {
        const auto n = v.size();
        return Tensor({1, n}, std::move(v), requires_grad);
    }

    static Tensor from_node(std::shared_ptr<Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim() const { return node_->shape.size(); }

    std::size_t rows() const {
        require_2d("rows");
        return node_->shape[0];
    }
    std::size_t cols() const {
        require_2d("cols");
        return node_->shape[1];
    }

    std::span<const double> data() const { return node_->value; }
    std::span<double> data() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    double operator()(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    double& operator()(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }

    double item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> grad() { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    bool is_leaf() const { return !node_->backward; }

    Tensor clone() const {
        return Tensor(node_->shape, node_->value, node_->requires_grad);
    }
    Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same(const Tensor& other) const { return node_ == other.node_; }

private:
    void require_2d(const char* what) const {
        if (node_->shape.size() != 2) {
            throw ShapeError(std::string(what) + ": tensor " + shape_str(node_->shape) + " is not 2-D");
        }
    }

    std::shared_ptr<Node> node_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Counts forward matmul FLOPs (2 per multiply-add) on this thread while alive.
class FlopScope {
public:
    FlopScope() : start_(detail::flop_counter()) {}
    std::uint64_t flops() const { return detail::flop_counter() - start_; }

private:
    std::uint64_t start_;
};

/// Builds the output node of a primitive and wires it into the graph if any input needs grad.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (auto& t : inputs) node.parents.push_back(t.node());
    node.backward = std::move(backward);
    return out;
}

/// Reverse pass from a scalar loss. Gradients accumulate into every reachable
/// requires_grad leaf; interior nodes are released afterwards.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;

    // Owning references: releasing one node's parents must not free nodes still queued.
    std::vector<std::shared_ptr<Node>> order;
    std::vector<std::shared_ptr<Node>> stack{loss.node()};
    std::unordered_set<const Node*> seen;
    while (!stack.empty()) {
        auto n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        for (auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    // Construction order is a valid topological order, so reverse it.
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->sequence > b->sequence; });

    Node& root = *loss.node();
    root.ensure_grad();
    root.grad[0] += 1.0;
    for (auto& n : order) {
        if (!n->backward) continue;
        if (!n->grad.empty()) {
            for (auto& p : n->parents) {
                if (p->requires_grad) p->ensure_grad();
            }
            n->backward(*n);
        }
    }
    for (auto& n : order) {
        if (!n->backward) continue;
        n->backward = nullptr;
        n->parents.clear();
        n->grad.clear();
        n->grad.shrink_to_fit();
    }
}

} // namespace ltp
