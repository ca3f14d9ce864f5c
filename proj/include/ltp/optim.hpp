#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltp/tensor.hpp"

namespace ltp {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Adam with decoupled weight decay. Defaults follow the RoBERTa recipe.
struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

class Adam {
public:
    struct Group {
        std::vector<NamedTensor> params;
        AdamOptions options;
    };

    explicit Adam(std::vector<Group> groups) : groups_(std::move(groups)) {
        for (const auto& g : groups_) {
            for (const auto& p : g.params) {
                first_.emplace_back(p.tensor.size(), 0.0);
                second_.emplace_back(p.tensor.size(), 0.0);
            }
        }
    }

    Adam(std::vector<NamedTensor> params, AdamOptions options)
        : Adam(std::vector<Group>{Group{std::move(params), options}}) {}

    /// Applies one update from the accumulated grads. Grads are left in place.
    void step() {
        std::size_t slot = 0;
        for (auto& g : groups_) {
            for (auto& p : g.params) {
                if (!p.tensor.has_grad()) {
                    throw std::logic_error("adam: parameter '" + p.name + "' has no gradient");
                }
            }
        }
        ++steps_;
        for (auto& g : groups_) {
            const auto& o = g.options;
            const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(steps_));
            const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(steps_));
            for (auto& p : g.params) {
                auto w = p.tensor.data();
                const auto grad = p.tensor.grad();
                auto& m = first_[slot];
                auto& v = second_[slot];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    if (o.weight_decay != 0.0) w[i] -= o.lr * o.weight_decay * w[i];
                    m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * grad[i];
                    v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * grad[i] * grad[i];
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    w[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
                }
                ++slot;
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.tensor.zero_grad();
    }

    std::size_t steps() const { return steps_; }
    const std::vector<double>& first_moment(std::size_t slot) const { return first_.at(slot); }
    const std::vector<double>& second_moment(std::size_t slot) const { return second_.at(slot); }

private:
    std::vector<Group> groups_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t steps_ = 0;
};

} // namespace ltp
