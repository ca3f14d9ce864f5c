#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ltp/tensor.hpp"

// Differentiable primitives over 2-D row-major tensors. Every op records itself
// on the graph through make_result when an input requires grad.
namespace ltp {

namespace kernel {

// C(m×n) += A(m×k) · B(k×n)
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C(m×n) += A(m×k) · B(n×k)ᵀ. B is transposed into scratch so the inner loop
// is the same vectorizable axpy as gemm_nn.
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
    thread_local std::vector<double> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    gemm_nn(m, k, n, a, bt.data(), c);
}

// C(m×n) += A(k×m)ᵀ · B(k×n)
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = ap[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

} // namespace kernel

namespace detail {

inline void require_2d(const char* op, const Tensor& t) {
    if (t.dim() != 2) throw ShapeError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

[[noreturn]] inline void shape_mismatch(const char* op, const Tensor& a, const Tensor& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
}

inline void count_flops(std::size_t m, std::size_t k, std::size_t n) {
    flop_counter() += 2ull * m * k * n;
}

// b must equal a's shape or broadcast along rows, columns, or both.
inline void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
    require_2d(op, a);
    require_2d(op, b);
    const bool rows_ok = b.rows() == a.rows() || b.rows() == 1;
    const bool cols_ok = b.cols() == a.cols() || b.cols() == 1;
    if (!rows_ok || !cols_ok) shape_mismatch(op, a, b);
}

template <class F>
inline void for_broadcast(std::size_t r, std::size_t c, std::size_t br, std::size_t bc, F&& f) {
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t bi = br == 1 ? 0 : i;
        for (std::size_t j = 0; j < c; ++j) {
            const std::size_t bj = bc == 1 ? 0 : j;
            f(i * c + j, bi * bc + bj);
        }
    }
}

inline bool wants_grad(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d("matmul", a);
    detail::require_2d("matmul", b);
    if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a, b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    kernel::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
    detail::count_flops(m, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto& A = *self.parents[0];
        const auto& B = *self.parents[1];
        if (A.requires_grad) kernel::gemm_nt(m, n, k, self.grad.data(), B.value.data(), self.parents[0]->grad.data());
        if (B.requires_grad) kernel::gemm_tn(k, m, n, A.value.data(), self.grad.data(), self.parents[1]->grad.data());
    });
}

/// a · bᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_2d("matmul_nt", a);
    detail::require_2d("matmul_nt", b);
    if (a.cols() != b.cols()) detail::shape_mismatch("matmul_nt", a, b);
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    std::vector<double> out(m * n, 0.0);
    kernel::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
    detail::count_flops(m, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto& A = *self.parents[0];
        const auto& B = *self.parents[1];
        if (A.requires_grad) kernel::gemm_nn(m, n, k, self.grad.data(), B.value.data(), self.parents[0]->grad.data());
        if (B.requires_grad) kernel::gemm_tn(n, m, k, self.grad.data(), A.value.data(), self.parents[1]->grad.data());
    });
}

/// aᵀ · b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    detail::require_2d("matmul_tn", a);
    detail::require_2d("matmul_tn", b);
    if (a.rows() != b.rows()) detail::shape_mismatch("matmul_tn", a, b);
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    kernel::gemm_tn(m, k, n, a.data().data(), b.data().data(), out.data());
    detail::count_flops(m, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        const auto& A = *self.parents[0];
        const auto& B = *self.parents[1];
        if (A.requires_grad) kernel::gemm_nt(k, n, m, B.value.data(), self.grad.data(), self.parents[0]->grad.data());
        if (B.requires_grad) kernel::gemm_nn(k, m, n, A.value.data(), self.grad.data(), self.parents[1]->grad.data());
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_broadcast("add", a, b);
    const std::size_t r = a.rows(), c = a.cols(), br = b.rows(), bc = b.cols();
    std::vector<double> out(a.values());
    const auto bv = b.data();
    detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { out[i] += bv[j]; });
    return make_result({r, c}, std::move(out), {a, b}, [r, c, br, bc](Node& self) {
        if (detail::wants_grad(self, 0)) {
            auto& g = self.parents[0]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::wants_grad(self, 1)) {
            auto& g = self.parents[1]->grad;
            detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { g[j] += self.grad[i]; });
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_broadcast("sub", a, b);
    const std::size_t r = a.rows(), c = a.cols(), br = b.rows(), bc = b.cols();
    std::vector<double> out(a.values());
    const auto bv = b.data();
    detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { out[i] -= bv[j]; });
    return make_result({r, c}, std::move(out), {a, b}, [r, c, br, bc](Node& self) {
        if (detail::wants_grad(self, 0)) {
            auto& g = self.parents[0]->grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (detail::wants_grad(self, 1)) {
            auto& g = self.parents[1]->grad;
            detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { g[j] -= self.grad[i]; });
        }
    });
}

/// Elementwise product; b may broadcast (row vector, column vector, or scalar).
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_broadcast("mul", a, b);
    const std::size_t r = a.rows(), c = a.cols(), br = b.rows(), bc = b.cols();
    std::vector<double> out(a.values());
    const auto bv = b.data();
    detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { out[i] *= bv[j]; });
    return make_result({r, c}, std::move(out), {a, b}, [r, c, br, bc](Node& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (detail::wants_grad(self, 0)) {
            auto& g = self.parents[0]->grad;
            detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { g[i] += self.grad[i] * bv[j]; });
        }
        if (detail::wants_grad(self, 1)) {
            auto& g = self.parents[1]->grad;
            detail::for_broadcast(r, c, br, bc, [&](std::size_t i, std::size_t j) { g[j] += self.grad[i] * av[i]; });
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values());
    for (auto& v : out) v += s;
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d("transpose", a);
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    const auto av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return make_result({c, r}, std::move(out), {a}, [r, c](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

/// Same storage order, new shape.
inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return make_result(std::move(shape), a.values(), {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Row-wise softmax. Columns whose key_keep flag is false get a −1e30 logit and
/// therefore exactly zero probability; an empty key_keep means keep every column.
inline Tensor softmax_rows(const Tensor& a, const std::vector<bool>& key_keep = {}) {
    detail::require_2d("softmax_rows", a);
    const std::size_t r = a.rows(), c = a.cols();
    if (!key_keep.empty() && key_keep.size() != c) {
        throw ShapeError("softmax_rows: key mask of length " + std::to_string(key_keep.size()) +
                         " for " + shape_str(a.shape()));
    }
    if (!key_keep.empty() && std::none_of(key_keep.begin(), key_keep.end(), [](bool k) { return k; })) {
        throw std::domain_error("softmax_rows: every key is masked (degenerate softmax)");
    }
    constexpr double masked_logit = -1e30;
    std::vector<double> out(r * c);
    const auto av = a.data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = av.data() + i * c;
        double* y = out.data() + i * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = (key_keep.empty() || key_keep[j]) ? x[j] : masked_logit;
            mx = std::max(mx, y[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = std::exp(y[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= z;
    }
    return make_result({r, c}, std::move(out), {a}, [r, c](Node& self) {
        auto& g = self.parents[0]->grad;
        const auto& p = self.value;
        for (std::size_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += p[i * c + j] * self.grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += p[i * c + j] * (self.grad[i * c + j] - dot);
        }
    });
}

inline constexpr double layer_norm_eps = 1e-5;

/// Normalizes each row to zero mean and unit (biased) variance, then applies
/// per-column gain and bias given as 1×c rows.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                              double eps = layer_norm_eps) {
    detail::require_2d("layer_norm_rows", x);
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c) detail::shape_mismatch("layer_norm_rows", x, gain);
    std::vector<double> xhat(r * c), inv_std(r), out(r * c);
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = xv.data() + i * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mean) * inv_std[i];
            out[i * c + j] = gv[j] * xhat[i * c + j] + bv[j];
        }
    }
    return make_result({r, c}, std::move(out), {x, gain, bias},
                       [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.parents[1]->value;
        if (detail::wants_grad(self, 0)) {
            auto& g = self.parents[0]->grad;
            std::vector<double> dxhat(c);
            for (std::size_t i = 0; i < r; ++i) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dxhat[j] = self.grad[i * c + j] * gv[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[i * c + j];
                }
                mean_d /= static_cast<double>(c);
                mean_dx /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    g[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                }
            }
        }
        if (detail::wants_grad(self, 1)) {
            auto& g = self.parents[1]->grad;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j] * xhat[i * c + j];
        }
        if (detail::wants_grad(self, 2)) {
            auto& g = self.parents[2]->grad;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
    });
}

inline constexpr double inv_sqrt2 = 0.70710678118654752440;

/// Exact GELU: x·Φ(x).
inline Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        const auto& x = self.parents[0]->value;
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
            g[i] += self.grad[i] * (cdf + x[i] * pdf);
        }
    });
}

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.values());
    for (auto& v : out) v = sigmoid(v);
    return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return make_result({1, 1}, {total}, {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        for (auto& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor l1_norm(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += std::abs(v);
    return make_result({1, 1}, {total}, {a}, [](Node& self) {
        auto& g = self.parents[0]->grad;
        const auto& x = self.parents[0]->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double sign = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0);
            g[i] += self.grad[0] * sign;
        }
    });
}

/// Columns [begin, end).
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require_2d("slice_cols", a);
    const std::size_t r = a.rows(), c = a.cols();
    if (begin > end || end > c) {
        throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_str(a.shape()));
    }
    const std::size_t w = end - begin;
    std::vector<double> out(r * w);
    const auto av = a.data();
    for (std::size_t i = 0; i < r; ++i)
        std::copy_n(av.data() + i * c + begin, w, out.data() + i * w);
    return make_result({r, w}, std::move(out), {a}, [r, c, w, begin](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * c + begin + j] += self.grad[i * w + j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t r = parts.front().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_2d("concat_cols", p);
        if (p.rows() != r) detail::shape_mismatch("concat_cols", parts.front(), p);
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(r * total);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(p.data().data() + i * w, w, out.data() + i * total + offset);
        offset += w;
    }
    return make_result({r, total}, std::move(out), parts, [r, total, widths](Node& self) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            const std::size_t w = widths[k];
            if (detail::wants_grad(self, k)) {
                auto& g = self.parents[k]->grad;
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * total + offset + j];
            }
            offset += w;
        }
    });
}

/// Selects rows by index (embedding lookup and token compaction).
inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
    detail::require_2d("gather_rows", a);
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(index.size() * c);
    const auto av = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= r) {
            throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of range for " +
                             shape_str(a.shape()));
        }
        std::copy_n(av.data() + index[i] * c, c, out.data() + i * c);
    }
    return make_result({index.size(), c}, std::move(out), {a}, [c, index](Node& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) g[index[i] * c + j] += self.grad[i * c + j];
    });
}

/// −log softmax(logits)[label] for a single row of logits.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
    const std::size_t c = logits.size();
    if (label >= c) {
        throw ShapeError("cross_entropy: label " + std::to_string(label) + " for " + std::to_string(c) +
                         " classes");
    }
    const auto x = logits.data();
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    return make_result({1, 1}, {lse - x[label]}, {logits}, [label, lse](Node& self) {
        auto& g = self.parents[0]->grad;
        const auto& x = self.parents[0]->value;
        for (std::size_t j = 0; j < g.size(); ++j) {
            const double p = std::exp(x[j] - lse);
            g[j] += self.grad[0] * (p - (j == label ? 1.0 : 0.0));
        }
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

} // namespace ltp
