#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltp/ops.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

namespace detail {

inline double checked_scalar(const Tensor& t) {
    const double v = t.item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value");
    return v;
}

} // namespace detail

/// Compares reverse-mode gradients of `loss` against central differences for
/// every coordinate of `params` (or every `stride`-th one). The relative error
/// of one coordinate is |analytic − numeric| / max(1, |analytic|).
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  double eps, std::size_t stride = 1) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
    if (stride == 0) stride = 1;
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        if (p.has_grad()) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        } else {
            analytic.emplace_back(p.size(), 0.0);
        }
        for (double g : analytic.back()) {
            if (!std::isfinite(g)) throw std::domain_error("grad_check: non-finite analytic gradient");
        }
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].data();
        for (std::size_t i = 0; i < values.size(); i += stride) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double up = detail::checked_scalar(loss());
            values[i] = saved - eps;
            const double down = detail::checked_scalar(loss());
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (result.checked == 0 || err > result.max_rel_error) {
                result.max_rel_error = err;
                result.worst_param = k;
                result.worst_index = i;
            }
            ++result.checked;
        }
    }
    for (auto& p : params) p.zero_grad();
    return result;
}

/// Single-input form: f maps `at` to a scalar.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& at, double eps) {
    Tensor x = at.clone();
    return grad_check([&] { return f(x); }, {x}, eps).max_rel_error;
}

} // namespace ltp
