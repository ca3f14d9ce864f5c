#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

#include "ltp/datagen.hpp"
#include "ltp/encoder.hpp"
#include "ltp/tensor.hpp"

namespace ltp::test {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(r * c);
    for (auto& x : v) x = u(rng);
    return Tensor({r, c}, std::move(v), requires_grad);
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = u(rng);
    return v;
}

/// Distinct values: a shuffled arithmetic ladder plus jitter smaller than the step.
inline std::vector<double> distinct_scores(std::mt19937_64& rng, std::size_t n) {
    std::vector<double> v(n);
    std::uniform_real_distribution<double> jitter(0.0, 0.4);
    for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<double>(i) + jitter(rng)) / static_cast<double>(n);
    std::shuffle(v.begin(), v.end(), rng);
    return v;
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Random token sequence: CLS then ids drawn from the non-special range.
inline TokenSeq random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
    TokenSeq t{cls_token};
    for (std::size_t i = 1; i < n; ++i) t.push_back(static_cast<int>(uniform_index(rng, 2, vocab - 1)));
    return t;
}

} // namespace ltp::test
