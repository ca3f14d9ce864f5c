#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ltp/ops.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

enum class PruneMode { none, soft, hard, topk, spatten, manual };

inline std::string to_string(PruneMode mode) {
    switch (mode) {
    case PruneMode::none: return "none";
    case PruneMode::soft: return "soft";
    case PruneMode::hard: return "hard";
    case PruneMode::topk: return "topk";
    case PruneMode::spatten: return "spatten";
    case PruneMode::manual: return "manual";
    }
    return "unknown";
}

inline PruneMode parse_prune_mode(const std::string& s) {
    for (auto m : {PruneMode::none, PruneMode::soft, PruneMode::hard, PruneMode::topk, PruneMode::spatten,
                   PruneMode::manual}) {
        if (to_string(m) == s) return m;
    }
    throw std::invalid_argument("unknown prune mode '" + s + "'");
}

/// True when the mode removes tokens from the computation (compaction).
inline bool is_hard_mode(PruneMode mode) {
    return mode == PruneMode::hard || mode == PruneMode::manual || mode == PruneMode::topk ||
           mode == PruneMode::spatten;
}

/// Per-layer thresholds in importance-score units plus the soft-mask temperature.
struct ThresholdSet {
    Tensor theta;  // 1×L
    double temperature = 1e-3;
    bool learnable = false;

    ThresholdSet() = default;
    ThresholdSet(std::vector<double> values, double temp, bool learn)
        : theta(Tensor::row(std::move(values), learn)), temperature(temp), learnable(learn) {
        if (!(temperature > 0.0)) throw std::invalid_argument("thresholds: temperature must be positive");
    }

    std::size_t layers() const { return theta.size(); }
    double value(std::size_t layer) const { return theta.data()[layer]; }
    std::vector<double> values() const { return theta.values(); }

    /// Differentiable 1×1 view of one layer's threshold.
    Tensor layer(std::size_t l) const { return slice_cols(theta, l, l + 1); }

    void freeze() {
        learnable = false;
        theta.set_requires_grad(false);
        theta.zero_grad();
    }

    ThresholdSet clone() const {
        ThresholdSet t;
        t.theta = theta.clone();
        t.temperature = temperature;
        t.learnable = learnable;
        return t;
    }
};

struct PruneContext {
    PruneMode mode = PruneMode::none;
    std::optional<ThresholdSet> thresholds;
    /// Per-layer retain ratios for topk/spatten.
    std::optional<std::vector<double>> schedule;
    /// When set, topk counts are ratio × this length instead of the sequence's own length.
    std::optional<std::size_t> reference_length;
    /// Original positions never pruned.
    std::vector<std::size_t> protected_positions{0};
    bool record_attention = false;

    void validate(std::size_t layers) const {
        switch (mode) {
        case PruneMode::soft:
        case PruneMode::hard:
        case PruneMode::manual:
            if (!thresholds) throw std::invalid_argument("prune mode " + to_string(mode) + " requires thresholds");
            if (thresholds->layers() != layers) {
                throw std::invalid_argument("thresholds: " + std::to_string(thresholds->layers()) +
                                            " values for " + std::to_string(layers) + " layers");
            }
            break;
        case PruneMode::topk:
        case PruneMode::spatten:
            if (!schedule) throw std::invalid_argument("prune mode " + to_string(mode) + " requires a schedule");
            if (schedule->size() != layers) {
                throw std::invalid_argument("schedule: " + std::to_string(schedule->size()) + " ratios for " +
                                            std::to_string(layers) + " layers");
            }
            for (double r : *schedule) {
                if (!(r >= -1.0 && r <= 1.0)) throw std::invalid_argument("schedule: ratios must lie in [-1, 1]");
            }
            break;
        case PruneMode::none: break;
        }
    }

    static PruneContext none() { return {}; }
    static PruneContext with_thresholds(PruneMode mode, ThresholdSet t) {
        PruneContext c;
        c.mode = mode;
        c.thresholds = std::move(t);
        return c;
    }
    static PruneContext with_schedule(PruneMode mode, std::vector<double> ratios) {
        PruneContext c;
        c.mode = mode;
        c.schedule = std::move(ratios);
        return c;
    }
};

/// What one layer did to the sequence. Vectors are indexed by original position.
struct LayerTrace {
    std::size_t entering = 0;
    std::size_t retained = 0;
    std::vector<double> scores;
    std::vector<double> mask;
    std::vector<double> running;
    std::vector<std::size_t> kept;
};

struct PruneTrace {
    std::size_t input_length = 0;
    std::vector<LayerTrace> layers;

    std::vector<std::size_t> entering_lengths() const {
        std::vector<std::size_t> out;
        for (const auto& l : layers) out.push_back(l.entering);
        return out;
    }
    std::vector<std::size_t> retained_lengths() const {
        std::vector<std::size_t> out;
        for (const auto& l : layers) out.push_back(l.retained);
        return out;
    }
    /// Length entering each layer if every layer's retained set were removed.
    /// Equals entering_lengths() under hard pruning; the binarized estimate under soft masking.
    std::vector<std::size_t> effective_lengths() const {
        std::vector<std::size_t> out;
        std::size_t cur = input_length;
        for (const auto& l : layers) {
            out.push_back(cur);
            cur = l.retained;
        }
        return out;
    }
};

namespace detail {

inline std::size_t count_active(const std::vector<bool>& active) {
    const auto n = static_cast<std::size_t>(std::count(active.begin(), active.end(), true));
    if (n == 0) throw std::invalid_argument("importance: no active tokens");
    return n;
}

} // namespace detail

/// Column mean of attention over heads and active query rows. `probs` has shape
/// N_h×n×n with rows indexed by query. Inactive tokens score exactly 0.
inline std::vector<double> importance_scores(const Tensor& probs, const std::vector<bool>& active) {
    if (probs.dim() != 3 || probs.shape()[1] != probs.shape()[2]) {
        throw ShapeError("importance_scores: expected N_h×n×n probabilities, got " + shape_str(probs.shape()));
    }
    const std::size_t heads = probs.shape()[0], n = probs.shape()[1];
    if (active.size() != n) throw ShapeError("importance_scores: active flags do not match sequence length");
    const std::size_t n_active = detail::count_active(active);
    std::vector<double> scores(n, 0.0);
    const auto p = probs.data();
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < n; ++q) {
            if (!active[q]) continue;
            const double* row = p.data() + (h * n + q) * n;
            for (std::size_t k = 0; k < n; ++k) scores[k] += row[k];
        }
    }
    const double norm = 1.0 / (static_cast<double>(heads) * static_cast<double>(n_active));
    for (std::size_t k = 0; k < n; ++k) scores[k] = active[k] ? scores[k] * norm : 0.0;
    return scores;
}

/// Differentiable form over per-head n×n probability tensors; returns 1×n.
inline Tensor importance_scores(const std::vector<Tensor>& head_probs, const std::vector<bool>& active) {
    if (head_probs.empty()) throw ShapeError("importance_scores: no heads");
    const std::size_t n = head_probs.front().rows();
    if (active.size() != n) throw ShapeError("importance_scores: active flags do not match sequence length");
    const std::size_t n_active = detail::count_active(active);
    Tensor total = head_probs.front();
    for (std::size_t h = 1; h < head_probs.size(); ++h) total = add(total, head_probs[h]);
    std::vector<double> weights(n);
    for (std::size_t i = 0; i < n; ++i) weights[i] = active[i] ? 1.0 : 0.0;
    const double norm = 1.0 / (static_cast<double>(head_probs.size()) * static_cast<double>(n_active));
    return scale(matmul(Tensor::row(std::move(weights)), total), norm);
}

/// keep iff score > theta, or the index is protected. A single comparison per token.
inline std::vector<bool> hard_mask(std::span<const double> scores, double theta,
                                   std::span<const std::size_t> protected_idx = {}) {
    std::vector<bool> keep(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) keep[i] = scores[i] > theta;
    for (std::size_t p : protected_idx) {
        if (p < keep.size()) keep[p] = true;
    }
    return keep;
}

/// σ((s − θ)/T), differentiable in both the scores and θ.
inline Tensor soft_mask(const Tensor& scores, const Tensor& theta, double temperature) {
    if (!(temperature > 0.0)) throw std::invalid_argument("soft_mask: temperature must be positive");
    return sigmoid(scale(sub(scores, theta), 1.0 / temperature));
}

/// Scales token rows of `layer_out` (n×d) by running ⊙ mask and returns the new running product.
inline std::pair<Tensor, Tensor> apply_soft_mask(const Tensor& layer_out, const Tensor& mask, const Tensor& running) {
    if (mask.size() != layer_out.rows() || running.size() != layer_out.rows()) {
        detail::shape_mismatch("apply_soft_mask", layer_out, mask);
    }
    Tensor next = mul(running, mask);
    Tensor column = reshape(next, {next.size(), 1});
    return {mul(layer_out, column), next};
}

struct Compacted {
    Tensor x;
    std::vector<std::size_t> index;
};

/// Keeps the flagged token rows in original order.
inline Compacted compact(const Tensor& x, const std::vector<bool>& keep) {
    if (keep.size() != x.rows()) throw ShapeError("compact: keep flags do not match row count");
    std::vector<std::size_t> index;
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i]) index.push_back(i);
    }
    if (index.empty()) throw std::invalid_argument("compact: no tokens kept");
    return {gather_rows(x, index), index};
}

/// (1/L) Σ_l ‖M̃^(l)‖₁ over non-pad tokens of one sequence.
inline Tensor reg_loss(const std::vector<Tensor>& masks, const std::vector<bool>& pad = {}) {
    if (masks.empty()) throw std::invalid_argument("reg_loss: no layers");
    Tensor total = Tensor::scalar(0.0);
    for (const auto& m : masks) {
        if (pad.empty()) {
            total = add(total, l1_norm(m));
        } else {
            if (pad.size() != m.size()) throw ShapeError("reg_loss: pad flags do not match mask length");
            std::vector<double> w(m.size());
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = pad[i] ? 0.0 : 1.0;
            total = add(total, l1_norm(mul(m, Tensor(m.shape(), std::move(w)))));
        }
    }
    return scale(total, 1.0 / static_cast<double>(masks.size()));
}

/// θ^(l) = θ^(L)·l/L for l = 1..L.
inline std::vector<double> linear_thresholds(double final_threshold, std::size_t layers) {
    std::vector<double> out(layers);
    for (std::size_t l = 1; l <= layers; ++l) {
        out[l - 1] = final_threshold * static_cast<double>(l) / static_cast<double>(layers);
    }
    if (layers > 0) out.back() = final_threshold;
    return out;
}

inline ThresholdSet manual_thresholds(double final_threshold, std::size_t layers, double temperature = 1e-3) {
    if (final_threshold < 0.0) throw std::invalid_argument("manual_thresholds: final threshold must be >= 0");
    return ThresholdSet(linear_thresholds(final_threshold, layers), temperature, false);
}

/// First three layers keep everything, then the ratio falls linearly to
/// `final_ratio` at the last layer.
inline std::vector<double> spatten_schedule(double final_ratio, std::size_t layers) {
    if (layers < 4) throw std::invalid_argument("spatten_schedule: need at least 4 layers");
    if (final_ratio < -1.0 || final_ratio > 1.0) {
        throw std::invalid_argument("spatten_schedule: final ratio must lie in [-1, 1]");
    }
    std::vector<double> out(layers, 1.0);
    const double span = static_cast<double>(layers - 3);
    for (std::size_t l = 4; l <= layers; ++l) {
        out[l - 1] = 1.0 + (final_ratio - 1.0) * static_cast<double>(l - 3) / span;
    }
    out.back() = final_ratio;
    return out;
}

/// Ratio falls linearly from the first layer: r_l = 1 − (1 − final_ratio)·l/L.
inline std::vector<double> linear_schedule(double final_ratio, std::size_t layers) {
    if (final_ratio < 0.0 || final_ratio > 1.0) {
        throw std::invalid_argument("linear_schedule: final ratio must lie in [0, 1]");
    }
    std::vector<double> out(layers);
    for (std::size_t l = 1; l <= layers; ++l) {
        out[l - 1] = 1.0 - (1.0 - final_ratio) * static_cast<double>(l) / static_cast<double>(layers);
    }
    if (layers > 0) out.back() = final_ratio;
    return out;
}

/// ceil(ratio·n) clamped to [1, n].
inline std::size_t retain_count(double ratio, std::size_t n) {
    if (n == 0) return 0;
    const double raw = std::ceil(ratio * static_cast<double>(n) - 1e-9);
    if (raw <= 1.0) return 1;
    return std::min(n, static_cast<std::size_t>(raw));
}

/// Keeps the k largest scores; equal scores prefer the lower index.
inline std::vector<bool> topk_select(std::span<const double> scores, std::size_t k) {
    const std::size_t n = scores.size();
    if (k < 1 || k > n) {
        throw std::out_of_range("topk_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto before = [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1), order.end(), before);
    std::vector<bool> keep(n, false);
    for (std::size_t i = 0; i < k; ++i) keep[order[i]] = true;
    return keep;
}

} // namespace ltp
