#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltp/encoder.hpp"

// Analytic FLOPs for one encoder forward pass. One multiply-add counts as two
// FLOPs; softmax, LayerNorm, GELU, embeddings and the classifier are excluded.
namespace ltp {

struct LayerFlopTerms {
    double qkv = 0;        // 3 · 2nd²
    double logits = 0;     // 2n²d
    double context = 0;    // 2n²d
    double output = 0;     // 2nd²
    double ffn = 0;        // 2 · 2nd·d_ffn

    double total() const { return qkv + logits + context + output + ffn; }
};

inline LayerFlopTerms layer_flop_terms(std::size_t n_in, const ModelConfig& cfg) {
    if (n_in < 1) throw std::invalid_argument("layer_flops: length must be >= 1");
    const double n = static_cast<double>(n_in);
    const double d = static_cast<double>(cfg.d);
    const double f = static_cast<double>(cfg.d_ffn);
    LayerFlopTerms t;
    t.qkv = 3.0 * 2.0 * n * d * d;
    t.logits = 2.0 * n * n * d;
    t.context = 2.0 * n * n * d;
    t.output = 2.0 * n * d * d;
    t.ffn = 2.0 * 2.0 * n * d * f;
    return t;
}

inline double layer_flops(std::size_t n_in, const ModelConfig& cfg) { return layer_flop_terms(n_in, cfg).total(); }

struct FlopsReport {
    std::vector<double> per_layer;
    double total = 0;
    double baseline = 0;
    double relative = 1.0;
};

/// FLOPs for a pass whose layer l sees lengths[l] tokens, against the unpruned
/// pass at `baseline_length` (defaults to lengths[0]).
inline FlopsReport model_flops(std::span<const std::size_t> lengths, const ModelConfig& cfg,
                               std::size_t baseline_length = 0) {
    if (lengths.size() != cfg.layers) {
        throw std::invalid_argument("model_flops: " + std::to_string(lengths.size()) + " lengths for " +
                                    std::to_string(cfg.layers) + " layers");
    }
    if (baseline_length == 0) baseline_length = lengths.front();
    for (std::size_t n : lengths) {
        if (n > cfg.n_max) {
            throw std::invalid_argument("model_flops: length " + std::to_string(n) + " exceeds n_max " +
                                        std::to_string(cfg.n_max));
        }
    }
    FlopsReport r;
    for (std::size_t n : lengths) {
        r.per_layer.push_back(layer_flops(n, cfg));
        r.total += r.per_layer.back();
    }
    r.baseline = static_cast<double>(cfg.layers) * layer_flops(baseline_length, cfg);
    r.relative = r.total / r.baseline;
    return r;
}

/// Accumulates per-sequence reports into a dataset average; relative is the
/// ratio of the averaged totals.
class FlopsAccumulator {
public:
    void add(const FlopsReport& r) {
        if (per_layer_.empty()) per_layer_.assign(r.per_layer.size(), 0.0);
        for (std::size_t i = 0; i < r.per_layer.size(); ++i) per_layer_[i] += r.per_layer[i];
        total_ += r.total;
        baseline_ += r.baseline;
        ++count_;
    }

    std::size_t count() const { return count_; }

    FlopsReport mean() const {
        FlopsReport r;
        if (count_ == 0) return r;
        const double c = static_cast<double>(count_);
        for (double v : per_layer_) r.per_layer.push_back(v / c);
        r.total = total_ / c;
        r.baseline = baseline_ / c;
        r.relative = total_ / baseline_;
        return r;
    }

private:
    std::vector<double> per_layer_;
    double total_ = 0;
    double baseline_ = 0;
    std::size_t count_ = 0;
};

} // namespace ltp
