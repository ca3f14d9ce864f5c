#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ltp/datagen.hpp"
#include "ltp/encoder.hpp"
#include "ltp/flops.hpp"
#include "ltp/optim.hpp"
#include "ltp/pruning.hpp"

namespace ltp {

enum class Stage { plain, soft, hard };

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::plain: return "plain";
    case Stage::soft: return "soft";
    case Stage::hard: return "hard";
    }
    return "unknown";
}

struct StageConfig {
    Stage stage = Stage::plain;
    std::size_t epochs = 4;
    double lr = 1e-3;
    /// Soft stage only. Thresholds live on the importance-score scale (≈1/n),
    /// so they get their own step size.
    double threshold_lr = 2e-4;
    double temperature = 1e-3;
    double lambda = 0.0;
    std::size_t batch_size = 16;
    std::uint64_t seed = 1;
    AdamOptions adam{};

    void validate() const {
        if (lambda < 0.0) throw std::invalid_argument("stage config: lambda must be >= 0");
        if (stage == Stage::soft && !(temperature > 0.0)) {
            throw std::invalid_argument("stage config: soft stage needs a positive temperature");
        }
        if (batch_size == 0) throw std::invalid_argument("stage config: batch_size must be >= 1");
    }
};

struct StepRecord {
    double task_loss = 0;
    double reg = 0;
    double total = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0;
    double task_loss = 0;
    double reg = 0;
    double metric = 0;
    std::vector<double> mean_retained;
    double relative_flops = 1.0;
    std::vector<double> thresholds;
};

struct TrainReport {
    std::string stage;
    std::vector<EpochRecord> epochs;
    std::vector<StepRecord> steps;
    bool diverged = false;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(const std::string& what, TrainReport partial)
        : std::runtime_error(what), report(std::move(partial)) {}
    TrainReport report;
};

struct EvalResult {
    double accuracy = 0;
    FlopsReport flops;
    std::vector<double> mean_retained;
    double mean_length = 0;
    std::size_t nesting_violations = 0;
    std::size_t count = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Retained sets must shrink layer by layer.
inline std::size_t nesting_violations(const PruneTrace& trace) {
    std::size_t bad = 0;
    for (std::size_t l = 1; l < trace.layers.size(); ++l) {
        const auto& prev = trace.layers[l - 1].kept;
        for (std::size_t p : trace.layers[l].kept) {
            if (!std::binary_search(prev.begin(), prev.end(), p)) ++bad;
        }
    }
    return bad;
}

class RetainedAccumulator {
public:
    void add(const PruneTrace& trace, const ModelConfig& cfg) {
        const auto retained = trace.retained_lengths();
        if (sums_.empty()) sums_.assign(retained.size(), 0.0);
        for (std::size_t l = 0; l < retained.size(); ++l) sums_[l] += static_cast<double>(retained[l]);
        length_sum_ += static_cast<double>(trace.input_length);
        const auto lengths = trace.effective_lengths();
        flops_.add(model_flops(lengths, cfg, trace.input_length));
        ++count_;
    }
    std::vector<double> mean_retained() const {
        std::vector<double> out;
        for (double s : sums_) out.push_back(count_ ? s / static_cast<double>(count_) : 0.0);
        return out;
    }
    double mean_length() const { return count_ ? length_sum_ / static_cast<double>(count_) : 0.0; }
    FlopsReport flops() const { return flops_.mean(); }

private:
    std::vector<double> sums_;
    double length_sum_ = 0;
    FlopsAccumulator flops_;
    std::size_t count_ = 0;
};

} // namespace detail

/// Accuracy and averaged FLOPs of `model` under `ctx` over `data`, using each
/// sequence's own retained lengths.
inline EvalResult evaluate(const EncoderModel& model, const PruneContext& ctx, const Dataset& data) {
    NoGradGuard no_grad;
    EvalResult r;
    detail::RetainedAccumulator acc;
    std::size_t correct = 0;
    for (const auto& ex : data) {
        EncodeResult enc = encode(model, ex.tokens, ctx);
        Tensor logits = classify(model, enc);
        if (static_cast<int>(detail::argmax(logits.data())) == ex.label) ++correct;
        acc.add(enc.trace, model.config);
        if (is_hard_mode(ctx.mode)) r.nesting_violations += detail::nesting_violations(enc.trace);
    }
    r.count = data.size();
    r.accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
    r.flops = acc.flops();
    r.mean_retained = acc.mean_retained();
    r.mean_length = acc.mean_length();
    return r;
}

/// θ^(l) = θ_final·l/L, trainable.
inline ThresholdSet init_thresholds(double final_threshold, std::size_t layers, double temperature = 1e-3) {
    return ThresholdSet(linear_thresholds(final_threshold, layers), temperature, true);
}

/// Freezes the learned thresholds and switches to hard (compacting) pruning.
inline PruneContext binarize_and_fix(const ThresholdSet& thresholds) {
    ThresholdSet frozen = thresholds.clone();
    frozen.freeze();
    return PruneContext::with_thresholds(PruneMode::hard, std::move(frozen));
}

namespace detail {

/// Shared loop: `learned` is the threshold set trained jointly in the soft stage.
inline TrainReport run_stage(const EncoderModel& model, const PruneContext& ctx, ThresholdSet* learned,
                             const Dataset& data, const StageConfig& cfg, const Dataset* eval,
                             const EpochCallback& on_epoch) {
    cfg.validate();
    ctx.validate(model.config.layers);
    if (data.empty()) throw std::invalid_argument("train: empty dataset");

    AdamOptions model_opts = cfg.adam;
    model_opts.lr = cfg.lr;
    std::vector<Adam::Group> groups{{model.named_parameters(), model_opts}};
    if (learned) {
        AdamOptions theta_opts = cfg.adam;
        theta_opts.lr = cfg.threshold_lr;
        theta_opts.weight_decay = 0.0;
        groups.push_back({{{"thresholds", learned->theta}}, theta_opts});
    }
    Adam optimizer(std::move(groups));
    optimizer.zero_grad();

    TrainReport report;
    report.stage = to_string(cfg.stage);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const bool soft = ctx.mode == PruneMode::soft;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochRecord rec;
        rec.epoch = epoch;
        RetainedAccumulator retained;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv_batch = 1.0 / static_cast<double>(end - start);
            StepRecord step;
            for (std::size_t b = start; b < end; ++b) {
                const Example& ex = data[order[b]];
                EncodeResult enc = encode(model, ex.tokens, ctx);
                Tensor logits = classify(model, enc);
                if (static_cast<int>(argmax(logits.data())) == ex.label) ++correct;
                Tensor task = cross_entropy(logits, static_cast<std::size_t>(ex.label));
                Tensor total = task;
                double reg_value = 0.0;
                if (soft) {
                    Tensor reg = reg_loss(enc.running_masks, enc.pad);
                    reg_value = reg.item();
                    total = add(task, scale(reg, cfg.lambda));
                }
                step.task_loss += task.item() * inv_batch;
                step.reg += reg_value * inv_batch;
                step.total += total.item() * inv_batch;
                if (!std::isfinite(total.item())) {
                    report.diverged = true;
                    report.steps.push_back(step);
                    throw TrainingDiverged("train: non-finite loss in " + report.stage + " stage, epoch " +
                                               std::to_string(epoch),
                                           report);
                }
                backward(scale(total, inv_batch));
                retained.add(enc.trace, model.config);
            }
            optimizer.step();
            optimizer.zero_grad();
            report.steps.push_back(step);
            const double w = static_cast<double>(end - start) / static_cast<double>(order.size());
            rec.loss += step.total * w;
            rec.task_loss += step.task_loss * w;
            rec.reg += step.reg * w;
        }
        rec.mean_retained = retained.mean_retained();
        rec.relative_flops = retained.flops().relative;
        if (eval) {
            rec.metric = evaluate(model, ctx, *eval).accuracy;
        } else {
            rec.metric = static_cast<double>(correct) / static_cast<double>(data.size());
        }
        if (ctx.thresholds) rec.thresholds = ctx.thresholds->values();
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    return report;
}

} // namespace detail

/// Plain fine-tuning (no pruning), used for the pretraining stage and baselines.
inline TrainReport train_plain(const EncoderModel& model, const Dataset& data, StageConfig cfg,
                               const Dataset* eval = nullptr, const EpochCallback& on_epoch = {}) {
    cfg.stage = Stage::plain;
    return detail::run_stage(model, PruneContext::none(), nullptr, data, cfg, eval, on_epoch);
}

/// Joint training of model parameters and thresholds under the soft mask,
/// minimizing cross-entropy + λ·L_reg.
inline TrainReport train_soft(const EncoderModel& model, ThresholdSet& thresholds, const Dataset& data,
                              StageConfig cfg, const Dataset* eval = nullptr, const EpochCallback& on_epoch = {}) {
    if (cfg.stage != Stage::soft) throw std::invalid_argument("train_soft: stage config is not soft");
    if (!thresholds.learnable) throw std::invalid_argument("train_soft: thresholds are frozen");
    thresholds.temperature = cfg.temperature;
    thresholds.theta.set_requires_grad(true);
    PruneContext ctx = PruneContext::with_thresholds(PruneMode::soft, thresholds);
    return detail::run_stage(model, ctx, &thresholds, data, cfg, eval, on_epoch);
}

/// Fine-tunes model parameters only, with tokens physically removed.
inline TrainReport train_hard(const EncoderModel& model, const PruneContext& ctx, const Dataset& data,
                              StageConfig cfg, const Dataset* eval = nullptr, const EpochCallback& on_epoch = {}) {
    if (!is_hard_mode(ctx.mode)) {
        throw std::invalid_argument("train_hard: prune mode " + to_string(ctx.mode) + " does not remove tokens");
    }
    if (ctx.thresholds && ctx.thresholds->theta.requires_grad()) {
        throw std::invalid_argument("train_hard: thresholds must be frozen");
    }
    cfg.stage = Stage::hard;
    return detail::run_stage(model, ctx, nullptr, data, cfg, eval, on_epoch);
}

struct PipelineConfig {
    double init_final_threshold = 0.01;
    StageConfig soft{Stage::soft};
    StageConfig hard{Stage::hard};
};

struct PipelineResult {
    TrainReport soft;
    TrainReport hard;
    ThresholdSet learned;
    PruneContext context;
};

/// Soft training of parameters and thresholds, binarization, then hard
/// fine-tuning. `model` should already be trained on the task.
inline PipelineResult run_ltp(const EncoderModel& model, const Dataset& data, const PipelineConfig& cfg,
                              const Dataset* eval = nullptr, const EpochCallback& on_epoch = {}) {
    PipelineResult r;
    r.learned = init_thresholds(cfg.init_final_threshold, model.config.layers, cfg.soft.temperature);
    StageConfig soft = cfg.soft;
    soft.stage = Stage::soft;
    r.soft = train_soft(model, r.learned, data, soft, eval, on_epoch);
    r.context = binarize_and_fix(r.learned);
    r.hard = train_hard(model, r.context, data, cfg.hard, eval, on_epoch);
    return r;
}

} // namespace ltp
