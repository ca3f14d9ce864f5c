#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltp/datagen.hpp"
#include "ltp/training.hpp"

// Calibration against a FLOPs budget and the length-robustness protocol.
namespace ltp {

struct Calibration {
    double value = 0;
    double achieved = 0;
};

/// Bisection for f(x) = target where f is monotone on [lo, hi] (either direction).
inline Calibration bisect(const std::function<double(double)>& f, double lo, double hi, double target,
                          double tol = 1e-3, int iterations = 30) {
    double f_lo = f(lo), f_hi = f(hi);
    const bool increasing = f_hi >= f_lo;
    Calibration best{lo, f_lo};
    if (std::abs(f_hi - target) < std::abs(f_lo - target)) best = {hi, f_hi};
    for (int i = 0; i < iterations && std::abs(best.achieved - target) > tol; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double v = f(mid);
        if (std::abs(v - target) < std::abs(best.achieved - target)) best = {mid, v};
        if ((v < target) == increasing) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return best;
}

inline PruneContext manual_context(double final_threshold, std::size_t layers) {
    return PruneContext::with_thresholds(PruneMode::manual, manual_thresholds(final_threshold, layers));
}

/// Final-layer threshold of a linearly rising schedule whose relative FLOPs on
/// `data` matches `target`.
inline Calibration calibrate_manual(const EncoderModel& model, const Dataset& data, double target,
                                    double tol = 1e-3, double max_threshold = 1.0) {
    const std::size_t layers = model.config.layers;
    return bisect([&](double t) { return evaluate(model, manual_context(t, layers), data).flops.relative; }, 0.0,
                  max_threshold, target, tol);
}

/// Fixed-count top-k: ratios of a linear schedule applied to `reference_length`
/// regardless of the sequence's own length.
inline PruneContext fixed_topk_context(double final_ratio, std::size_t layers, std::size_t reference_length) {
    PruneContext ctx = PruneContext::with_schedule(PruneMode::topk, linear_schedule(final_ratio, layers));
    ctx.reference_length = reference_length;
    return ctx;
}

inline Calibration calibrate_fixed_topk(const EncoderModel& model, const Dataset& data, double target,
                                        std::size_t reference_length, double tol = 1e-3) {
    const std::size_t layers = model.config.layers;
    return bisect(
        [&](double r) { return evaluate(model, fixed_topk_context(r, layers, reference_length), data).flops.relative; },
        0.0, 1.0, target, tol);
}

struct ManualRun {
    double final_threshold = 0;
    PruneContext context;
};

/// Hard fine-tuning under linearly rising thresholds matched to `target`
/// relative FLOPs on `train`. The threshold is re-matched after training since
/// attention shifts while the model adapts.
inline ManualRun train_manual_matched(const EncoderModel& model, const Dataset& train, double target,
                                      const StageConfig& hard, const EpochCallback& on_epoch = {}) {
    const std::size_t layers = model.config.layers;
    const double before = calibrate_manual(model, train, target).value;
    train_hard(model, manual_context(before, layers), train, hard, nullptr, on_epoch);
    const double after = calibrate_manual(model, train, target).value;
    return {after, manual_context(after, layers)};
}

struct RobustConfig {
    PipelineConfig ltp;
    StageConfig baseline_hard{Stage::hard};
    /// Calibrated to LTP's relative FLOPs on the short split when unset.
    std::optional<double> baseline_final_ratio;
};

struct RobustCell {
    std::string method;
    std::string split;
    std::size_t count = 0;
    std::optional<double> accuracy;
    std::optional<double> relative_flops;
};

struct RobustReport {
    std::vector<RobustCell> cells;
    std::vector<double> ltp_thresholds;
    double baseline_final_ratio = 0;
    std::size_t reference_length = 0;
    std::size_t q2 = 0, q3 = 0;

    const RobustCell& cell(const std::string& method, const std::string& split) const {
        for (const auto& c : cells) {
            if (c.method == method && c.split == split) return c;
        }
        throw std::out_of_range("robust: no cell " + method + "/" + split);
    }
};

inline const std::vector<std::string>& robust_split_names() {
    static const std::vector<std::string> names{"~Q2", "Q2~Q3", "Q3~"};
    return names;
}

/// `pretrained` should be fine-tuned on `splits.train_short` already. Trains LTP
/// and the fixed top-k baseline from copies of it, then scores both on the
/// three eval splits.
inline RobustReport run_robust(const EncoderModel& pretrained, const QuantileSplits& splits, const RobustConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
    if (splits.train_short.empty()) throw std::invalid_argument("robust: empty short training subset");
    RobustReport report;
    report.q2 = splits.q2;
    report.q3 = splits.q3;
    const std::size_t layers = pretrained.config.layers;

    EncoderModel ltp_model = pretrained.clone();
    PipelineResult ltp = run_ltp(ltp_model, splits.train_short, cfg.ltp, nullptr, on_epoch);
    report.ltp_thresholds = ltp.learned.values();

    report.reference_length = nearest_rank(lengths_of(splits.train_short), 0.5);

    EncoderModel base_model = pretrained.clone();
    if (cfg.baseline_final_ratio) {
        report.baseline_final_ratio = *cfg.baseline_final_ratio;
    } else {
        const Dataset& calib = splits.short_.empty() ? splits.train_short : splits.short_;
        const double target = evaluate(ltp_model, ltp.context, calib).flops.relative;
        report.baseline_final_ratio = calibrate_fixed_topk(base_model, calib, target, report.reference_length).value;
    }
    const PruneContext base_ctx = fixed_topk_context(report.baseline_final_ratio, layers, report.reference_length);
    train_hard(base_model, base_ctx, splits.train_short, cfg.baseline_hard, nullptr, on_epoch);

    const std::vector<const Dataset*> parts{&splits.short_, &splits.mid, &splits.long_};
    auto score = [&](const std::string& method, const EncoderModel& m, const PruneContext& ctx) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
            RobustCell c{method, robust_split_names()[i], parts[i]->size(), std::nullopt, std::nullopt};
            if (!parts[i]->empty()) {
                const EvalResult r = evaluate(m, ctx, *parts[i]);
                c.accuracy = r.accuracy;
                c.relative_flops = r.flops.relative;
            }
            report.cells.push_back(std::move(c));
        }
    };
    score("ltp", ltp_model, ltp.context);
    score("topk", base_model, base_ctx);
    return report;
}

inline std::string robust_csv(const RobustReport& r) {
    std::ostringstream os;
    os.precision(10);
    os << "method,split,count,accuracy,relative_flops\n";
    for (const auto& c : r.cells) {
        os << c.method << ',' << c.split << ',' << c.count << ',';
        if (c.accuracy) {
            os << *c.accuracy << ',' << *c.relative_flops << '\n';
        } else {
            os << "n/a,n/a\n";
        }
    }
    return os.str();
}

inline nlohmann::json to_json(const RobustReport& r) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        nlohmann::json j{{"method", c.method}, {"split", c.split}, {"count", c.count}};
        j["accuracy"] = c.accuracy ? nlohmann::json(*c.accuracy) : nlohmann::json("n/a");
        j["relative_flops"] = c.relative_flops ? nlohmann::json(*c.relative_flops) : nlohmann::json("n/a");
        cells.push_back(std::move(j));
    }
    return {{"cells", cells},
            {"ltp_thresholds", r.ltp_thresholds},
            {"baseline_final_ratio", r.baseline_final_ratio},
            {"reference_length", r.reference_length},
            {"q2", r.q2},
            {"q3", r.q3}};
}

inline RobustReport robust_report_from_json(const nlohmann::json& j) {
    RobustReport r;
    for (const auto& c : j.at("cells")) {
        RobustCell cell{c.at("method"), c.at("split"), c.at("count"), std::nullopt, std::nullopt};
        if (c.at("accuracy").is_number()) cell.accuracy = c.at("accuracy").get<double>();
        if (c.at("relative_flops").is_number()) cell.relative_flops = c.at("relative_flops").get<double>();
        r.cells.push_back(std::move(cell));
    }
    r.ltp_thresholds = j.at("ltp_thresholds").get<std::vector<double>>();
    r.baseline_final_ratio = j.at("baseline_final_ratio");
    r.reference_length = j.at("reference_length");
    r.q2 = j.at("q2");
    r.q3 = j.at("q3");
    return r;
}

} // namespace ltp
