#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ltp/bench.hpp"
#include "ltp/datagen.hpp"
#include "ltp/experiments.hpp"
#include "ltp/io.hpp"
#include "ltp/training.hpp"

namespace ltp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flags, bad config values, or a mode the checkpoint cannot serve. Exit code 1.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SweepConfig {
    std::vector<double> lambdas{0.001, 0.05, 0.2};
    std::vector<double> temperatures{1e-3};
    std::vector<double> final_ratios{0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<double> manual_final_thresholds{0.005, 0.01, 0.02, 0.04};
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::string output_dir = "runs/default";
    TaskSpec task = [] {
        TaskSpec t;
        t.length.components = {{1.0, std::log(24.0), 0.5}};
        return t;
    }();
    std::size_t train_count = 2000;
    std::size_t eval_count = 1000;
    std::size_t stats_bins = 20;
    ModelConfig model;
    StageConfig pretrain = [] {
        StageConfig s{Stage::plain};
        s.epochs = 6;
        return s;
    }();
    StageConfig soft = [] {
        StageConfig s{Stage::soft};
        s.epochs = 3;
        s.lr = 5e-4;
        s.lambda = 0.05;
        return s;
    }();
    StageConfig hard = [] {
        StageConfig s{Stage::hard};
        s.epochs = 4;
        s.lr = 5e-4;
        return s;
    }();
    double init_final_threshold = 0.01;
    SweepConfig sweep;
    bench::BenchConfig bench;
    std::optional<double> robust_baseline_final_ratio;
    /// Short-only training leaves scores near 1/n of short inputs, far above 0.01.
    double robust_init_final_threshold = 0.03;

    PipelineConfig pipeline() const { return {init_final_threshold, soft, hard}; }
    RobustConfig robust() const {
        RobustConfig r;
        r.ltp = pipeline();
        r.ltp.init_final_threshold = robust_init_final_threshold;
        r.baseline_hard = hard;
        r.baseline_final_ratio = robust_baseline_final_ratio;
        return r;
    }
    TaskSpec train_task() const {
        TaskSpec t = task;
        t.seed = seed;
        return t;
    }
    TaskSpec eval_task() const {
        TaskSpec t = task;
        t.seed = seed + 1;
        return t;
    }
};

inline json to_json(const RunConfig& c) {
    json task = ltp::to_json(c.task);
    task.erase("seed");
    json robust = json::object();
    robust["baseline_final_ratio"] = c.robust_baseline_final_ratio ? json(*c.robust_baseline_final_ratio) : json(nullptr);
    robust["init_final_threshold"] = c.robust_init_final_threshold;
    return {{"seed", c.seed},
            {"output_dir", c.output_dir},
            {"task", task},
            {"train_count", c.train_count},
            {"eval_count", c.eval_count},
            {"stats_bins", c.stats_bins},
            {"model", ltp::to_json(c.model)},
            {"pretrain", ltp::to_json(c.pretrain)},
            {"soft", ltp::to_json(c.soft)},
            {"hard", ltp::to_json(c.hard)},
            {"init_final_threshold", c.init_final_threshold},
            {"sweep",
             {{"lambdas", c.sweep.lambdas},
              {"temperatures", c.sweep.temperatures},
              {"final_ratios", c.sweep.final_ratios},
              {"manual_final_thresholds", c.sweep.manual_final_thresholds}}},
            {"bench",
             {{"lengths", c.bench.lengths},
              {"ratios", c.bench.ratios},
              {"batch", c.bench.batch},
              {"repetitions", c.bench.repetitions},
              {"warmup", c.bench.warmup},
              {"seed", c.bench.seed}}},
            {"robust", robust}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.output_dir = j.value("output_dir", c.output_dir);
        if (j.contains("task")) c.task = task_spec_from_json(j.at("task"), c.task);
        c.train_count = j.value("train_count", c.train_count);
        c.eval_count = j.value("eval_count", c.eval_count);
        c.stats_bins = j.value("stats_bins", c.stats_bins);
        if (j.contains("model")) c.model = model_config_from_json(j.at("model"), c.model);
        if (j.contains("pretrain")) c.pretrain = stage_config_from_json(j.at("pretrain"), c.pretrain);
        if (j.contains("soft")) c.soft = stage_config_from_json(j.at("soft"), c.soft);
        if (j.contains("hard")) c.hard = stage_config_from_json(j.at("hard"), c.hard);
        c.init_final_threshold = j.value("init_final_threshold", c.init_final_threshold);
        if (j.contains("sweep")) {
            const auto& s = j.at("sweep");
            c.sweep.lambdas = s.value("lambdas", c.sweep.lambdas);
            c.sweep.temperatures = s.value("temperatures", c.sweep.temperatures);
            c.sweep.final_ratios = s.value("final_ratios", c.sweep.final_ratios);
            c.sweep.manual_final_thresholds = s.value("manual_final_thresholds", c.sweep.manual_final_thresholds);
        }
        if (j.contains("bench")) {
            const auto& b = j.at("bench");
            c.bench.lengths = b.value("lengths", c.bench.lengths);
            c.bench.ratios = b.value("ratios", c.bench.ratios);
            c.bench.batch = b.value("batch", c.bench.batch);
            c.bench.repetitions = b.value("repetitions", c.bench.repetitions);
            c.bench.warmup = b.value("warmup", c.bench.warmup);
            c.bench.seed = b.value("seed", c.bench.seed);
            c.bench.validate();
        }
        if (j.contains("robust")) {
            const auto& r = j.at("robust");
            if (r.contains("baseline_final_ratio") && !r.at("baseline_final_ratio").is_null()) {
                c.robust_baseline_final_ratio = r.at("baseline_final_ratio").get<double>();
            }
            c.robust_init_final_threshold = r.value("init_final_threshold", c.robust_init_final_threshold);
            if (!(c.robust_init_final_threshold > 0.0)) {
                throw std::invalid_argument("robust.init_final_threshold must be positive");
            }
        }
        if (c.task.vocab != c.model.vocab) throw std::invalid_argument("task.vocab and model.vocab differ");
        if (c.task.num_classes != c.model.num_classes) {
            throw std::invalid_argument("task.num_classes and model.num_classes differ");
        }
        if (c.task.n_max > c.model.n_max) throw std::invalid_argument("task.n_max exceeds model.n_max");
    } catch (const json::exception& e) {
        throw UsageError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    return c;
}

/// `key.path=value`; the value is parsed as JSON and falls back to a string.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    std::string pointer;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) pointer += "/" + part;
    try {
        j[json::json_pointer(pointer)] = value;
    } catch (const json::exception& e) {
        throw UsageError("--set " + key + ": " + e.what());
    }
}

inline RunConfig load_run_config(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
    json j = to_json(RunConfig{});
    if (path) {
        if (!fs::exists(*path)) throw UsageError("config file '" + *path + "' does not exist");
        j.merge_patch(read_json_file(*path, true));
    }
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j);
}

namespace detail {

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) {
        throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
    }
}

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
    os << text;
    if (!os) throw std::runtime_error("failed writing '" + path.string() + "'");
}

inline Dataset read_existing(const fs::path& path) {
    if (!fs::exists(path)) throw std::runtime_error("dataset '" + path.string() + "' not found; run `ltp gen` first");
    return read_dataset(path.string());
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Appends one JSON line per epoch as it finishes, so a diverged run keeps its history.
class EpochLog {
public:
    EpochLog(const fs::path& path, std::ostream& log, std::string label)
        : os_(path), log_(log), label_(std::move(label)) {
        if (!os_) throw std::runtime_error("cannot write '" + path.string() + "'");
    }
    EpochCallback callback() {
        return [this](const EpochRecord& r) {
            os_ << ltp::to_json(r).dump() << '\n';
            os_.flush();
            log_ << label_ << " epoch " << r.epoch << " loss " << fmt(r.loss) << " metric " << fmt(r.metric)
                 << " relative_flops " << fmt(r.relative_flops) << '\n';
        };
    }

private:
    std::ofstream os_;
    std::ostream& log_;
    std::string label_;
};

inline TrainReport run_logged(const fs::path& path, std::ostream& log, const std::string& label,
                              const std::function<TrainReport(const EpochCallback&)>& body) {
    EpochLog epochs(path, log, label);
    return body(epochs.callback());
}

struct Datasets {
    Dataset train;
    Dataset eval;
};

inline Datasets load_datasets(const RunConfig& cfg, const std::optional<std::string>& train_path,
                              const std::optional<std::string>& eval_path) {
    const fs::path data = fs::path(cfg.output_dir) / "data";
    return {read_existing(train_path ? fs::path(*train_path) : data / "train.jsonl"),
            read_existing(eval_path ? fs::path(*eval_path) : data / "eval.jsonl")};
}

} // namespace detail

inline json gen_stats(const Dataset& train, const Dataset& eval, std::size_t bins) {
    const auto train_len = lengths_of(train);
    const auto eval_len = lengths_of(eval);
    return {{"train", ltp::to_json(length_stats(train_len, bins))},
            {"eval", ltp::to_json(length_stats(eval_len, bins, train_len))}};
}

inline int cmd_gen(const RunConfig& cfg, std::ostream& out) {
    const fs::path dir = fs::path(cfg.output_dir) / "data";
    detail::ensure_dir(dir);
    const Dataset train = generate(cfg.train_task(), cfg.train_count);
    const Dataset eval = generate(cfg.eval_task(), cfg.eval_count);
    write_dataset((dir / "train.jsonl").string(), train);
    write_dataset((dir / "eval.jsonl").string(), eval);
    const json stats = gen_stats(train, eval, cfg.stats_bins);
    write_json_file((dir / "stats.json").string(), stats);
    const auto& e = stats.at("eval");
    out << "train " << train.size() << " eval " << eval.size() << '\n'
        << "eval lengths Q1 " << e.at("q1") << " Q2 " << e.at("q2") << " Q3 " << e.at("q3") << '\n'
        << "KL(eval||train) " << detail::fmt(e.at("kl").get<double>()) << '\n'
        << "wrote " << dir.string() << '\n';
    return 0;
}

struct TrainOptions {
    bool sweep = false;
    std::optional<std::string> train_path, eval_path, pretrained;
};

struct LtpRunSummary {
    double lambda = 0;
    double temperature = 0;
    EvalResult result;
    std::vector<double> thresholds;
};

inline LtpRunSummary train_ltp_run(const EncoderModel& pretrained, const Dataset& train, const Dataset& eval,
                                   PipelineConfig pipeline, const fs::path& dir, std::ostream& log) {
    detail::ensure_dir(dir);
    EncoderModel model = pretrained.clone();
    const std::string tag = "lambda=" + detail::fmt(pipeline.soft.lambda) + " T=" + detail::fmt(pipeline.soft.temperature);
    ThresholdSet learned = init_thresholds(pipeline.init_final_threshold, model.config.layers, pipeline.soft.temperature);
    detail::run_logged(dir / "report_soft.jsonl", log, "soft " + tag, [&](const EpochCallback& cb) {
        return train_soft(model, learned, train, pipeline.soft, &eval, cb);
    });
    save_checkpoint((dir / "soft.ckpt.json").string(), model, learned, "soft");
    const PruneContext ctx = binarize_and_fix(learned);
    detail::run_logged(dir / "report_hard.jsonl", log, "hard " + tag, [&](const EpochCallback& cb) {
        return train_hard(model, ctx, train, pipeline.hard, &eval, cb);
    });
    save_checkpoint((dir / "hard.ckpt.json").string(), model, *ctx.thresholds, "hard");
    write_json_file((dir / "thresholds.json").string(), ltp::to_json(*ctx.thresholds));

    LtpRunSummary s{pipeline.soft.lambda, pipeline.soft.temperature, evaluate(model, ctx, eval),
                    ctx.thresholds->values()};
    return s;
}

inline std::string sweep_csv_header() {
    return "lambda,temperature,accuracy,relative_flops,mean_retained,baseline_accuracy";
}

inline int cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out) {
    const auto t0 = std::chrono::steady_clock::now();
    if (opt.sweep && (cfg.sweep.lambdas.empty() || cfg.sweep.temperatures.empty())) {
        throw UsageError("train --sweep needs non-empty sweep.lambdas and sweep.temperatures");
    }
    const auto data = detail::load_datasets(cfg, opt.train_path, opt.eval_path);
    const fs::path dir(cfg.output_dir);
    detail::ensure_dir(dir);

    EncoderModel model;
    if (opt.pretrained) {
        Checkpoint ck = load_checkpoint(*opt.pretrained);
        model = std::move(ck.model);
        out << "loaded pretrained model from " << *opt.pretrained << '\n';
    } else {
        model = EncoderModel::init(cfg.model, cfg.seed);
        detail::run_logged(dir / "report_pretrain.jsonl", out, "pretrain", [&](const EpochCallback& cb) {
            return train_plain(model, data.train, cfg.pretrain, &data.eval, cb);
        });
        save_checkpoint((dir / "pretrain.ckpt.json").string(), model, std::nullopt, "pretrain");
    }
    const EvalResult baseline = evaluate(model, PruneContext::none(), data.eval);
    out << "baseline accuracy " << detail::fmt(baseline.accuracy) << '\n';

    std::vector<LtpRunSummary> runs;
    if (opt.sweep) {
        for (double lambda : cfg.sweep.lambdas) {
            for (double temperature : cfg.sweep.temperatures) {
                PipelineConfig p = cfg.pipeline();
                p.soft.lambda = lambda;
                p.soft.temperature = temperature;
                const fs::path sub = dir / ("lambda_" + detail::fmt(lambda) + "_T_" + detail::fmt(temperature));
                runs.push_back(train_ltp_run(model, data.train, data.eval, p, sub, out));
            }
        }
    } else {
        runs.push_back(train_ltp_run(model, data.train, data.eval, cfg.pipeline(), dir, out));
    }

    std::ostringstream csv;
    csv << sweep_csv_header() << '\n';
    json rows = json::array();
    for (const auto& r : runs) {
        const double retained = detail::mean_of(r.result.mean_retained);
        csv << detail::fmt(r.lambda) << ',' << detail::fmt(r.temperature) << ',' << detail::fmt(r.result.accuracy) << ','
            << detail::fmt(r.result.flops.relative) << ',' << detail::fmt(retained) << ','
            << detail::fmt(baseline.accuracy) << '\n';
        rows.push_back({{"lambda", r.lambda},
                        {"temperature", r.temperature},
                        {"thresholds", r.thresholds},
                        {"eval", ltp::to_json(r.result)}});
        out << "lambda " << detail::fmt(r.lambda) << " T " << detail::fmt(r.temperature) << " accuracy "
            << detail::fmt(r.result.accuracy) << " relative_flops " << detail::fmt(r.result.flops.relative) << '\n';
    }
    detail::write_text(dir / "sweep.csv", csv.str());
    write_json_file((dir / "summary.json").string(), {{"config", to_json(cfg)},
                                                      {"baseline", ltp::to_json(baseline)},
                                                      {"runs", rows},
                                                      {"elapsed_seconds", detail::seconds_since(t0)}});
    return 0;
}

struct EvalOptions {
    std::string checkpoint;
    std::string data;
    std::string mode = "hard";
    std::optional<std::string> thresholds_path;
    std::optional<double> manual_threshold;
    std::optional<double> final_ratio;
    std::optional<std::size_t> reference_length;
    std::vector<double> sweep;
    bool compare_manual = false;
    std::optional<std::string> out_json;
    std::optional<std::string> out_csv;
};

struct EvalRow {
    std::string method;
    std::string param;
    EvalResult result;
};

inline std::string eval_csv(const std::vector<EvalRow>& rows) {
    std::ostringstream os;
    os << "method,param,accuracy,relative_flops,mean_retained\n";
    for (const auto& r : rows) {
        os << r.method << ',' << r.param << ',' << detail::fmt(r.result.accuracy) << ','
           << detail::fmt(r.result.flops.relative) << ',' << detail::fmt(detail::mean_of(r.result.mean_retained))
           << '\n';
    }
    return os.str();
}

inline PruneContext eval_context(PruneMode mode, const Checkpoint& ck, const EvalOptions& opt, double param) {
    const std::size_t layers = ck.model.config.layers;
    switch (mode) {
    case PruneMode::none: return PruneContext::none();
    case PruneMode::hard: {
        std::optional<ThresholdSet> t = ck.thresholds;
        if (opt.thresholds_path) t = thresholds_from_json(read_json_file(*opt.thresholds_path));
        if (!t) throw UsageError("mode hard: checkpoint has no thresholds and --thresholds was not given");
        if (t->layers() != layers) throw UsageError("mode hard: threshold count does not match the model depth");
        t->freeze();
        return PruneContext::with_thresholds(PruneMode::hard, *t);
    }
    case PruneMode::manual: return manual_context(param, layers);
    case PruneMode::topk: {
        PruneContext ctx = PruneContext::with_schedule(PruneMode::topk, linear_schedule(param, layers));
        ctx.reference_length = opt.reference_length;
        return ctx;
    }
    case PruneMode::spatten:
        if (layers < 4) throw UsageError("mode spatten: the schedule needs at least 4 layers");
        return PruneContext::with_schedule(PruneMode::spatten, spatten_schedule(param, layers));
    case PruneMode::soft: throw UsageError("mode soft is a training relaxation; evaluate with hard");
    }
    throw UsageError("unknown mode");
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out) {
    PruneMode mode;
    try {
        mode = parse_prune_mode(opt.mode);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const Checkpoint ck = load_checkpoint(opt.checkpoint);
    const Dataset data = detail::read_existing(opt.data);

    std::vector<double> params = opt.sweep;
    if (params.empty()) {
        if (mode == PruneMode::manual) {
            if (!opt.manual_threshold) throw UsageError("mode manual needs --manual-threshold or --sweep");
            params.push_back(*opt.manual_threshold);
        } else if (mode == PruneMode::topk || mode == PruneMode::spatten) {
            if (!opt.final_ratio) throw UsageError("mode " + opt.mode + " needs a schedule: pass --final-ratio or --sweep");
            params.push_back(*opt.final_ratio);
        } else {
            params.push_back(0.0);
        }
    } else if (mode == PruneMode::none || mode == PruneMode::hard) {
        throw UsageError("--sweep applies to manual, topk and spatten modes");
    }

    std::vector<EvalRow> rows;
    for (double p : params) {
        const PruneContext ctx = eval_context(mode, ck, opt, p);
        const bool has_param = mode != PruneMode::none && mode != PruneMode::hard;
        rows.push_back({to_string(mode), has_param ? detail::fmt(p) : "", evaluate(ck.model, ctx, data)});
    }
    if (opt.compare_manual) {
        if (mode != PruneMode::hard) throw UsageError("--compare-manual needs mode hard");
        const double target = rows.front().result.flops.relative;
        const Calibration c = calibrate_manual(ck.model, data, target);
        rows.push_back({"manual", detail::fmt(c.value), evaluate(ck.model, manual_context(c.value, ck.model.config.layers), data)});
    }

    for (const auto& r : rows) {
        out << r.method << (r.param.empty() ? "" : " " + r.param) << " accuracy " << detail::fmt(r.result.accuracy)
            << " relative_flops " << detail::fmt(r.result.flops.relative) << " retained";
        for (double v : r.result.mean_retained) out << ' ' << detail::fmt(v);
        out << '\n';
    }
    if (opt.out_csv) detail::write_text(*opt.out_csv, eval_csv(rows));
    if (opt.out_json) {
        json j = json::array();
        for (const auto& r : rows) j.push_back({{"method", r.method}, {"param", r.param}, {"eval", ltp::to_json(r.result)}});
        write_json_file(*opt.out_json, j);
    }
    return 0;
}

inline int cmd_robust(const RunConfig& cfg, const TrainOptions& opt, std::ostream& out) {
    const auto data = detail::load_datasets(cfg, opt.train_path, opt.eval_path);
    const QuantileSplits splits = quantile_split(data.eval, data.train);
    const fs::path dir = fs::path(cfg.output_dir) / "robust";
    detail::ensure_dir(dir);
    out << "Q2 " << splits.q2 << " Q3 " << splits.q3 << " short training examples " << splits.train_short.size()
        << '\n';

    EncoderModel model = EncoderModel::init(cfg.model, cfg.seed);
    detail::run_logged(dir / "report_pretrain.jsonl", out, "pretrain", [&](const EpochCallback& cb) {
        return train_plain(model, splits.train_short, cfg.pretrain, nullptr, cb);
    });
    const RobustReport report = run_robust(model, splits, cfg.robust());
    const std::string csv = robust_csv(report);
    detail::write_text(dir / "robust.csv", csv);
    write_json_file((dir / "robust.json").string(), ltp::to_json(report));
    out << csv;
    return 0;
}

inline int cmd_bench(const RunConfig& cfg, const std::optional<std::string>& out_path, std::ostream& out) {
    const bench::BenchResult r = bench::run_bench(cfg.bench);
    const fs::path csv_path = out_path ? fs::path(*out_path) : fs::path(cfg.output_dir) / "bench.csv";
    if (csv_path.has_parent_path()) detail::ensure_dir(csv_path.parent_path());
    detail::write_text(csv_path, bench::report_csv(r));
    fs::path json_path = csv_path;
    json_path.replace_extension(".json");
    write_json_file(json_path.string(), bench::to_json(r));

    out << "timer resolution " << detail::fmt(r.timer_resolution_ns) << " ns"
        << (r.timer_coarse ? " (coarse relative to kernel latency)" : "") << '\n';
    for (std::size_t n : cfg.bench.lengths) {
        std::vector<double> slow;
        for (const auto& c : r.cells) {
            if (c.length == n) slow.push_back(c.slowdown());
        }
        out << "n=" << n << " mean top-k slowdown " << detail::fmt(detail::mean_of(slow)) << "x, threshold spread "
            << detail::fmt(r.threshold_ratio_spread(n)) << "x\n";
    }
    out << "keep-set mismatches " << r.mismatches << '\n' << "wrote " << csv_path.string() << '\n';
    return r.mismatches == 0 ? 0 : 2;
}

struct StatsOptions {
    std::optional<std::string> data;
    std::optional<std::string> reference;
    std::optional<std::string> checkpoint;
    std::size_t bins = 20;
    std::optional<std::string> out_json;
};

inline int cmd_stats(const StatsOptions& opt, std::ostream& out) {
    if (!opt.data && !opt.checkpoint) throw UsageError("stats needs --data or --checkpoint");
    json j = json::object();
    if (opt.data) {
        const auto lengths = lengths_of(detail::read_existing(*opt.data));
        std::optional<std::vector<std::size_t>> ref;
        if (opt.reference) ref = lengths_of(detail::read_existing(*opt.reference));
        j["lengths"] = ltp::to_json(length_stats(lengths, opt.bins, ref));
    }
    if (opt.checkpoint) {
        const Checkpoint ck = load_checkpoint(*opt.checkpoint);
        j["stage"] = ck.stage;
        j["model"] = ltp::to_json(ck.model.config);
        j["thresholds"] = ck.thresholds ? ltp::to_json(*ck.thresholds) : json(nullptr);
    }
    if (opt.out_json) write_json_file(*opt.out_json, j);
    out << j.dump(2) << '\n';
    return 0;
}

/// Parses argv and dispatches. Exit codes: 0 success, 1 usage error, 2 runtime failure.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Learned token pruning lab"};
    app.require_subcommand(1);

    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    auto add_config = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "Run config (JSON, comments allowed)");
        sub->add_option("--set", overrides, "Override a config key, e.g. soft.lambda=0.2");
    };

    auto* gen = app.add_subcommand("gen", "Generate train/eval datasets and length statistics");
    add_config(gen);

    TrainOptions train_opt;
    auto* train = app.add_subcommand("train", "Pretrain, soft-train thresholds, binarize, hard fine-tune");
    add_config(train);
    train->add_flag("--sweep", train_opt.sweep, "Run every (lambda, temperature) pair from the sweep lists");
    train->add_option("--train", train_opt.train_path, "Training JSONL (default <output_dir>/data/train.jsonl)");
    train->add_option("--eval", train_opt.eval_path, "Eval JSONL (default <output_dir>/data/eval.jsonl)");
    train->add_option("--pretrained", train_opt.pretrained, "Skip pretraining and start from this checkpoint");

    EvalOptions eval_opt;
    auto* eval = app.add_subcommand("eval", "Accuracy and FLOPs of a checkpoint under a pruning mode");
    eval->add_option("--checkpoint", eval_opt.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", eval_opt.data, "JSONL dataset")->required();
    eval->add_option("--mode", eval_opt.mode, "none | hard | manual | topk | spatten");
    eval->add_option("--thresholds", eval_opt.thresholds_path, "Threshold JSON overriding the checkpoint's");
    eval->add_option("--manual-threshold", eval_opt.manual_threshold, "Final-layer threshold for mode manual");
    eval->add_option("--final-ratio", eval_opt.final_ratio, "Final retain ratio for topk/spatten");
    eval->add_option("--reference-length", eval_opt.reference_length, "Fixed token count base for topk");
    eval->add_option("--sweep", eval_opt.sweep, "Parameter values to sweep (manual/topk/spatten)")->delimiter(',');
    eval->add_flag("--compare-manual", eval_opt.compare_manual, "Add a manual row matched to the learned FLOPs");
    eval->add_option("--out", eval_opt.out_json, "Write rows as JSON");
    eval->add_option("--csv", eval_opt.out_csv, "Write rows as CSV");

    TrainOptions robust_opt;
    auto* robust = app.add_subcommand("robust", "Train on short sequences, evaluate across length quartiles");
    add_config(robust);
    robust->add_option("--train", robust_opt.train_path, "Training JSONL");
    robust->add_option("--eval", robust_opt.eval_path, "Eval JSONL");

    std::optional<std::string> bench_out;
    auto* bench_cmd = app.add_subcommand("bench", "Threshold vs top-k selection latency");
    add_config(bench_cmd);
    bench_cmd->add_option("--out", bench_out, "CSV path (default <output_dir>/bench.csv)");

    StatsOptions stats_opt;
    auto* stats = app.add_subcommand("stats", "Length statistics of a dataset, or thresholds of a checkpoint");
    stats->add_option("--data", stats_opt.data, "JSONL dataset");
    stats->add_option("--reference", stats_opt.reference, "Reference JSONL for KL(data||reference)");
    stats->add_option("--bins", stats_opt.bins, "Histogram bins")->check(CLI::Range(2, 100000));
    stats->add_option("--checkpoint", stats_opt.checkpoint, "Checkpoint whose thresholds to export");
    stats->add_option("--out", stats_opt.out_json, "Write JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }

    try {
        if (*gen) return cmd_gen(load_run_config(config_path, overrides), out);
        if (*train) return cmd_train(load_run_config(config_path, overrides), train_opt, out);
        if (*eval) return cmd_eval(eval_opt, out);
        if (*robust) return cmd_robust(load_run_config(config_path, overrides), robust_opt, out);
        if (*bench_cmd) return cmd_bench(load_run_config(config_path, overrides), bench_out, out);
        if (*stats) return cmd_stats(stats_opt, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const TrainingDiverged& e) {
        err << "error: " << e.what() << " (partial reports kept)\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}

} // namespace ltp::cli
