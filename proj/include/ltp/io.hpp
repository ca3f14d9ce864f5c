#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltp/datagen.hpp"
#include "ltp/encoder.hpp"
#include "ltp/flops.hpp"
#include "ltp/pruning.hpp"
#include "ltp/training.hpp"

// JSON forms of the domain types, and the versioned checkpoint file.
namespace ltp {

using nlohmann::json;

inline constexpr const char* checkpoint_magic = "LTPLAB1";

inline json to_json(const ModelConfig& c) {
    return {{"layers", c.layers}, {"heads", c.heads}, {"d", c.d}, {"d_ffn", c.d_ffn},
            {"vocab", c.vocab},   {"n_max", c.n_max}, {"num_classes", c.num_classes}};
}

inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.d = j.value("d", c.d);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.vocab = j.value("vocab", c.vocab);
    c.n_max = j.value("n_max", c.n_max);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.validate();
    return c;
}

inline json to_json(const TaskSpec& t) {
    json comps = json::array();
    for (const auto& c : t.length.components) comps.push_back({{"weight", c.weight}, {"mu", c.mu}, {"sigma", c.sigma}});
    return {{"vocab", t.vocab},
            {"num_classes", t.num_classes},
            {"signal_per_class", t.signal_per_class},
            {"n_signal", t.n_signal},
            {"signal_fraction", t.signal_fraction},
            {"length", {{"family", t.length.family()}, {"components", comps}}},
            {"n_max", t.n_max},
            {"seed", t.seed}};
}

inline TaskSpec task_spec_from_json(const json& j, TaskSpec t = {}) {
    t.vocab = j.value("vocab", t.vocab);
    t.num_classes = j.value("num_classes", t.num_classes);
    t.signal_per_class = j.value("signal_per_class", t.signal_per_class);
    t.n_signal = j.value("n_signal", t.n_signal);
    t.signal_fraction = j.value("signal_fraction", t.signal_fraction);
    t.n_max = j.value("n_max", t.n_max);
    t.seed = j.value("seed", t.seed);
    if (j.contains("length")) {
        const auto& l = j.at("length");
        t.length.components.clear();
        if (l.contains("components")) {
            for (const auto& c : l.at("components")) {
                t.length.components.push_back({c.value("weight", 1.0), c.at("mu").get<double>(),
                                               c.at("sigma").get<double>()});
            }
        } else {
            t.length.components.push_back({1.0, l.at("mu").get<double>(), l.at("sigma").get<double>()});
        }
    }
    t.validate();
    return t;
}

inline json to_json(const StageConfig& s) {
    return {{"epochs", s.epochs},
            {"lr", s.lr},
            {"threshold_lr", s.threshold_lr},
            {"temperature", s.temperature},
            {"lambda", s.lambda},
            {"batch_size", s.batch_size},
            {"seed", s.seed},
            {"beta1", s.adam.beta1},
            {"beta2", s.adam.beta2},
            {"eps", s.adam.eps},
            {"weight_decay", s.adam.weight_decay}};
}

inline StageConfig stage_config_from_json(const json& j, StageConfig s) {
    s.epochs = j.value("epochs", s.epochs);
    s.lr = j.value("lr", s.lr);
    s.threshold_lr = j.value("threshold_lr", s.threshold_lr);
    s.temperature = j.value("temperature", s.temperature);
    s.lambda = j.value("lambda", s.lambda);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.seed = j.value("seed", s.seed);
    s.adam.beta1 = j.value("beta1", s.adam.beta1);
    s.adam.beta2 = j.value("beta2", s.adam.beta2);
    s.adam.eps = j.value("eps", s.adam.eps);
    s.adam.weight_decay = j.value("weight_decay", s.adam.weight_decay);
    s.validate();
    return s;
}

inline json to_json(const ThresholdSet& t) {
    return {{"values", t.values()}, {"temperature", t.temperature}, {"learnable", t.learnable}};
}

inline ThresholdSet thresholds_from_json(const json& j) {
    if (j.is_array()) return ThresholdSet(j.get<std::vector<double>>(), 1e-3, false);
    return ThresholdSet(j.at("values").get<std::vector<double>>(), j.value("temperature", 1e-3),
                        j.value("learnable", false));
}

inline json to_json(const FlopsReport& r) {
    return {{"per_layer", r.per_layer}, {"total", r.total}, {"baseline", r.baseline}, {"relative", r.relative}};
}

inline FlopsReport flops_report_from_json(const json& j) {
    FlopsReport r;
    r.per_layer = j.at("per_layer").get<std::vector<double>>();
    r.total = j.at("total");
    r.baseline = j.at("baseline");
    r.relative = j.at("relative");
    return r;
}

inline std::string flops_csv_header() { return "label,total,baseline,relative"; }

inline std::string flops_csv_row(const std::string& label, const FlopsReport& r) {
    std::ostringstream os;
    os.precision(12);
    os << label << ',' << r.total << ',' << r.baseline << ',' << r.relative;
    return os.str();
}

inline json to_json(const EpochRecord& e) {
    return {{"epoch", e.epoch},   {"loss", e.loss},
            {"task_loss", e.task_loss}, {"reg", e.reg},
            {"metric", e.metric}, {"mean_retained", e.mean_retained},
            {"relative_flops", e.relative_flops}, {"thresholds", e.thresholds}};
}

inline EpochRecord epoch_record_from_json(const json& j) {
    EpochRecord e;
    e.epoch = j.at("epoch");
    e.loss = j.at("loss");
    e.task_loss = j.at("task_loss");
    e.reg = j.at("reg");
    e.metric = j.at("metric");
    e.mean_retained = j.at("mean_retained").get<std::vector<double>>();
    e.relative_flops = j.at("relative_flops");
    e.thresholds = j.at("thresholds").get<std::vector<double>>();
    return e;
}

inline json to_json(const EvalResult& r) {
    return {{"accuracy", r.accuracy},
            {"flops", to_json(r.flops)},
            {"mean_retained", r.mean_retained},
            {"mean_length", r.mean_length},
            {"nesting_violations", r.nesting_violations},
            {"count", r.count}};
}

namespace detail {

inline json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

inline void load_into(Tensor& dst, const json& j, const std::string& name) {
    const auto shape = j.at("shape").get<Shape>();
    if (shape != dst.shape()) {
        throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                                 ", expected " + shape_str(dst.shape()));
    }
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != dst.size()) throw std::runtime_error("checkpoint: parameter '" + name + "' truncated");
    std::copy(data.begin(), data.end(), dst.data().begin());
}

} // namespace detail

struct Checkpoint {
    EncoderModel model;
    std::optional<ThresholdSet> thresholds;
    std::string stage;
};

inline json checkpoint_to_json(const EncoderModel& model, const std::optional<ThresholdSet>& thresholds,
                               const std::string& stage) {
    json params = json::object();
    for (const auto& p : model.named_parameters()) params[p.name] = detail::tensor_to_json(p.tensor);
    json j{{"magic", checkpoint_magic}, {"stage", stage}, {"config", to_json(model.config)}, {"params", params}};
    if (thresholds) j["thresholds"] = to_json(*thresholds);
    return j;
}

inline Checkpoint checkpoint_from_json(const json& j) {
    if (!j.is_object() || j.value("magic", std::string{}) != checkpoint_magic) {
        throw std::runtime_error(std::string("checkpoint: missing magic '") + checkpoint_magic + "'");
    }
    Checkpoint c;
    c.stage = j.value("stage", std::string{});
    c.model = EncoderModel::init(model_config_from_json(j.at("config")), 0);
    const auto& params = j.at("params");
    for (auto& p : c.model.named_parameters()) {
        if (!params.contains(p.name)) throw std::runtime_error("checkpoint: missing parameter '" + p.name + "'");
        detail::load_into(p.tensor, params.at(p.name), p.name);
    }
    if (j.contains("thresholds")) c.thresholds = thresholds_from_json(j.at("thresholds"));
    return c;
}

inline void save_checkpoint(const std::string& path, const EncoderModel& model,
                            const std::optional<ThresholdSet>& thresholds = std::nullopt,
                            const std::string& stage = "") {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    os << checkpoint_to_json(model, thresholds, stage).dump() << '\n';
    if (!os) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read checkpoint '" + path + "'");
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint '" + path + "': " + e.what());
    }
    return checkpoint_from_json(j);
}

inline json read_json_file(const std::string& path, bool allow_comments = false) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read '" + path + "'");
    try {
        return json::parse(is, nullptr, true, allow_comments);
    } catch (const json::exception& e) {
        throw std::runtime_error("'" + path + "': " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write '" + path + "'");
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("failed writing '" + path + "'");
}

inline std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read '" + path + "'");
    std::vector<json> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

} // namespace ltp
