#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltp/encoder.hpp"

namespace ltp {

struct LengthComponent {
    double weight = 1.0;
    double mu = 3.0;  // log-space location
    double sigma = 0.5;
};

/// Lognormal (one component) or a mixture of lognormals, over total sequence length.
struct LengthDistribution {
    std::vector<LengthComponent> components{LengthComponent{}};

    std::string family() const { return components.size() == 1 ? "lognormal" : "mixture"; }
};

/// Synthetic majority-vote task. Token ids: 0 is the classification token, 1 is
/// padding, then num_classes blocks of signal_per_class signal ids, then noise.
struct TaskSpec {
    std::size_t vocab = 64;
    std::size_t num_classes = 2;
    std::size_t signal_per_class = 4;
    std::size_t n_signal = 1;
    double signal_fraction = 0.1;
    LengthDistribution length;
    std::size_t n_max = 64;
    std::uint64_t seed = 1;

    std::size_t first_signal() const { return 2; }
    std::size_t first_noise() const { return first_signal() + num_classes * signal_per_class; }

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("task: need at least 2 classes");
        if (signal_per_class < 1) throw std::invalid_argument("task: signal_per_class must be >= 1");
        if (n_signal < 1) throw std::invalid_argument("task: n_signal must be >= 1");
        if (first_noise() >= vocab) throw std::invalid_argument("task: vocabulary leaves no noise tokens");
        if (n_max < n_signal + 1) {
            throw std::invalid_argument("task: n_max " + std::to_string(n_max) + " cannot hold " +
                                        std::to_string(n_signal) + " signal tokens plus the classification token");
        }
        if (signal_fraction < 0.0 || signal_fraction > 1.0) {
            throw std::invalid_argument("task: signal_fraction must lie in [0, 1]");
        }
        if (length.components.empty()) throw std::invalid_argument("task: empty length distribution");
        for (const auto& c : length.components) {
            if (!(c.weight > 0.0) || !(c.sigma >= 0.0)) {
                throw std::invalid_argument("task: bad length component");
            }
        }
    }

    /// Class of a signal token, or nullopt for every other id.
    std::optional<std::size_t> signal_class(int token) const {
        if (token < 0) return std::nullopt;
        const auto t = static_cast<std::size_t>(token);
        if (t < first_signal() || t >= first_noise()) return std::nullopt;
        return (t - first_signal()) / signal_per_class;
    }
};

struct Example {
    TokenSeq tokens;
    int label = 0;
};

using Dataset = std::vector<Example>;

/// Each sequence is the classification token followed by noise with
/// max(n_signal, round(signal_fraction · content)) signal tokens at random
/// positions. More than half of the signal tokens belong to the label's class.
inline Dataset generate(const TaskSpec& spec, std::size_t count) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::vector<double> weights;
    for (const auto& c : spec.length.components) weights.push_back(c.weight);
    std::discrete_distribution<std::size_t> pick_component(weights.begin(), weights.end());
    std::uniform_int_distribution<std::size_t> pick_label(0, spec.num_classes - 1);
    std::uniform_int_distribution<std::size_t> pick_noise(spec.first_noise(), spec.vocab - 1);
    std::uniform_int_distribution<std::size_t> pick_member(0, spec.signal_per_class - 1);
    const std::size_t min_len = spec.n_signal + 1;

    Dataset out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        const auto& comp = spec.length.components[pick_component(rng)];
        std::lognormal_distribution<double> len_dist(comp.mu, comp.sigma);
        const double raw = std::round(len_dist(rng));
        const auto total = static_cast<std::size_t>(
            std::clamp(raw, static_cast<double>(min_len), static_cast<double>(spec.n_max)));
        const std::size_t content = total - 1;
        std::size_t n_sig = static_cast<std::size_t>(std::lround(spec.signal_fraction * static_cast<double>(content)));
        n_sig = std::clamp(n_sig, spec.n_signal, content);

        const std::size_t label = pick_label(rng);
        std::uniform_int_distribution<std::size_t> pick_majority(n_sig / 2 + 1, n_sig);
        const std::size_t n_label = pick_majority(rng);
        std::uniform_int_distribution<std::size_t> pick_other(0, spec.num_classes - 2);

        Example ex;
        ex.label = static_cast<int>(label);
        ex.tokens.assign(total, 0);
        ex.tokens[0] = cls_token;
        for (std::size_t i = 1; i < total; ++i) ex.tokens[i] = static_cast<int>(pick_noise(rng));
        std::vector<std::size_t> slots(content);
        std::iota(slots.begin(), slots.end(), std::size_t{1});
        std::shuffle(slots.begin(), slots.end(), rng);
        for (std::size_t j = 0; j < n_sig; ++j) {
            std::size_t cls = label;
            if (j >= n_label) {
                cls = pick_other(rng);
                if (cls >= label) ++cls;
            }
            ex.tokens[slots[j]] = static_cast<int>(spec.first_signal() + cls * spec.signal_per_class + pick_member(rng));
        }
        out.push_back(std::move(ex));
    }
    return out;
}

/// Classifies by signal-token majority, ignoring every other token.
inline int signal_majority(const TaskSpec& spec, const TokenSeq& tokens) {
    std::vector<std::size_t> votes(spec.num_classes, 0);
    for (int t : tokens) {
        if (auto c = spec.signal_class(t)) ++votes[*c];
    }
    return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

/// Number of non-pad tokens.
inline std::size_t sequence_length(const TokenSeq& tokens) {
    return static_cast<std::size_t>(std::count_if(tokens.begin(), tokens.end(), [](int t) { return t != pad_token; }));
}

inline std::vector<std::size_t> lengths_of(const Dataset& data) {
    std::vector<std::size_t> out;
    out.reserve(data.size());
    for (const auto& ex : data) out.push_back(sequence_length(ex.tokens));
    return out;
}

struct LengthStats {
    std::size_t q1 = 0, q2 = 0, q3 = 0;
    double bin_low = 0, bin_high = 0;
    std::vector<double> histogram;
    std::vector<double> reference_histogram;
    std::optional<double> kl;
};

inline constexpr double histogram_smoothing = 1e-10;

/// Nearest-rank quantile: the ⌈p·N⌉-th smallest value.
inline std::size_t nearest_rank(std::vector<std::size_t> sorted_values, double p) {
    if (sorted_values.empty()) throw std::invalid_argument("quantile of empty sample");
    std::sort(sorted_values.begin(), sorted_values.end());
    const double rank = std::ceil(p * static_cast<double>(sorted_values.size()) - 1e-9);
    const auto idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(sorted_values.size())));
    return sorted_values[idx - 1];
}

inline std::vector<double> histogram(const std::vector<std::size_t>& values, std::size_t bins, double lo, double hi) {
    std::vector<double> h(bins, 0.0);
    const double width = (hi - lo) / static_cast<double>(bins);
    for (std::size_t v : values) {
        std::size_t b = 0;
        if (width > 0) {
            b = static_cast<std::size_t>(std::floor((static_cast<double>(v) - lo) / width));
            b = std::min(b, bins - 1);
        }
        h[b] += 1.0;
    }
    for (auto& x : h) x /= static_cast<double>(values.size());
    return h;
}

/// KL(p‖q) after giving empty bins `histogram_smoothing` mass and renormalizing.
inline double kl_divergence(std::vector<double> p, std::vector<double> q) {
    if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: histogram sizes differ");
    auto smooth = [](std::vector<double>& h) {
        double total = 0;
        for (auto& x : h) {
            if (x <= 0) x = histogram_smoothing;
            total += x;
        }
        for (auto& x : h) x /= total;
    };
    smooth(p);
    smooth(q);
    double kl = 0;
    for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
    return kl;
}

/// Quantiles and histogram of `lengths`; with a reference sample, both are
/// binned over the union range and KL(lengths‖reference) is reported.
inline LengthStats length_stats(const std::vector<std::size_t>& lengths, std::size_t bins,
                                const std::optional<std::vector<std::size_t>>& reference = std::nullopt) {
    if (lengths.empty()) throw std::invalid_argument("length_stats: no lengths");
    if (bins < 2) throw std::invalid_argument("length_stats: need at least 2 bins");
    LengthStats s;
    s.q1 = nearest_rank(lengths, 0.25);
    s.q2 = nearest_rank(lengths, 0.50);
    s.q3 = nearest_rank(lengths, 0.75);
    auto [mn, mx] = std::minmax_element(lengths.begin(), lengths.end());
    double lo = static_cast<double>(*mn), hi = static_cast<double>(*mx);
    if (reference) {
        if (reference->empty()) throw std::invalid_argument("length_stats: empty reference");
        auto [rmn, rmx] = std::minmax_element(reference->begin(), reference->end());
        lo = std::min(lo, static_cast<double>(*rmn));
        hi = std::max(hi, static_cast<double>(*rmx));
    }
    s.bin_low = lo;
    s.bin_high = hi;
    s.histogram = histogram(lengths, bins, lo, hi);
    if (reference) {
        s.reference_histogram = histogram(*reference, bins, lo, hi);
        s.kl = kl_divergence(s.histogram, s.reference_histogram);
    }
    return s;
}

struct QuantileSplits {
    std::size_t q2 = 0, q3 = 0;
    Dataset short_;  // length ≤ Q2
    Dataset mid;     // Q2 < length ≤ Q3
    Dataset long_;   // length > Q3
    Dataset train_short;
};

/// Partitions `eval` by its own Q2/Q3; `train` examples with length ≤ Q2 form
/// the short-only training subset.
inline QuantileSplits quantile_split(const Dataset& eval, const Dataset& train = {}) {
    if (eval.empty()) throw std::invalid_argument("quantile_split: empty dataset");
    const auto lens = lengths_of(eval);
    QuantileSplits s;
    s.q2 = nearest_rank(lens, 0.5);
    s.q3 = nearest_rank(lens, 0.75);
    for (std::size_t i = 0; i < eval.size(); ++i) {
        if (lens[i] <= s.q2) {
            s.short_.push_back(eval[i]);
        } else if (lens[i] <= s.q3) {
            s.mid.push_back(eval[i]);
        } else {
            s.long_.push_back(eval[i]);
        }
    }
    for (const auto& ex : train) {
        if (sequence_length(ex.tokens) <= s.q2) s.train_short.push_back(ex);
    }
    return s;
}

inline void write_dataset(std::ostream& os, const Dataset& data) {
    for (const auto& ex : data) {
        nlohmann::json j{{"tokens", ex.tokens}, {"label", ex.label}};
        os << j.dump() << '\n';
    }
}

inline void write_dataset(const std::string& path, const Dataset& data) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write dataset '" + path + "'");
    write_dataset(os, data);
    if (!os) throw std::runtime_error("failed writing dataset '" + path + "'");
}

inline Dataset read_dataset(std::istream& is) {
    Dataset out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("tokens").get<TokenSeq>(), j.at("label").get<int>()});
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("dataset line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read dataset '" + path + "'");
    return read_dataset(is);
}

inline nlohmann::json to_json(const LengthStats& s) {
    nlohmann::json j{{"q1", s.q1}, {"q2", s.q2}, {"q3", s.q3}, {"bin_low", s.bin_low},
                     {"bin_high", s.bin_high}, {"histogram", s.histogram}};
    if (s.kl) {
        j["reference_histogram"] = s.reference_histogram;
        j["kl"] = *s.kl;
    }
    return j;
}

inline LengthStats length_stats_from_json(const nlohmann::json& j) {
    LengthStats s;
    s.q1 = j.at("q1");
    s.q2 = j.at("q2");
    s.q3 = j.at("q3");
    s.bin_low = j.at("bin_low");
    s.bin_high = j.at("bin_high");
    s.histogram = j.at("histogram").get<std::vector<double>>();
    if (j.contains("kl")) {
        s.kl = j.at("kl").get<double>();
        s.reference_histogram = j.at("reference_histogram").get<std::vector<double>>();
    }
    return s;
}

} // namespace ltp
