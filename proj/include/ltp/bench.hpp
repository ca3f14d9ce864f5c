#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ltp/pruning.hpp"

// Threshold comparison vs top-k selection over batches of importance scores.
namespace ltp::bench {

struct BenchConfig {
    std::vector<std::size_t> lengths{128, 256, 512, 1024};
    std::vector<double> ratios{0.1, 0.2, 0.3, 0.4, 0.5};
    std::size_t batch = 32;
    std::size_t repetitions = 1000;
    std::size_t warmup = 20;
    std::uint64_t seed = 1;

    void validate() const {
        if (repetitions < 1) throw std::invalid_argument("bench: repetitions must be >= 1");
        if (batch < 1) throw std::invalid_argument("bench: batch must be >= 1");
        for (double r : ratios) {
            if (!(r > 0.0 && r <= 1.0)) throw std::invalid_argument("bench: ratios must lie in (0, 1]");
        }
        for (std::size_t n : lengths) {
            if (n < 1) throw std::invalid_argument("bench: lengths must be >= 1");
        }
    }
};

struct Timing {
    double mean_ns = 0;
    double std_ns = 0;
    double min_ns = 0;
    double median_ns = 0;
    std::vector<double> samples;
};

struct BenchCell {
    std::size_t length = 0;
    double ratio = 0;
    std::size_t k = 0;
    Timing threshold;
    Timing topk_sort;
    Timing topk_select;
    /// Faster of the two top-k variants by mean.
    std::string topk_variant;
    std::size_t mismatches = 0;

    const Timing& topk() const { return topk_variant == "sort" ? topk_sort : topk_select; }
    double slowdown() const { return topk().mean_ns / threshold.mean_ns; }
};

struct BenchResult {
    std::vector<BenchCell> cells;
    double timer_resolution_ns = 0;
    bool timer_coarse = false;
    std::size_t mismatches = 0;

    /// max/min threshold median latency across ratios at one length.
    double threshold_ratio_spread(std::size_t length) const {
        double lo = std::numeric_limits<double>::infinity(), hi = 0;
        for (const auto& c : cells) {
            if (c.length != length) continue;
            lo = std::min(lo, c.threshold.median_ns);
            hi = std::max(hi, c.threshold.median_ns);
        }
        return hi / lo;
    }
};

struct StrictGreater {
    bool operator()(double s, double theta) const { return s > theta; }
};

/// Comparator that counts how often it runs.
struct CountingGreater {
    std::size_t* count;
    bool operator()(double s, double theta) const {
        ++*count;
        return s > theta;
    }
};

/// One pass, one comparison per score, no ordering work.
template <class Compare = StrictGreater>
inline std::size_t threshold_kernel(std::span<const double> scores, double theta, std::span<std::uint8_t> keep,
                                    Compare cmp = {}) {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool k = cmp(scores[i], theta);
        keep[i] = static_cast<std::uint8_t>(k);
        kept += k;
    }
    return kept;
}

namespace detail {

inline void mark_first(std::span<const std::size_t> order, std::size_t k, std::span<std::uint8_t> keep) {
    std::fill(keep.begin(), keep.end(), std::uint8_t{0});
    for (std::size_t i = 0; i < k; ++i) keep[order[i]] = 1;
}

} // namespace detail

/// Full sort by (score desc, index asc), keep the first k.
inline void topk_sort_kernel(std::span<const double> scores, std::size_t k, std::span<std::uint8_t> keep,
                             std::vector<std::size_t>& scratch) {
    scratch.resize(scores.size());
    std::iota(scratch.begin(), scratch.end(), std::size_t{0});
    std::sort(scratch.begin(), scratch.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    detail::mark_first(scratch, k, keep);
}

/// Partition around the k-th element (introselect), keep the first k.
inline void topk_select_kernel(std::span<const double> scores, std::size_t k, std::span<std::uint8_t> keep,
                               std::vector<std::size_t>& scratch) {
    scratch.resize(scores.size());
    std::iota(scratch.begin(), scratch.end(), std::size_t{0});
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(k - 1), scratch.end(),
                     [&](std::size_t a, std::size_t b) {
                         return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                     });
    detail::mark_first(scratch, k, keep);
}

/// Threshold halfway between the k-th and (k+1)-th largest values, so that
/// exactly k distinct scores exceed it.
inline double midpoint_threshold(std::span<const double> scores, std::size_t k) {
    std::vector<double> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>{});
    if (k >= sorted.size()) return sorted.back() - 1.0;
    return 0.5 * (sorted[k - 1] + sorted[k]);
}

inline Timing summarize(std::vector<double> samples) {
    Timing t;
    const double n = static_cast<double>(samples.size());
    t.mean_ns = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double var = 0;
    for (double s : samples) var += (s - t.mean_ns) * (s - t.mean_ns);
    t.std_ns = samples.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    t.samples = samples;
    std::sort(samples.begin(), samples.end());
    t.min_ns = samples.front();
    const std::size_t mid = samples.size() / 2;
    t.median_ns = samples.size() % 2 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
    return t;
}

/// Smallest observable tick of the monotonic clock.
inline double timer_resolution_ns() {
    using clock = std::chrono::steady_clock;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 200; ++i) {
        const auto a = clock::now();
        auto b = clock::now();
        while (b == a) b = clock::now();
        best = std::min(best, std::chrono::duration<double, std::nano>(b - a).count());
    }
    return best;
}

/// Times both selection methods on identical random score batches. Ratios at
/// one length are interleaved per repetition so clock drift spreads evenly.
inline BenchResult run_bench(const BenchConfig& cfg) {
    cfg.validate();
    using clock = std::chrono::steady_clock;
    BenchResult result;
    result.timer_resolution_ns = timer_resolution_ns();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<std::size_t> scratch;
    volatile std::size_t sink = 0;

    for (std::size_t n : cfg.lengths) {
        std::vector<std::vector<double>> batch(cfg.batch, std::vector<double>(n));
        for (auto& row : batch) {
            for (auto& s : row) s = uniform(rng);
        }
        struct CellState {
            std::size_t k;
            std::vector<double> thetas;
            std::vector<std::vector<std::uint8_t>> thr, srt, sel;
            std::vector<double> t_thr, t_srt, t_sel;
        };
        std::vector<CellState> states;
        for (double ratio : cfg.ratios) {
            CellState st;
            st.k = retain_count(ratio, n);
            for (const auto& row : batch) st.thetas.push_back(midpoint_threshold(row, st.k));
            st.thr.assign(cfg.batch, std::vector<std::uint8_t>(n));
            st.srt = st.thr;
            st.sel = st.thr;
            states.push_back(std::move(st));
        }

        auto time_threshold = [&](CellState& st) {
            const auto t0 = clock::now();
            std::size_t kept = 0;
            for (std::size_t b = 0; b < cfg.batch; ++b) kept += threshold_kernel(batch[b], st.thetas[b], st.thr[b]);
            const auto t1 = clock::now();
            sink = sink + kept;
            return std::chrono::duration<double, std::nano>(t1 - t0).count();
        };
        auto time_sort = [&](CellState& st) {
            const auto t0 = clock::now();
            for (std::size_t b = 0; b < cfg.batch; ++b) topk_sort_kernel(batch[b], st.k, st.srt[b], scratch);
            const auto t1 = clock::now();
            return std::chrono::duration<double, std::nano>(t1 - t0).count();
        };
        auto time_select = [&](CellState& st) {
            const auto t0 = clock::now();
            for (std::size_t b = 0; b < cfg.batch; ++b) topk_select_kernel(batch[b], st.k, st.sel[b], scratch);
            const auto t1 = clock::now();
            return std::chrono::duration<double, std::nano>(t1 - t0).count();
        };

        for (std::size_t w = 0; w < cfg.warmup; ++w) {
            for (auto& st : states) {
                time_threshold(st);
                time_sort(st);
                time_select(st);
            }
        }
        for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
            for (auto& st : states) st.t_thr.push_back(time_threshold(st));
            for (auto& st : states) st.t_srt.push_back(time_sort(st));
            for (auto& st : states) st.t_sel.push_back(time_select(st));
        }

        for (std::size_t i = 0; i < states.size(); ++i) {
            auto& st = states[i];
            BenchCell cell;
            cell.length = n;
            cell.ratio = cfg.ratios[i];
            cell.k = st.k;
            cell.threshold = summarize(std::move(st.t_thr));
            cell.topk_sort = summarize(std::move(st.t_srt));
            cell.topk_select = summarize(std::move(st.t_sel));
            cell.topk_variant = cell.topk_sort.mean_ns <= cell.topk_select.mean_ns ? "sort" : "select";
            for (std::size_t b = 0; b < cfg.batch; ++b) {
                const auto kept = static_cast<std::size_t>(std::count(st.thr[b].begin(), st.thr[b].end(), 1));
                if (st.thr[b] != st.srt[b] || st.thr[b] != st.sel[b] || kept != st.k) ++cell.mismatches;
            }
            result.mismatches += cell.mismatches;
            if (result.timer_resolution_ns > cell.threshold.median_ns) result.timer_coarse = true;
            result.cells.push_back(std::move(cell));
        }
    }
    return result;
}

/// CSV with one threshold row and one topk row per cell.
inline void report_csv(std::ostream& os, const BenchResult& r) {
    os << "length,ratio,method,mean_ns,std_ns,slowdown\n";
    for (const auto& c : r.cells) {
        const double slow = c.slowdown();
        os << c.length << ',' << c.ratio << ",threshold," << c.threshold.mean_ns << ',' << c.threshold.std_ns << ','
           << slow << '\n';
        os << c.length << ',' << c.ratio << ",topk," << c.topk().mean_ns << ',' << c.topk().std_ns << ',' << slow
           << '\n';
    }
}

inline std::string report_csv(const BenchResult& r) {
    std::ostringstream os;
    os.precision(10);
    report_csv(os, r);
    return os.str();
}

inline nlohmann::json to_json(const Timing& t, bool with_samples) {
    nlohmann::json j{{"mean_ns", t.mean_ns}, {"std_ns", t.std_ns}, {"min_ns", t.min_ns}, {"median_ns", t.median_ns}};
    if (with_samples) j["samples"] = t.samples;
    return j;
}

inline nlohmann::json to_json(const BenchResult& r, bool with_samples = false) {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
        cells.push_back({{"length", c.length},
                         {"ratio", c.ratio},
                         {"k", c.k},
                         {"threshold", to_json(c.threshold, with_samples)},
                         {"topk_sort", to_json(c.topk_sort, with_samples)},
                         {"topk_select", to_json(c.topk_select, with_samples)},
                         {"topk_variant", c.topk_variant},
                         {"slowdown", c.slowdown()},
                         {"mismatches", c.mismatches}});
    }
    return {{"timer_resolution_ns", r.timer_resolution_ns},
            {"timer_coarse", r.timer_coarse},
            {"mismatches", r.mismatches},
            {"cells", cells}};
}

} // namespace ltp::bench
