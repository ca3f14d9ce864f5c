#include <algorithm>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ltp/bench.hpp"
#include "support.hpp"

using namespace ltp;
using namespace ltp::bench;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
}

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    for (std::string f; std::getline(is, f, ',');) out.push_back(f);
    return out;
}

BenchConfig quick(std::vector<std::size_t> lengths, std::vector<double> ratios) {
    BenchConfig c;
    c.lengths = std::move(lengths);
    c.ratios = std::move(ratios);
    c.batch = 4;
    c.repetitions = 5;
    c.warmup = 1;
    return c;
}

} // namespace

TEST(Kernels, ThresholdMakesExactlyOneComparisonPerScore) {
    std::mt19937_64 rng(1);
    for (std::size_t n : {1u, 7u, 128u, 1000u}) {
        const auto s = ltp::test::random_vector(rng, n);
        std::vector<std::uint8_t> keep(n);
        std::size_t count = 0;
        const std::size_t kept = threshold_kernel(s, 0.5, keep, CountingGreater{&count});
        EXPECT_EQ(count, n);
        EXPECT_EQ(kept, static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](double x) { return x > 0.5; })));
    }
}

TEST(Kernels, SortAndSelectAgreeWithSortOracle) {
    std::mt19937_64 rng(2);
    std::vector<std::size_t> scratch;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = ltp::test::uniform_index(rng, 1, 200);
        const std::size_t k = ltp::test::uniform_index(rng, 1, n);
        const auto s = ltp::test::distinct_scores(rng, n);
        std::vector<double> sorted = s;
        std::sort(sorted.begin(), sorted.end(), std::greater<>{});
        std::vector<std::uint8_t> oracle(n), a(n), b(n), t(n);
        for (std::size_t i = 0; i < n; ++i) oracle[i] = s[i] >= sorted[k - 1];
        topk_sort_kernel(s, k, a, scratch);
        topk_select_kernel(s, k, b, scratch);
        EXPECT_EQ(threshold_kernel(s, midpoint_threshold(s, k), t), k);
        EXPECT_EQ(a, oracle);
        EXPECT_EQ(b, oracle);
        EXPECT_EQ(t, oracle);
    }
}

TEST(Kernels, TiesResolveToLowerIndexLikeTopkSelect) {
    const std::vector<double> s{0.2, 0.5, 0.2, 0.2};
    std::vector<std::size_t> scratch;
    std::vector<std::uint8_t> a(4), b(4);
    topk_sort_kernel(s, 2, a, scratch);
    topk_select_kernel(s, 2, b, scratch);
    EXPECT_EQ(a, (std::vector<std::uint8_t>{1, 1, 0, 0}));
    EXPECT_EQ(b, a);
}

TEST(Summarize, MeanStdMedianMin) {
    const Timing t = summarize({4, 1, 3, 2});
    EXPECT_DOUBLE_EQ(t.mean_ns, 2.5);
    EXPECT_DOUBLE_EQ(t.std_ns, std::sqrt(5.0 / 3.0));
    EXPECT_DOUBLE_EQ(t.median_ns, 2.5);
    EXPECT_DOUBLE_EQ(t.min_ns, 1.0);
    EXPECT_EQ(summarize({7}).std_ns, 0.0);
    EXPECT_EQ(summarize({7, 1, 9}).median_ns, 7.0);
}

TEST(Report, EmptySweepIsHeaderOnly) {
    EXPECT_EQ(report_csv(BenchResult{}), "length,ratio,method,mean_ns,std_ns,slowdown\n");
}

TEST(Report, OneCellGivesThresholdAndTopkRowsWithSlowdown) {
    const BenchResult r = run_bench(quick({64}, {0.3}));
    ASSERT_EQ(r.cells.size(), 1u);
    const auto lines = lines_of(report_csv(r));
    ASSERT_EQ(lines.size(), 3u);
    const auto thr = split(lines[1]), top = split(lines[2]);
    EXPECT_EQ(thr[0], "64");
    EXPECT_EQ(thr[1], "0.3");
    EXPECT_EQ(thr[2], "threshold");
    EXPECT_EQ(top[2], "topk");
    const double slowdown = std::stod(top[5]);
    EXPECT_NEAR(slowdown, std::stod(top[3]) / std::stod(thr[3]), 1e-8 * slowdown);
    EXPECT_EQ(thr[5], top[5]);
    const auto& c = r.cells[0];
    EXPECT_DOUBLE_EQ(c.slowdown(), c.topk().mean_ns / c.threshold.mean_ns);
    EXPECT_EQ(c.topk().mean_ns, std::min(c.topk_sort.mean_ns, c.topk_select.mean_ns));
}

TEST(RunBench, EveryCellSelectsIdenticalSetsWithPositiveLatencies) {
    const BenchResult r = run_bench(quick({16, 100, 257}, {0.1, 0.25, 0.5, 1.0}));
    EXPECT_EQ(r.cells.size(), 12u);
    EXPECT_EQ(r.mismatches, 0u);
    EXPECT_GT(r.timer_resolution_ns, 0.0);
    for (const auto& c : r.cells) {
        EXPECT_EQ(c.k, retain_count(c.ratio, c.length));
        EXPECT_EQ(c.threshold.samples.size(), 5u);
        for (const Timing* t : {&c.threshold, &c.topk_sort, &c.topk_select}) {
            EXPECT_GT(t->mean_ns, 0.0);
            EXPECT_GE(t->std_ns, 0.0);
            EXPECT_LE(t->min_ns, t->median_ns);
        }
    }
    EXPECT_GE(r.threshold_ratio_spread(100), 1.0);
}

TEST(RunBench, ConfigValidation) {
    EXPECT_THROW(run_bench(quick({16}, {0.0})), std::invalid_argument);
    EXPECT_THROW(run_bench(quick({16}, {1.5})), std::invalid_argument);
    EXPECT_THROW(run_bench(quick({0}, {0.5})), std::invalid_argument);
    BenchConfig c = quick({16}, {0.5});
    c.repetitions = 0;
    EXPECT_THROW(run_bench(c), std::invalid_argument);
}

TEST(RunBench, JsonCarriesSamplesOnRequest) {
    const BenchResult r = run_bench(quick({32}, {0.5}));
    const auto plain = to_json(r), full = to_json(r, true);
    EXPECT_FALSE(plain["cells"][0]["threshold"].contains("samples"));
    EXPECT_EQ(full["cells"][0]["threshold"]["samples"].size(), 5u);
}
