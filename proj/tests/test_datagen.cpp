#include <cmath>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "ltp/datagen.hpp"
#include "support.hpp"

using namespace ltp;

namespace {

TaskSpec spec_with(std::uint64_t seed, double mu = std::log(24.0), double sigma = 0.5) {
    TaskSpec s;
    s.seed = seed;
    s.length.components = {{1.0, mu, sigma}};
    return s;
}

std::vector<std::size_t> iota_lengths(std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> v;
    for (std::size_t i = lo; i <= hi; ++i) v.push_back(i);
    return v;
}

// One example per requested length, all tokens non-pad.
Dataset dataset_with_lengths(const std::vector<std::size_t>& lengths) {
    Dataset d;
    for (std::size_t n : lengths) d.push_back({TokenSeq(n, 30), static_cast<int>(n % 2)});
    return d;
}

} // namespace

TEST(Generate, SingleSignalTokenDeterminesLabel) {
    TaskSpec s = spec_with(2);
    s.n_signal = 1;
    s.signal_fraction = 0.0;
    for (const auto& ex : generate(s, 500)) {
        std::size_t signals = 0;
        for (int t : ex.tokens) {
            if (auto c = s.signal_class(t)) {
                ++signals;
                EXPECT_EQ(static_cast<int>(*c), ex.label);
            }
        }
        EXPECT_EQ(signals, 1u);
    }
}

TEST(Generate, SameSeedIsIdenticalAndDifferentSeedDiffers) {
    const Dataset a = generate(spec_with(5), 200), b = generate(spec_with(5), 200), c = generate(spec_with(6), 200);
    ASSERT_EQ(a.size(), b.size());
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].tokens, b[i].tokens);
        EXPECT_EQ(a[i].label, b[i].label);
        differs = differs || a[i].tokens != c[i].tokens;
    }
    EXPECT_TRUE(differs);
}

TEST(Generate, LabelsWithinTwoPercentOfUniform) {
    for (std::size_t classes : {2u, 3u}) {
        TaskSpec s = spec_with(9);
        s.num_classes = classes;
        std::vector<double> freq(classes, 0.0);
        const Dataset d = generate(s, 10000);
        for (const auto& ex : d) freq[static_cast<std::size_t>(ex.label)] += 1.0 / 10000.0;
        for (double f : freq) EXPECT_NEAR(f, 1.0 / static_cast<double>(classes), 0.02);
    }
}

TEST(Generate, StructureInvariantsHoldForRandomSpecs) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 40; ++trial) {
        TaskSpec s;
        s.seed = rng();
        s.num_classes = ltp::test::uniform_index(rng, 2, 4);
        s.signal_per_class = ltp::test::uniform_index(rng, 1, 4);
        s.n_signal = ltp::test::uniform_index(rng, 1, 5);
        s.signal_fraction = ltp::test::random_vector(rng, 1, 0.0, 0.4)[0];
        s.vocab = s.first_noise() + ltp::test::uniform_index(rng, 1, 30);
        s.n_max = ltp::test::uniform_index(rng, s.n_signal + 1, 80);
        s.length.components = {{0.7, std::log(10.0), 0.6}, {0.3, std::log(40.0), 0.3}};
        for (const auto& ex : generate(s, 100)) {
            const std::size_t n = ex.tokens.size();
            EXPECT_GE(n, s.n_signal + 1);
            EXPECT_LE(n, s.n_max);
            EXPECT_EQ(ex.tokens[0], cls_token);
            std::size_t signals = 0;
            for (std::size_t i = 1; i < n; ++i) {
                const int t = ex.tokens[i];
                EXPECT_GE(t, 2);
                EXPECT_LT(t, static_cast<int>(s.vocab));
                if (s.signal_class(t)) ++signals;
            }
            EXPECT_GE(signals, s.n_signal);
            // Signal sufficiency: the majority over signal tokens alone recovers the label.
            EXPECT_EQ(signal_majority(s, ex.tokens), ex.label);
        }
    }
}

TEST(Generate, SignalPositionsAreSpreadAcrossTheSequence) {
    TaskSpec s = spec_with(11, std::log(30.0), 0.1);
    s.signal_fraction = 0.0;
    std::set<std::size_t> positions;
    for (const auto& ex : generate(s, 500)) {
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            if (s.signal_class(ex.tokens[i])) positions.insert(i);
        }
    }
    EXPECT_EQ(*positions.begin(), 1u);
    EXPECT_GE(positions.size(), 25u);
}

TEST(Generate, InfeasibleSpecsThrow) {
    TaskSpec s = spec_with(1);
    s.n_signal = 10;
    s.n_max = 10;
    EXPECT_THROW(generate(s, 1), std::invalid_argument);
    s = spec_with(1);
    s.vocab = s.first_noise();
    EXPECT_THROW(generate(s, 1), std::invalid_argument);
    s = spec_with(1);
    s.n_signal = 0;
    EXPECT_THROW(generate(s, 1), std::invalid_argument);
}

TEST(Stats, NearestRankQuantiles) {
    const auto v = iota_lengths(1, 100);
    EXPECT_EQ(nearest_rank(v, 0.5), 50u);
    EXPECT_EQ(nearest_rank(v, 0.25), 25u);
    EXPECT_EQ(nearest_rank(v, 0.75), 75u);
    EXPECT_EQ(nearest_rank({7}, 0.5), 7u);
    EXPECT_EQ(nearest_rank({4, 1, 3, 2}, 0.5), 2u);
    EXPECT_THROW(nearest_rank({}, 0.5), std::invalid_argument);
}

TEST(Stats, IdenticalSamplesGiveZeroKl) {
    const auto v = iota_lengths(3, 60);
    const LengthStats s = length_stats(v, 20, v);
    ASSERT_TRUE(s.kl);
    EXPECT_LE(std::abs(*s.kl), 1e-8);
}

TEST(Stats, KlMatchesHandSummedThreeBinOracle) {
    const std::vector<double> p{0.5, 0.3, 0.2}, q{0.2, 0.3, 0.5};
    const double hand = 0.5 * std::log(0.5 / 0.2) + 0.3 * std::log(1.0) + 0.2 * std::log(0.2 / 0.5);
    EXPECT_NEAR(kl_divergence(p, q), hand, 1e-12);
    EXPECT_NEAR(hand, 0.2748872195622465, 1e-12);
    const std::vector<double> skew{0.8, 0.15, 0.05}, flat{1.0 / 3, 1.0 / 3, 1.0 / 3};
    EXPECT_GT(std::abs(kl_divergence(skew, flat) - kl_divergence(flat, skew)), 1e-3);
    EXPECT_THROW(kl_divergence(p, {0.5, 0.5}), std::invalid_argument);
}

TEST(Stats, EmptyBinsAreSmoothedNotInfinite) {
    const std::vector<double> p{0.5, 0.5, 0.0}, q{0.0, 0.5, 0.5};
    const double kl = kl_divergence(p, q);
    EXPECT_TRUE(std::isfinite(kl));
    EXPECT_GT(kl, 0.0);
}

TEST(Stats, HistogramsOverUnionRange) {
    const LengthStats s = length_stats({10, 10, 20}, 2, std::vector<std::size_t>{30});
    EXPECT_EQ(s.bin_low, 10.0);
    EXPECT_EQ(s.bin_high, 30.0);
    EXPECT_DOUBLE_EQ(s.histogram[0], 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(s.histogram[1], 1.0 / 3.0);
    EXPECT_EQ(s.reference_histogram, (std::vector<double>{0.0, 1.0}));
    EXPECT_THROW(length_stats({}, 4), std::invalid_argument);
    EXPECT_THROW(length_stats({1, 2}, 1), std::invalid_argument);
}

TEST(Stats, PropertiesOnRandomSamples) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> a(ltp::test::uniform_index(rng, 1, 200)), b(ltp::test::uniform_index(rng, 1, 200));
        for (auto& x : a) x = ltp::test::uniform_index(rng, 2, 64);
        for (auto& x : b) x = ltp::test::uniform_index(rng, 2, 128);
        const LengthStats s = length_stats(a, ltp::test::uniform_index(rng, 2, 30), b);
        EXPECT_LE(s.q1, s.q2);
        EXPECT_LE(s.q2, s.q3);
        double mass = 0;
        for (double h : s.histogram) mass += h;
        EXPECT_NEAR(mass, 1.0, 1e-12);
        EXPECT_GE(*s.kl, 0.0);
    }
}

TEST(QuantileSplit, EqualLengthsAllShort) {
    const auto q = quantile_split(dataset_with_lengths(std::vector<std::size_t>(20, 12)));
    EXPECT_EQ(q.short_.size(), 20u);
    EXPECT_TRUE(q.mid.empty());
    EXPECT_TRUE(q.long_.empty());
}

TEST(QuantileSplit, UniformLengthsSplitHalfQuarterQuarter) {
    const Dataset eval = dataset_with_lengths(iota_lengths(1, 100));
    const Dataset train = dataset_with_lengths(iota_lengths(1, 80));
    const auto q = quantile_split(eval, train);
    EXPECT_EQ(q.q2, 50u);
    EXPECT_EQ(q.q3, 75u);
    EXPECT_EQ(q.short_.size(), 50u);
    EXPECT_EQ(q.mid.size(), 25u);
    EXPECT_EQ(q.long_.size(), 25u);
    EXPECT_EQ(q.train_short.size(), 50u);
    EXPECT_THROW(quantile_split({}), std::invalid_argument);
}

TEST(QuantileSplit, IsAPartitionAndReproducible) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const Dataset d = generate(spec_with(rng()), ltp::test::uniform_index(rng, 1, 300));
        const auto a = quantile_split(d), b = quantile_split(d);
        EXPECT_EQ(a.short_.size() + a.mid.size() + a.long_.size(), d.size());
        std::multiset<TokenSeq> all, parts;
        for (const auto& ex : d) all.insert(ex.tokens);
        for (const auto* part : {&a.short_, &a.mid, &a.long_}) {
            for (const auto& ex : *part) parts.insert(ex.tokens);
        }
        EXPECT_EQ(all, parts);
        for (const auto& ex : a.short_) EXPECT_LE(sequence_length(ex.tokens), a.q2);
        for (const auto& ex : a.long_) EXPECT_GT(sequence_length(ex.tokens), a.q3);
        ASSERT_EQ(a.mid.size(), b.mid.size());
        for (std::size_t i = 0; i < a.mid.size(); ++i) EXPECT_EQ(a.mid[i].tokens, b.mid[i].tokens);
    }
}

TEST(DatasetIo, JsonLinesRoundTrip) {
    const Dataset d = generate(spec_with(14), 50);
    std::stringstream ss;
    write_dataset(ss, d);
    const std::string first = ss.str().substr(0, ss.str().find('\n'));
    EXPECT_EQ(first.rfind("{\"label\":", 0), 0u);
    const Dataset back = read_dataset(ss);
    ASSERT_EQ(back.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        EXPECT_EQ(back[i].tokens, d[i].tokens);
        EXPECT_EQ(back[i].label, d[i].label);
    }
    std::stringstream bad("{\"tokens\":[0,3]}\n");
    EXPECT_THROW(read_dataset(bad), std::runtime_error);
}
