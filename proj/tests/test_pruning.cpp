#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "ltp/encoder.hpp"
#include "ltp/pruning.hpp"
#include "support.hpp"

using namespace ltp;
using ltp::test::distinct_scores;
using ltp::test::uniform_index;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

// N_h×n×n probabilities, each row softmax-normalized over the active keys.
Tensor random_probs(std::mt19937_64& rng, std::size_t heads, std::size_t n, const std::vector<bool>& active) {
    std::vector<double> v(heads * n * n, 0.0);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < n; ++q) {
            double z = 0;
            for (std::size_t k = 0; k < n; ++k) {
                if (active[k]) z += (v[(h * n + q) * n + k] = u(rng));
            }
            for (std::size_t k = 0; k < n; ++k) v[(h * n + q) * n + k] /= z;
        }
    }
    return Tensor({heads, n, n}, std::move(v));
}

std::vector<bool> as_bools(const std::vector<std::size_t>& idx, std::size_t n) {
    std::vector<bool> b(n, false);
    for (auto i : idx) b[i] = true;
    return b;
}

ModelConfig small_config() {
    ModelConfig c;
    c.layers = 4;
    c.heads = 2;
    c.d = 8;
    c.d_ffn = 16;
    c.vocab = 20;
    c.n_max = 24;
    return c;
}

} // namespace

TEST(Importance, SingleActiveTokenScoresOne) {
    const auto s = importance_scores(Tensor({2, 1, 1}, {1.0, 1.0}), {true});
    ASSERT_EQ(s.size(), 1u);
    EXPECT_DOUBLE_EQ(s[0], 1.0);
}

TEST(Importance, UniformAttentionGivesEqualScores) {
    const auto s = importance_scores(Tensor({1, 4, 4}, std::vector<double>(16, 0.25)), std::vector<bool>(4, true));
    for (double v : s) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Importance, MatchesBruteForceDoubleLoop) {
    std::mt19937_64 rng(3);
    const std::vector<bool> active(3, true);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor probs = random_probs(rng, 2, 3, active);
        const auto s = importance_scores(probs, active);
        const auto p = probs.data();
        for (std::size_t i = 0; i < 3; ++i) {
            double brute = 0;
            for (std::size_t h = 0; h < 2; ++h) {
                for (std::size_t j = 0; j < 3; ++j) brute += p[h * 9 + j * 3 + i];
            }
            EXPECT_NEAR(s[i], brute / 6.0, 1e-15);
        }
    }
}

TEST(Importance, InactiveTokensScoreZeroAndDifferentiableFormAgrees) {
    std::mt19937_64 rng(4);
    const std::vector<bool> active{true, false, true, true, false};
    const Tensor probs = random_probs(rng, 3, 5, active);
    const auto s = importance_scores(probs, active);
    EXPECT_EQ(s[1], 0.0);
    EXPECT_EQ(s[4], 0.0);
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < 3; ++h) {
        std::vector<double> block(probs.data().begin() + static_cast<long>(h * 25),
                                  probs.data().begin() + static_cast<long>((h + 1) * 25));
        heads.emplace_back(Shape{5, 5}, block);
    }
    const Tensor t = importance_scores(heads, active);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(t.data()[i], s[i], 1e-15);
    EXPECT_THROW(importance_scores(probs, std::vector<bool>(5, false)), std::invalid_argument);
    EXPECT_THROW(importance_scores(probs, std::vector<bool>(4, true)), ShapeError);
}

TEST(Importance, SumsToOneOverActiveTokens) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = uniform_index(rng, 1, 20);
        std::vector<bool> active(n);
        for (std::size_t i = 0; i < n; ++i) active[i] = i == 0 || rng() % 4 != 0;
        const auto s = importance_scores(random_probs(rng, uniform_index(rng, 1, 4), n, active), active);
        double total = 0;
        for (double v : s) total += v;
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(HardMask, StrictComparisonWithProtection) {
    const std::vector<double> s{0.4, 0.3, 0.2, 0.1};
    EXPECT_EQ(hard_mask(s, 0.25), (std::vector<bool>{true, true, false, false}));
    const std::vector<std::size_t> prot{3};
    EXPECT_EQ(hard_mask(s, 0.25, prot), (std::vector<bool>{true, true, false, true}));
    EXPECT_EQ(hard_mask(s, -inf), std::vector<bool>(4, true));
    EXPECT_EQ(hard_mask(s, 0.3), (std::vector<bool>{true, false, false, false}));
}

TEST(SoftMask, CenterSaturationAndThresholdSlope) {
    EXPECT_DOUBLE_EQ(soft_mask(Tensor::scalar(0.2), Tensor::scalar(0.2), 0.01).item(), 0.5);
    EXPECT_NEAR(soft_mask(Tensor::scalar(0.4), Tensor::scalar(0.2), 0.01).item(), 1.0, 1e-8);
    const double T = 0.01;
    Tensor theta = Tensor::scalar(0.2, true);
    backward(soft_mask(Tensor::scalar(0.2), theta, T));
    EXPECT_NEAR(theta.grad()[0], -1.0 / (4.0 * T), 1e-12);
    const double h = 1e-7;
    NoGradGuard g;
    const double fd = (soft_mask(Tensor::scalar(0.2), Tensor::scalar(0.2 + h), T).item() -
                       soft_mask(Tensor::scalar(0.2), Tensor::scalar(0.2 - h), T).item()) /
                      (2 * h);
    EXPECT_NEAR(fd, -1.0 / (4.0 * T), 1e-5);
    EXPECT_THROW(soft_mask(Tensor::scalar(0.2), Tensor::scalar(0.2), 0.0), std::invalid_argument);
}

TEST(SoftMask, ConvergesToHardMaskAtTinyTemperature) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int checked = 0;
    while (checked < 100) {
        const double s = u(rng), th = u(rng);
        if (std::abs(s - th) <= 1e-6) continue;
        const double soft = soft_mask(Tensor::scalar(s), Tensor::scalar(th), 1e-8).item();
        const std::vector<double> sv{s};
        EXPECT_EQ(soft > 0.5, hard_mask(sv, th)[0]);
        ++checked;
    }
}

TEST(ApplySoftMask, OnesLeaveEverythingUnchanged) {
    std::mt19937_64 rng(7);
    Tensor out = ltp::test::random_tensor(rng, 4, 3);
    auto [masked, running] = apply_soft_mask(out, Tensor::full({1, 4}, 1.0), Tensor::full({1, 4}, 1.0));
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(masked.data()[i], out.data()[i]);
    for (double r : running.data()) EXPECT_EQ(r, 1.0);
}

TEST(ApplySoftMask, ZeroedTokenStaysZeroInLaterLayers) {
    std::mt19937_64 rng(8);
    Tensor running = Tensor::full({1, 3}, 1.0);
    Tensor out = ltp::test::random_tensor(rng, 3, 4);
    std::tie(out, running) = apply_soft_mask(out, Tensor::row({1.0, 0.0, 0.7}), running);
    for (int layer = 0; layer < 3; ++layer) {
        Tensor next = ltp::test::random_tensor(rng, 3, 4);
        std::tie(out, running) = apply_soft_mask(next, Tensor::row({1.0, 0.9, 0.9}), running);
        EXPECT_EQ(running.data()[1], 0.0);
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(1, c), 0.0);
    }
}

// Linear toy layer y = xA applied twice with masks of 0.5 on token 0.
TEST(ApplySoftMask, RunningProductComposesOverTwoLayers) {
    std::mt19937_64 rng(9);
    const Tensor x = ltp::test::random_tensor(rng, 2, 3);
    const Tensor a = ltp::test::random_tensor(rng, 3, 3);
    const Tensor half = Tensor::row({0.5, 1.0});
    Tensor running = Tensor::full({1, 2}, 1.0);

    const Tensor y1 = matmul(x, a);
    auto [o1, r1] = apply_soft_mask(y1, half, running);
    const Tensor y2 = matmul(o1, a);
    auto [o2, r2] = apply_soft_mask(y2, half, r1);
    EXPECT_DOUBLE_EQ(r2.data()[0], 0.25);
    EXPECT_DOUBLE_EQ(r2.data()[1], 1.0);

    const Tensor unmasked = matmul(matmul(x, a), a);
    for (std::size_t c = 0; c < 3; ++c) {
        // Relative to the layer's own output the scale is the running product...
        EXPECT_NEAR(o2(0, c), 0.25 * y2(0, c), 1e-15);
        // ...and the linear toy also carries layer 1's factor through its input.
        EXPECT_NEAR(o2(0, c), 0.5 * 0.25 * unmasked(0, c), 1e-12);
        EXPECT_NEAR(o2(1, c), unmasked(1, c), 1e-12);
    }
}

TEST(Compact, IdentitySingleAndComposition) {
    std::mt19937_64 rng(10);
    const Tensor x = ltp::test::random_tensor(rng, 4, 3);
    auto all = compact(x, std::vector<bool>(4, true));
    EXPECT_EQ(all.index, (std::vector<std::size_t>{0, 1, 2, 3}));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(all.x.data()[i], x.data()[i]);
    auto one = compact(x, {true, false, false, false});
    EXPECT_EQ(one.index, (std::vector<std::size_t>{0}));
    EXPECT_EQ(one.x.rows(), 1u);
    EXPECT_THROW(compact(x, std::vector<bool>(4, false)), std::invalid_argument);

    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = uniform_index(rng, 1, 12);
        const Tensor t = ltp::test::random_tensor(rng, n, 2);
        std::vector<bool> k1(n);
        for (std::size_t i = 0; i < n; ++i) k1[i] = i == 0 || rng() % 2;
        auto c1 = compact(t, k1);
        std::vector<bool> k2(c1.index.size());
        for (std::size_t i = 0; i < k2.size(); ++i) k2[i] = i == 0 || rng() % 2;
        auto c2 = compact(c1.x, k2);
        std::vector<bool> both(n, false);
        for (std::size_t i = 0; i < k2.size(); ++i) both[c1.index[i]] = k2[i];
        auto direct = compact(t, both);
        ASSERT_EQ(c2.x.size(), direct.x.size());
        for (std::size_t i = 0; i < direct.x.size(); ++i) EXPECT_EQ(c2.x.data()[i], direct.x.data()[i]);
        for (std::size_t i = 0; i < c2.index.size(); ++i) EXPECT_EQ(c1.index[c2.index[i]], direct.index[i]);
    }
}

TEST(RegLoss, OnesGiveTokenCountAndZerosGiveZero) {
    for (std::size_t layers : {1u, 3u, 12u}) {
        std::vector<Tensor> ones(layers, Tensor::full({1, 7}, 1.0));
        std::vector<Tensor> zeros(layers, Tensor::zeros({1, 7}));
        EXPECT_DOUBLE_EQ(reg_loss(ones).item(), 7.0);
        EXPECT_DOUBLE_EQ(reg_loss(zeros).item(), 0.0);
        std::vector<bool> pad(7, false);
        pad[5] = pad[6] = true;
        EXPECT_DOUBLE_EQ(reg_loss(ones, pad).item(), 5.0);
    }
    EXPECT_THROW(reg_loss({}), std::invalid_argument);
}

TEST(RegLoss, ThresholdGradientMatchesClosedFormAndDifferences) {
    const std::vector<double> s{0.05, 0.2, 0.12, 0.3, 0.08};
    const double T = 0.05, th = 0.15;
    auto loss = [&](const Tensor& theta) { return reg_loss({soft_mask(Tensor::row(s), theta, T)}); };
    Tensor theta = Tensor::scalar(th, true);
    backward(loss(theta));
    double closed = 0;
    for (double si : s) {
        const double m = sigmoid((si - th) / T);
        closed -= m * (1 - m) / T;
    }
    EXPECT_NEAR(theta.grad()[0], closed, 1e-12);
    const double h = 1e-6;
    NoGradGuard g;
    EXPECT_NEAR(theta.grad()[0], (loss(Tensor::scalar(th + h)).item() - loss(Tensor::scalar(th - h)).item()) / (2 * h),
                1e-6);
}

TEST(RegLoss, ThresholdGradientsAreNonPositive) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t L = uniform_index(rng, 1, 6), n = uniform_index(rng, 2, 15);
        ThresholdSet ts(ltp::test::random_vector(rng, L, 0.0, 0.2), 0.05, true);
        std::vector<Tensor> running_masks, raw;
        Tensor running = Tensor::full({1, n}, 1.0);
        for (std::size_t l = 0; l < L; ++l) {
            Tensor m = soft_mask(Tensor::row(ltp::test::random_vector(rng, n, 0.0, 0.3)), ts.layer(l), ts.temperature);
            running = mul(running, m);
            running_masks.push_back(running);
            raw.push_back(m);
        }
        backward(add(reg_loss(running_masks), reg_loss(raw)));
        for (double g : ts.theta.grad()) EXPECT_LE(g, 0.0);
    }
}

TEST(Thresholds, ManualLinearlyRising) {
    const ThresholdSet t = manual_thresholds(0.01, 12);
    EXPECT_DOUBLE_EQ(t.value(5), 0.005);
    EXPECT_EQ(t.value(11), 0.01);
    EXPECT_FALSE(t.learnable);
    for (double v : manual_thresholds(0.0, 4).values()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(manual_thresholds(-0.1, 4), std::invalid_argument);
    EXPECT_THROW(ThresholdSet({0.1}, 0.0, true), std::invalid_argument);
}

TEST(Thresholds, LayerSliceIsDifferentiableAndCloneIsIndependent) {
    ThresholdSet t({0.1, 0.2, 0.3}, 0.01, true);
    backward(scale(t.layer(1), 3.0));
    EXPECT_EQ(t.theta.grad()[0], 0.0);
    EXPECT_EQ(t.theta.grad()[1], 3.0);
    ThresholdSet c = t.clone();
    c.theta.data()[0] = 9.0;
    EXPECT_EQ(t.value(0), 0.1);
    c.freeze();
    EXPECT_FALSE(c.theta.requires_grad());
    EXPECT_TRUE(t.theta.requires_grad());
}

TEST(Schedule, SpattenKeepsThreeLayersThenDecaysLinearly) {
    for (double r : spatten_schedule(1.0, 6)) EXPECT_EQ(r, 1.0);
    const auto s = spatten_schedule(0.4, 12);
    for (std::size_t l = 1; l <= 3; ++l) EXPECT_EQ(s[l - 1], 1.0);
    EXPECT_EQ(s[11], 0.4);
    for (std::size_t l = 4; l <= 12; ++l) {
        EXPECT_NEAR(s[l - 1], 1.0 + (0.4 - 1.0) * static_cast<double>(l - 3) / 9.0, 1e-15);
    }
    EXPECT_THROW(spatten_schedule(0.5, 3), std::invalid_argument);
    EXPECT_EQ(spatten_schedule(-1.0, 4).back(), -1.0);
}

TEST(Schedule, RetainCountIsCeilingClampedToOneAndN) {
    EXPECT_EQ(retain_count(0.4, 10), 4u);
    EXPECT_EQ(retain_count(0.41, 10), 5u);
    EXPECT_EQ(retain_count(0.1, 128), 13u);
    EXPECT_EQ(retain_count(-0.5, 10), 1u);
    EXPECT_EQ(retain_count(0.0, 10), 1u);
    EXPECT_EQ(retain_count(1.0, 10), 10u);
}

TEST(Schedule, LinearScheduleEndsAtFinalRatio) {
    const auto s = linear_schedule(0.2, 4);
    EXPECT_DOUBLE_EQ(s[0], 0.8);
    EXPECT_DOUBLE_EQ(s[1], 0.6);
    EXPECT_EQ(s[3], 0.2);
    EXPECT_THROW(linear_schedule(1.5, 4), std::invalid_argument);
}

TEST(TopK, ExamplesTiesAndRange) {
    const std::vector<double> s{0.4, 0.3, 0.2, 0.1};
    EXPECT_EQ(topk_select(s, 2), (std::vector<bool>{true, true, false, false}));
    EXPECT_EQ(topk_select(s, 4), std::vector<bool>(4, true));
    const std::vector<double> ties{0.2, 0.5, 0.2, 0.2};
    EXPECT_EQ(topk_select(ties, 2), (std::vector<bool>{true, true, false, false}));
    EXPECT_EQ(topk_select(ties, 3), (std::vector<bool>{true, true, true, false}));
    EXPECT_THROW(topk_select(s, 0), std::out_of_range);
    EXPECT_THROW(topk_select(s, 5), std::out_of_range);
}

TEST(TopK, EquivalentToThresholdBetweenOrderStatistics) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = uniform_index(rng, 1, 30);
        const auto s = distinct_scores(rng, n);
        std::vector<double> sorted = s;
        std::sort(sorted.begin(), sorted.end(), std::greater<>{});
        for (std::size_t k = 1; k <= n; ++k) {
            const double theta = k < n ? 0.5 * (sorted[k - 1] + sorted[k]) : sorted[n - 1] - 1.0;
            EXPECT_EQ(topk_select(s, k), hard_mask(s, theta));
        }
        // Every threshold corresponds to k = |{s > θ}|.
        const double theta = ltp::test::random_vector(rng, 1, -0.1, 1.0)[0];
        const auto hm = hard_mask(s, theta);
        const auto k = static_cast<std::size_t>(std::count(hm.begin(), hm.end(), true));
        if (k >= 1) EXPECT_EQ(topk_select(s, k), hm);
    }
}

TEST(Context, ValidationRules) {
    EXPECT_THROW(PruneContext{PruneMode::soft}.validate(2), std::invalid_argument);
    EXPECT_THROW(PruneContext{PruneMode::spatten}.validate(4), std::invalid_argument);
    EXPECT_THROW(PruneContext::with_thresholds(PruneMode::hard, ThresholdSet({0.1}, 1e-3, false)).validate(2),
                 std::invalid_argument);
    EXPECT_THROW(PruneContext::with_schedule(PruneMode::topk, {1.0, 1.5}).validate(2), std::invalid_argument);
    EXPECT_NO_THROW(PruneContext::with_schedule(PruneMode::topk, {1.0, 0.5}).validate(2));
    EXPECT_NO_THROW(PruneContext::none().validate(7));
    EXPECT_EQ(parse_prune_mode("spatten"), PruneMode::spatten);
    EXPECT_THROW(parse_prune_mode("bogus"), std::invalid_argument);
}

TEST(Trace, InvariantsAcrossModes) {
    const ModelConfig cfg = small_config();
    const EncoderModel m = EncoderModel::init(cfg, 13);
    std::mt19937_64 rng(14);
    const std::vector<PruneContext> ctxs{
        PruneContext::with_thresholds(PruneMode::soft, ThresholdSet({0.03, 0.05, 0.06, 0.08}, 0.01, false)),
        PruneContext::with_thresholds(PruneMode::hard, ThresholdSet({0.03, 0.05, 0.06, 0.08}, 1e-3, false)),
        PruneContext::with_thresholds(PruneMode::manual, manual_thresholds(0.1, 4)),
        PruneContext::with_schedule(PruneMode::topk, {0.9, 0.7, 0.5, 0.3}),
        PruneContext::with_schedule(PruneMode::spatten, spatten_schedule(-1.0, 4)),
    };
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = uniform_index(rng, 1, 24);
        TokenSeq t = ltp::test::random_tokens(rng, n, cfg.vocab);
        for (std::size_t i = 1; i < n; ++i) {
            if (rng() % 6 == 0) t[i] = pad_token;
        }
        const auto pad = [&](std::size_t p) { return t[p] == pad_token; };
        for (const auto& ctx : ctxs) {
            const EncodeResult r = encode(m, t, ctx);
            std::vector<std::size_t> prev;
            for (std::size_t i = 0; i < n; ++i) {
                if (!pad(i)) prev.push_back(i);
            }
            for (std::size_t l = 0; l < cfg.layers; ++l) {
                const auto& lt = r.trace.layers[l];
                EXPECT_TRUE(std::binary_search(lt.kept.begin(), lt.kept.end(), std::size_t{0}))
                    << to_string(ctx.mode) << " layer " << l;
                double total = 0;
                const std::vector<std::size_t>& entering = prev;
                for (std::size_t p : entering) total += lt.scores[p];
                if (ctx.mode == PruneMode::soft) {
                    // Soft mode keeps every real token in the attention, so scores cover all of them.
                    EXPECT_NEAR(total, 1.0, 1e-9);
                    if (l > 0) {
                        for (std::size_t i = 0; i < n; ++i) {
                            EXPECT_LE(lt.running[i], r.trace.layers[l - 1].running[i]);
                        }
                    }
                } else {
                    EXPECT_NEAR(total, 1.0, 1e-9) << to_string(ctx.mode) << " layer " << l;
                    for (std::size_t p : lt.kept) {
                        EXPECT_TRUE(std::binary_search(prev.begin(), prev.end(), p)) << to_string(ctx.mode);
                    }
                    prev = lt.kept;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    if (pad(i)) EXPECT_EQ(lt.scores[i], 0.0);
                }
            }
        }
    }
}

TEST(Trace, SoftModeProtectsFirstTokenAndZeroesPads) {
    const EncoderModel m = EncoderModel::init(small_config(), 15);
    const double big = 10.0;
    const auto ctx = PruneContext::with_thresholds(PruneMode::soft, ThresholdSet({big, big, big, big}, 1e-3, false));
    const EncodeResult r = encode(m, {0, 5, 1, 7}, ctx);
    for (const auto& lt : r.trace.layers) {
        EXPECT_EQ(lt.running[0], 1.0);
        EXPECT_EQ(lt.running[2], 0.0);
        EXPECT_LT(lt.running[1], 1e-12);
        EXPECT_EQ(lt.kept, (std::vector<std::size_t>{0}));
    }
}
