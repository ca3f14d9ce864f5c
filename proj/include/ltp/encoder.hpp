#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ltp/ops.hpp"
#include "ltp/optim.hpp"
#include "ltp/pruning.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

/// Reserved token ids shared by the encoder and the data generator.
inline constexpr int cls_token = 0;
inline constexpr int pad_token = 1;

using TokenSeq = std::vector<int>;

struct ModelConfig {
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t d = 64;
    std::size_t d_ffn = 128;
    std::size_t vocab = 64;
    std::size_t n_max = 64;
    std::size_t num_classes = 2;

    std::size_t d_head() const { return d / heads; }

    void validate() const {
        for (auto [name, v] : {std::pair{"layers", layers}, {"heads", heads}, {"d", d}, {"d_ffn", d_ffn},
                               {"vocab", vocab}, {"n_max", n_max}, {"num_classes", num_classes}}) {
            if (v < 1) throw std::invalid_argument(std::string("model config: ") + name + " must be >= 1");
        }
        if (d % heads != 0) throw std::invalid_argument("model config: d must be divisible by heads");
    }
};

// Activations are token-major: a sequence of n tokens is an n×d tensor, one row per token.
struct LayerParams {
    Tensor wq, wk, wv;  // d×d, head h owns rows [h·d_h, (h+1)·d_h)
    Tensor wo;          // d×d, head h owns columns [h·d_h, (h+1)·d_h)
    Tensor ln1_gain, ln1_bias;
    Tensor w1, b1;  // d_ffn×d, 1×d_ffn
    Tensor w2, b2;  // d×d_ffn, 1×d
    Tensor ln2_gain, ln2_bias;
};

struct EncoderModel {
    ModelConfig config;
    Tensor token_embedding;     // vocab×d
    Tensor position_embedding;  // n_max×d
    std::vector<LayerParams> layers;
    Tensor classifier_weight;  // num_classes×d
    Tensor classifier_bias;    // 1×num_classes

    static EncoderModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        auto normal = [&](Shape shape, double stddev) {
            std::normal_distribution<double> dist(0.0, stddev);
            std::vector<double> v(shape_numel(shape));
            for (auto& x : v) x = dist(rng);
            return Tensor(std::move(shape), std::move(v), true);
        };
        const double in_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
        const double in_ffn = 1.0 / std::sqrt(static_cast<double>(cfg.d_ffn));
        EncoderModel m;
        m.config = cfg;
        m.token_embedding = normal({cfg.vocab, cfg.d}, 1.0);
        m.position_embedding = normal({cfg.n_max, cfg.d}, 0.1);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            LayerParams p;
            p.wq = normal({cfg.d, cfg.d}, in_d);
            p.wk = normal({cfg.d, cfg.d}, in_d);
            p.wv = normal({cfg.d, cfg.d}, in_d);
            p.wo = normal({cfg.d, cfg.d}, in_d);
            p.ln1_gain = Tensor::full({1, cfg.d}, 1.0, true);
            p.ln1_bias = Tensor::zeros({1, cfg.d}, true);
            p.w1 = normal({cfg.d_ffn, cfg.d}, in_d);
            p.b1 = Tensor::zeros({1, cfg.d_ffn}, true);
            p.w2 = normal({cfg.d, cfg.d_ffn}, in_ffn);
            p.b2 = Tensor::zeros({1, cfg.d}, true);
            p.ln2_gain = Tensor::full({1, cfg.d}, 1.0, true);
            p.ln2_bias = Tensor::zeros({1, cfg.d}, true);
            m.layers.push_back(std::move(p));
        }
        m.classifier_weight = normal({cfg.num_classes, cfg.d}, in_d);
        m.classifier_bias = Tensor::zeros({1, cfg.num_classes}, true);
        return m;
    }

    std::vector<NamedTensor> named_parameters() const {
        std::vector<NamedTensor> out{{"token_embedding", token_embedding},
                                     {"position_embedding", position_embedding}};
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& p = layers[l];
            const std::string pre = "layer" + std::to_string(l) + ".";
            for (auto& [name, t] : std::vector<std::pair<const char*, Tensor>>{
                     {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}, {"wo", p.wo},
                     {"ln1_gain", p.ln1_gain}, {"ln1_bias", p.ln1_bias}, {"w1", p.w1}, {"b1", p.b1},
                     {"w2", p.w2}, {"b2", p.b2}, {"ln2_gain", p.ln2_gain}, {"ln2_bias", p.ln2_bias}}) {
                out.push_back({pre + name, t});
            }
        }
        out.push_back({"classifier_weight", classifier_weight});
        out.push_back({"classifier_bias", classifier_bias});
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& p : named_parameters()) out.push_back(p.tensor);
        return out;
    }

    /// Deep copy with independent storage.
    EncoderModel clone() const {
        EncoderModel m = *this;
        m.token_embedding = token_embedding.clone();
        m.position_embedding = position_embedding.clone();
        for (auto& p : m.layers) {
            for (Tensor* t : {&p.wq, &p.wk, &p.wv, &p.wo, &p.ln1_gain, &p.ln1_bias, &p.w1, &p.b1, &p.w2, &p.b2,
                              &p.ln2_gain, &p.ln2_bias}) {
                *t = t->clone();
            }
        }
        m.classifier_weight = classifier_weight.clone();
        m.classifier_bias = classifier_bias.clone();
        return m;
    }

    void zero_grad() const {
        for (auto& p : parameters()) {
            Tensor t = p;
            t.zero_grad();
        }
    }
};

struct MhaOutput {
    Tensor out;                      // n×d, LN(Att(x) + x)
    std::vector<Tensor> head_probs;  // N_h tensors of n×n, row = query
};

/// Multi-head self-attention block with residual and LayerNorm. Keys whose
/// key_keep flag is false receive zero probability.
inline MhaOutput mha_forward(const EncoderModel& model, const Tensor& x, std::size_t layer,
                             const std::vector<bool>& key_keep = {}) {
    const auto& cfg = model.config;
    if (x.dim() != 2 || x.cols() != cfg.d) {
        throw ShapeError("mha_forward: expected n×" + std::to_string(cfg.d) + " input, got " + shape_str(x.shape()));
    }
    if (!key_keep.empty() && key_keep.size() != x.rows()) {
        throw ShapeError("mha_forward: key mask length " + std::to_string(key_keep.size()) + " for " +
                         std::to_string(x.rows()) + " tokens");
    }
    const auto& p = model.layers.at(layer);
    const std::size_t dh = cfg.d_head();
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    Tensor q = matmul_nt(x, p.wq);
    Tensor k = matmul_nt(x, p.wk);
    Tensor v = matmul_nt(x, p.wv);
    MhaOutput result;
    std::vector<Tensor> contexts;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor probs = softmax_rows(scale(matmul_nt(qh, kh), inv_scale), key_keep);
        contexts.push_back(matmul(probs, vh));
        result.head_probs.push_back(probs);
    }
    Tensor att = matmul_nt(cfg.heads == 1 ? contexts.front() : concat_cols(contexts), p.wo);
    result.out = layer_norm_rows(add(att, x), p.ln1_gain, p.ln1_bias);
    return result;
}

/// LN(FFN(x) + x) with FFN(x) = GELU(W₂(W₁x + b₁)) + b₂.
inline Tensor ffn_forward(const EncoderModel& model, const Tensor& x_mha, std::size_t layer) {
    const auto& cfg = model.config;
    if (x_mha.dim() != 2 || x_mha.cols() != cfg.d) {
        throw ShapeError("ffn_forward: expected n×" + std::to_string(cfg.d) + " input, got " +
                         shape_str(x_mha.shape()));
    }
    const auto& p = model.layers.at(layer);
    Tensor hidden = add(matmul_nt(x_mha, p.w1), p.b1);
    Tensor ffn = add(gelu(matmul_nt(hidden, p.w2)), p.b2);
    return layer_norm_rows(add(ffn, x_mha), p.ln2_gain, p.ln2_bias);
}

/// Logits from the first row of the final activations.
inline Tensor classify(const EncoderModel& model, const Tensor& encoded) {
    if (encoded.dim() != 2 || encoded.rows() == 0 || encoded.cols() != model.config.d) {
        throw ShapeError("classify: bad activations " + shape_str(encoded.shape()));
    }
    Tensor first = gather_rows(encoded, {0});
    return add(matmul_nt(first, model.classifier_weight), model.classifier_bias);
}

struct AttentionRecord {
    std::vector<Tensor> probs;         // per layer, N_h×n_l×n_l
    std::vector<Tensor> layer_inputs;  // per layer, n_l×d
};

struct EncodeResult {
    std::vector<Tensor> layer_outputs;
    AttentionRecord attention;
    PruneTrace trace;
    /// Soft mode only: per-layer raw masks and running products, 1×n each.
    std::vector<Tensor> soft_masks;
    std::vector<Tensor> running_masks;
    Tensor final;
    /// Original position of each row of `final`.
    std::vector<std::size_t> positions;
    std::vector<bool> pad;
};

inline Tensor classify(const EncoderModel& model, const EncodeResult& encoded) {
    if (encoded.positions.empty() || encoded.positions.front() != 0) {
        throw std::logic_error("classify: the first position was pruned");
    }
    return classify(model, encoded.final);
}

namespace detail {

inline Tensor stack_heads(const std::vector<Tensor>& heads) {
    const std::size_t n = heads.front().rows();
    std::vector<double> data;
    data.reserve(heads.size() * n * n);
    for (const auto& h : heads) data.insert(data.end(), h.data().begin(), h.data().end());
    return Tensor({heads.size(), n, n}, std::move(data));
}

inline std::vector<double> scatter(const std::vector<double>& values, const std::vector<std::size_t>& positions,
                                   std::size_t n) {
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < positions.size(); ++i) out[positions[i]] = values[i];
    return out;
}

} // namespace detail

/// Embedding, L encoder layers with the pruning hook selected by `ctx`, and
/// the final activations ready for classify().
inline EncodeResult encode(const EncoderModel& model, const TokenSeq& tokens, const PruneContext& ctx) {
    const auto& cfg = model.config;
    const std::size_t n = tokens.size();
    if (n == 0) throw std::invalid_argument("encode: empty sequence");
    if (n > cfg.n_max) {
        throw std::invalid_argument("encode: length " + std::to_string(n) + " exceeds n_max " +
                                    std::to_string(cfg.n_max));
    }
    ctx.validate(cfg.layers);

    EncodeResult res;
    res.pad.resize(n);
    std::vector<std::size_t> ids(n), pos(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab) {
            throw std::invalid_argument("encode: token id " + std::to_string(tokens[i]) + " outside vocabulary");
        }
        ids[i] = static_cast<std::size_t>(tokens[i]);
        pos[i] = i;
        res.pad[i] = tokens[i] == pad_token;
    }
    std::vector<bool> non_pad(n);
    for (std::size_t i = 0; i < n; ++i) non_pad[i] = !res.pad[i];
    const std::size_t n_real = static_cast<std::size_t>(std::count(non_pad.begin(), non_pad.end(), true));
    if (n_real == 0) throw std::invalid_argument("encode: sequence is all padding");

    Tensor x = add(gather_rows(model.token_embedding, ids), gather_rows(model.position_embedding, pos));
    const bool hard = is_hard_mode(ctx.mode);
    std::vector<std::size_t> positions = pos;
    if (hard && n_real < n) {
        auto c = compact(x, non_pad);
        x = c.x;
        positions = std::move(c.index);
    }
    res.trace.input_length = n_real;

    Tensor running;
    if (ctx.mode == PruneMode::soft) running = Tensor::full({1, n}, 1.0);

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const std::size_t cur = x.rows();
        // Under hard pruning every surviving row is a real token.
        const std::vector<bool> active = hard ? std::vector<bool>(cur, true) : non_pad;
        if (ctx.record_attention) res.attention.layer_inputs.push_back(x.detach());

        MhaOutput mha = mha_forward(model, x, l, hard ? std::vector<bool>{} : active);
        Tensor out = ffn_forward(model, mha.out, l);

        LayerTrace lt;
        lt.entering = hard ? cur : n_real;
        Tensor probs_stack = detail::stack_heads(mha.head_probs);
        if (ctx.record_attention) res.attention.probs.push_back(probs_stack);

        std::vector<bool> protect(cur, false);
        for (std::size_t r = 0; r < cur; ++r) {
            for (std::size_t p : ctx.protected_positions) protect[r] = protect[r] || positions[r] == p;
        }

        if (ctx.mode == PruneMode::soft) {
            Tensor scores = importance_scores(mha.head_probs, active);
            Tensor mask = soft_mask(scores, ctx.thresholds->layer(l), ctx.thresholds->temperature);
            std::vector<double> free(n), fixed(n);
            for (std::size_t i = 0; i < n; ++i) {
                free[i] = (protect[i] || res.pad[i]) ? 0.0 : 1.0;
                fixed[i] = (protect[i] && !res.pad[i]) ? 1.0 : 0.0;
            }
            mask = add(mul(mask, Tensor::row(std::move(free))), Tensor::row(std::move(fixed)));
            auto [masked, next] = apply_soft_mask(out, mask, running);
            out = masked;
            running = next;
            lt.scores = scores.values();
            lt.mask = mask.values();
            lt.running = running.values();
            for (std::size_t i = 0; i < n; ++i) {
                if (!res.pad[i] && lt.running[i] > 0.5) {
                    lt.kept.push_back(i);
                }
            }
            lt.retained = lt.kept.size();
            res.soft_masks.push_back(mask);
            res.running_masks.push_back(running);
        } else {
            const std::vector<double> scores = importance_scores(probs_stack, active);
            std::vector<bool> keep(cur, true);
            if (ctx.mode == PruneMode::hard || ctx.mode == PruneMode::manual) {
                std::vector<std::size_t> prot_rows;
                for (std::size_t r = 0; r < cur; ++r) {
                    if (protect[r]) prot_rows.push_back(r);
                }
                keep = hard_mask(scores, ctx.thresholds->value(l), prot_rows);
            } else if (ctx.mode == PruneMode::topk || ctx.mode == PruneMode::spatten) {
                const std::size_t base = (ctx.mode == PruneMode::topk && ctx.reference_length)
                                             ? *ctx.reference_length
                                             : n_real;
                const std::size_t n_prot = static_cast<std::size_t>(std::count(protect.begin(), protect.end(), true));
                std::size_t k = retain_count((*ctx.schedule)[l], base);
                k = std::clamp(k, std::max<std::size_t>(n_prot, 1), cur);
                std::vector<double> ranked = scores;
                for (std::size_t r = 0; r < cur; ++r) {
                    if (protect[r]) ranked[r] = std::numeric_limits<double>::infinity();
                }
                keep = topk_select(ranked, k);
            }
            lt.scores = detail::scatter(scores, positions, n);
            std::vector<double> mask_values(cur);
            for (std::size_t r = 0; r < cur; ++r) mask_values[r] = keep[r] ? 1.0 : 0.0;
            lt.mask = detail::scatter(mask_values, positions, n);
            if (hard) {
                auto c = compact(out, keep);
                out = c.x;
                std::vector<std::size_t> next;
                for (std::size_t r : c.index) next.push_back(positions[r]);
                positions = std::move(next);
                lt.kept = positions;
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    if (!res.pad[i]) lt.kept.push_back(i);
                }
            }
            lt.retained = lt.kept.size();
        }
        res.trace.layers.push_back(std::move(lt));
        res.layer_outputs.push_back(out);
        x = out;
    }
    res.final = x;
    res.positions = positions;
    return res;
}

} // namespace ltp
