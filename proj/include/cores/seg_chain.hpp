#pragma once

// Multi-level segmenting chain. Each level decodes mask logits from image
// features, an optional mask-prompt embedding derived from the previous
// level's logits, and a (refined) token embedding. Supervision is restricted
// to the final level: only ChainState::final_mask() can mint the FinalMask
// token that the combined segmentation loss accepts.

#include "cores/backbone.hpp"
#include "cores/refiner.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cores {

struct SegChainConfig {
    int levels = 2;
    bool use_cor = true;      // multi-level text chain drives distinct embeddings
    bool use_cos = true;      // multi-level mask decoding
    bool use_refiner = true;  // cross-attention token refinement between levels
    int in_context_k = 1;

    void validate() const {
        if (levels < 1) throw ConfigError("seg chain: levels must be >= 1");
        if (use_refiner && !use_cos) throw ConfigError("seg chain: use_refiner requires use_cos");
        if (in_context_k < 0) throw ConfigError("seg chain: in_context_k must be >= 0");
    }
};

// Lightweight two-way mask decoder: image cells and the condition token
// exchange information once, then a transposed-conv head upsamples per-cell
// features to image resolution and a token-conditioned hypernetwork produces
// the per-pixel logit weights.
class MaskDecoder {
  public:
    struct Config {
        int grid = 16;
        int image_size = 64;
        int feat_channels = 32;
        int prompt_dim = 32;
        int mask_channels = 8;
        int hyper_hidden = 16;

        void validate() const {
            if (grid < 1 || feat_channels < 1 || prompt_dim < 1 || mask_channels < 1 || hyper_hidden < 1)
                throw ConfigError("mask decoder: dimensions must be positive");
            if (image_size != 4 * grid)
                throw ConfigError("mask decoder: image_size must be 4*grid to match the two 2x upsampling stages");
        }
    };

    MaskDecoder(ParamStore& store, const Config& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int C = cfg_.feat_channels, D = cfg_.prompt_dim, N = cfg_.grid * cfg_.grid;
        const int M = cfg_.mask_channels, HH = cfg_.hyper_hidden;
        fw_ = add_normal(store, rng, "decoder.feat.w", {C, D}, 1.0 / std::sqrt(static_cast<Scalar>(C)));
        fb_ = store.add("decoder.feat.b", Tensor({D}), false);
        pos_ = add_normal(store, rng, "decoder.pos", {N, D}, 0.1);
        no_prompt_ = add_normal(store, rng, "decoder.no_prompt", {D}, 0.5);
        tw_ = add_normal(store, rng, "decoder.token.w", {D, D}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        tb_ = store.add("decoder.token.b", Tensor({D}), false);
        qw_ = add_normal(store, rng, "decoder.read.wq", {D, D}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        rw_ = add_normal(store, rng, "decoder.read.wr", {D, D}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        m1w_ = add_normal(store, rng, "decoder.mlp.w1", {D, 2 * D}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        m1b_ = store.add("decoder.mlp.b1", Tensor({2 * D}), false);
        m2w_ = add_normal(store, rng, "decoder.mlp.w2", {2 * D, D}, 1.0 / std::sqrt(static_cast<Scalar>(2 * D)));
        m2b_ = store.add("decoder.mlp.b2", Tensor({D}), false);
        uw_ = add_normal(store, rng, "decoder.up.proj", {D, M}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        ub_ = store.add("decoder.up.proj_b", Tensor({M}), false);
        u1w_ = add_normal(store, rng, "decoder.up.w1", {M, M, 2, 2}, 1.0 / std::sqrt(static_cast<Scalar>(M)));
        u1b_ = store.add("decoder.up.b1", Tensor({M}), false);
        u2w_ = add_normal(store, rng, "decoder.up.w2", {M, M, 2, 2}, 1.0 / std::sqrt(static_cast<Scalar>(M)));
        u2b_ = store.add("decoder.up.b2", Tensor({M}), false);
        h1w_ = add_normal(store, rng, "decoder.hyper.w1", {D, HH}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        h1b_ = store.add("decoder.hyper.b1", Tensor({HH}), false);
        h2w_ = add_normal(store, rng, "decoder.hyper.w2", {HH, M}, 1.0 / std::sqrt(static_cast<Scalar>(HH)));
        h2b_ = store.add("decoder.hyper.b2", Tensor({M}), false);
        ob_ = store.add("decoder.out.b", Tensor({1}), false);
    }

    const Config& config() const { return cfg_; }

    // feat_rows: [grid^2, feat_channels]; prompt_rows: [grid^2, prompt_dim] or
    // absent (a learned embedding substitutes); token: [1, prompt_dim].
    // Returns logits at image resolution [image_size, image_size].
    Var decode(Graph& g, ParamBinding& bind, Var feat_rows, std::optional<Var> prompt_rows, Var token) const {
        const int N = cfg_.grid * cfg_.grid, D = cfg_.prompt_dim, M = cfg_.mask_channels;
        const int S = cfg_.image_size;
        if (g.val(feat_rows).rows() != N || g.val(feat_rows).cols() != cfg_.feat_channels)
            throw std::invalid_argument("decode: feature rows shape " + shape_str(g.val(feat_rows).shape));
        if (g.val(token).rows() != 1 || g.val(token).cols() != D)
            throw std::invalid_argument("decode: token shape " + shape_str(g.val(token).shape));
        if (prompt_rows && (g.val(*prompt_rows).rows() != N || g.val(*prompt_rows).cols() != D))
            throw std::invalid_argument("decode: prompt rows shape " + shape_str(g.val(*prompt_rows).shape));

        Var x = g.add(g.add_rowvec(g.matmul(feat_rows, bind[fw_]), bind[fb_]), bind[pos_]);
        x = prompt_rows ? g.add(x, *prompt_rows) : g.add_rowvec(x, bind[no_prompt_]);

        Var tok = g.add_rowvec(g.matmul(token, bind[tw_]), bind[tb_]);
        Var q = g.matmul(tok, bind[qw_]);
        Var scores = g.scale(g.matmul(q, x, false, true), 1.0 / std::sqrt(static_cast<Scalar>(D)));
        Var read = g.matmul(g.softmax_rows(scores), x);
        tok = g.add(tok, g.matmul(read, bind[rw_]));

        Var mid = g.gelu(g.add_rowvec(g.matmul(x, bind[m1w_]), bind[m1b_]));
        x = g.add(x, g.add_rowvec(g.matmul(mid, bind[m2w_]), bind[m2b_]));

        Var cells = g.add_rowvec(g.matmul(x, bind[uw_]), bind[ub_]);
        Var grid3 = g.reshape(g.transpose(cells), {M, cfg_.grid, cfg_.grid});
        Var up = g.gelu(g.tconv2d(grid3, bind[u1w_], bind[u1b_], 2));
        up = g.tconv2d(up, bind[u2w_], bind[u2b_], 2);

        Var hyper = g.gelu(g.add_rowvec(g.matmul(tok, bind[h1w_]), bind[h1b_]));
        Var weights = g.add_rowvec(g.matmul(hyper, bind[h2w_]), bind[h2b_]);
        Var flat = g.matmul(weights, g.reshape(up, {M, S * S}));
        return g.add_scalarvar(g.reshape(flat, {S, S}), bind[ob_]);
    }

  private:
    static ParamId add_normal(ParamStore& store, Rng& rng, const std::string& name, std::vector<int> shape, Scalar stddev) {
        Tensor t(std::move(shape));
        rng.fill_normal(t, 0.0, stddev);
        return store.add(name, std::move(t), false);
    }

    Config cfg_;
    ParamId fw_, fb_, pos_, no_prompt_, tw_, tb_, qw_, rw_;
    ParamId m1w_, m1b_, m2w_, m2b_;
    ParamId uw_, ub_, u1w_, u1b_, u2w_, u2b_;
    ParamId h1w_, h1b_, h2w_, h2b_, ob_;
};

// Capability token for the final-level mask. Only ChainState can construct
// one, so any API that takes FinalMask is statically restricted to the last
// mask of a chain.
class FinalMask {
  public:
    Var logits() const { return logits_; }

  private:
    friend class ChainState;
    explicit FinalMask(Var v) : logits_(v) {}
    Var logits_;
};

class ChainState {
  public:
    int levels() const { return static_cast<int>(levels_.size()); }
    bool degraded() const { return degraded_; }
    int theta_calls() const { return theta_calls_; }
    int refine_calls() const { return refine_calls_; }

    Var hidden(int t) const { return level(t).hidden; }
    Var refined(int t) const { return level(t).refined; }
    const std::optional<Var>& prompt(int t) const { return level(t).prompt; }

    // Reading a non-final mask is allowed for diagnostics but recorded, so
    // training code can assert it never touched one.
    Var mask_logits(int t) const {
        const Level& lv = level(t);
        if (t != levels() - 1) intermediate_accessed_ = true;
        return lv.mask;
    }

    bool intermediate_accessed() const { return intermediate_accessed_; }

    FinalMask final_mask() const {
        if (levels_.empty()) throw std::logic_error("chain state: empty");
        return FinalMask(levels_.back().mask);
    }

  private:
    friend class SegChain;

    struct Level {
        Var hidden;
        Var refined;
        std::optional<Var> prompt;
        Var mask;
    };

    const Level& level(int t) const {
        if (t < 0 || t >= levels()) throw std::out_of_range("chain state: level " + std::to_string(t));
        return levels_[static_cast<std::size_t>(t)];
    }

    std::vector<Level> levels_;
    bool degraded_ = false;
    int theta_calls_ = 0;
    int refine_calls_ = 0;
    mutable bool intermediate_accessed_ = false;
};

class SegChain {
  public:
    SegChain(const Backbone& backbone, const Refiner& refiner, const MaskDecoder& decoder)
        : backbone_(backbone), refiner_(refiner), decoder_(decoder) {
        if (backbone.config().feat_channels != decoder.config().feat_channels ||
            backbone.config().prompt_channels != decoder.config().prompt_dim ||
            backbone.config().grid != decoder.config().grid ||
            backbone.config().image_size != decoder.config().image_size)
            throw ConfigError("seg chain: backbone and decoder dimensions disagree");
        if (refiner.config().prompt_dim != decoder.config().prompt_dim ||
            refiner.config().feat_channels != backbone.config().feat_channels ||
            refiner.config().grid != backbone.config().grid)
            throw ConfigError("seg chain: refiner dimensions disagree");
    }

    const Backbone& backbone() const { return backbone_; }
    const Refiner& refiner() const { return refiner_; }
    const MaskDecoder& decoder() const { return decoder_; }

    // chain_embeddings: [rows, hidden_dim], one row per level. Fewer rows than
    // config.levels degrades to a single decode from the last available row;
    // more rows is a caller bug.
    ChainState run_chain(Graph& g, ParamBinding& bind, const Tensor& image, Var chain_embeddings,
                         const SegChainConfig& cfg) const {
        cfg.validate();
        const int rows = g.val(chain_embeddings).rows();
        if (rows == 0) throw ChainDegradationError("run_chain: no chain embeddings available");
        if (rows > cfg.levels)
            throw std::invalid_argument("run_chain: got " + std::to_string(rows) + " embeddings for " +
                                        std::to_string(cfg.levels) + " levels");

        ChainState state;
        state.degraded_ = rows < cfg.levels;
        const int steps = state.degraded_ ? 1 : cfg.levels;

        Tensor feat = backbone_.extract_features(bind.store(), image);
        Var feat_rows = g.constant(Backbone::features_as_rows(feat));

        std::optional<Var> prev_mask;
        for (int t = 0; t < steps; ++t) {
            Var h = g.row(chain_embeddings, state.degraded_ ? rows - 1 : t);
            ChainState::Level lv{h, h, std::nullopt, h};
            if (t == 0) {
                lv.refined = refiner_.project(g, bind, h);
            } else {
                lv.prompt = backbone_.encode_mask_prompt(g, bind, *prev_mask);
                ++state.theta_calls_;
                if (cfg.use_refiner) {
                    lv.refined = refiner_.refine(g, bind, h, feat_rows, *prev_mask);
                    ++state.refine_calls_;
                } else {
                    lv.refined = refiner_.project(g, bind, h);
                }
            }
            lv.mask = decoder_.decode(g, bind, feat_rows, lv.prompt, lv.refined);
            prev_mask = lv.mask;
            state.levels_.push_back(std::move(lv));
        }
        return state;
    }

    Var single_token_baseline(Graph& g, ParamBinding& bind, const Tensor& image, Var seg_embedding) const {
        SegChainConfig cfg;
        cfg.levels = 1;
        cfg.use_cor = false;
        cfg.use_cos = false;
        cfg.use_refiner = false;
        return run_chain(g, bind, image, seg_embedding, cfg).final_mask().logits();
    }

  private:
    const Backbone& backbone_;
    const Refiner& refiner_;
    const MaskDecoder& decoder_;
};

// Threshold logits at probability 0.5 into a binary raster of 0/1 bytes.
inline std::vector<std::uint8_t> binarize_logits(const Tensor& logits) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(logits.size()));
    for (std::int64_t i = 0; i < logits.size(); ++i) out[static_cast<std::size_t>(i)] = logits.data[i] > 0.0 ? 1 : 0;
    return out;
}

} // namespace cores
