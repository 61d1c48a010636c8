#pragma once

// Token refinement between chain levels: project the language model's chain
// embedding into prompt space (beta), pool image features under the previous
// level's soft mask into a prototype, and add a cross-attention correction.
// The cross-attention output projection starts at zero, so refinement is the
// identity on top of the projection until training moves it.

#include "cores/params.hpp"

#include <cmath>
#include <optional>
#include <string>

namespace cores {

struct RefinerConfig {
    int hidden_dim = 64;     // language model hidden width
    int prompt_dim = 32;     // decoder prompt width
    int feat_channels = 32;  // image feature channels entering MAP
    int grid = 16;           // feature grid side
    Scalar map_epsilon = 1e-6;

    void validate() const {
        if (hidden_dim < 1 || prompt_dim < 1 || feat_channels < 1 || grid < 1)
            throw ConfigError("refiner: dimensions must be positive");
    }
};

class Refiner {
  public:
    Refiner(ParamStore& store, const RefinerConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int D = cfg_.hidden_dim, P = cfg_.prompt_dim, C = cfg_.feat_channels;
        const int W = 2 * P;
        b1w_ = add_normal(store, rng, "refiner.beta.w1", {D, W}, 1.0 / std::sqrt(static_cast<Scalar>(D)));
        b1b_ = store.add("refiner.beta.b1", Tensor({W}), false);
        b2w_ = add_normal(store, rng, "refiner.beta.w2", {W, P}, 1.0 / std::sqrt(static_cast<Scalar>(W)));
        b2b_ = store.add("refiner.beta.b2", Tensor({P}), false);
        qw_ = add_normal(store, rng, "refiner.ca.wq", {P, P}, 1.0 / std::sqrt(static_cast<Scalar>(P)));
        qb_ = store.add("refiner.ca.bq", Tensor({P}), false);
        kw_ = add_normal(store, rng, "refiner.ca.wk", {C, P}, 1.0 / std::sqrt(static_cast<Scalar>(C)));
        kb_ = store.add("refiner.ca.bk", Tensor({P}), false);
        vw_ = add_normal(store, rng, "refiner.ca.wv", {C, P}, 1.0 / std::sqrt(static_cast<Scalar>(C)));
        vb_ = store.add("refiner.ca.bv", Tensor({P}), false);
        ow_ = store.add("refiner.ca.wo", Tensor({P, P}), false);
        ob_ = store.add("refiner.ca.bo", Tensor({P}), false);
    }

    const RefinerConfig& config() const { return cfg_; }

    // beta: [n, hidden_dim] -> [n, prompt_dim] through a two-layer MLP.
    Var project(Graph& g, ParamBinding& bind, Var h) const {
        if (g.val(h).cols() != cfg_.hidden_dim)
            throw std::invalid_argument("refiner project: expected width " + std::to_string(cfg_.hidden_dim) + ", got " +
                                        shape_str(g.val(h).shape));
        Var mid = g.gelu(g.add_rowvec(g.matmul(h, bind[b1w_]), bind[b1b_]));
        return g.add_rowvec(g.matmul(mid, bind[b2w_]), bind[b2b_]);
    }

    // Soft-mask weighted mean of feature rows [N, C] using mask logits at
    // image resolution: proto = sum_p w_p f_p / (sum_p w_p + eps),
    // w = sigmoid(downsampled logits). Output [1, C].
    Var masked_average_pool(Graph& g, Var feat_rows, Var mask_logits) const {
        const int N = cfg_.grid * cfg_.grid;
        if (g.val(feat_rows).rows() != N || g.val(feat_rows).cols() != cfg_.feat_channels)
            throw std::invalid_argument("masked_average_pool: feature rows shape " + shape_str(g.val(feat_rows).shape));
        Var w = g.sigmoid(g.bilinear_resize(mask_logits, cfg_.grid, cfg_.grid));
        Var wrow = g.reshape(w, {1, N});
        Var weighted = g.matmul(wrow, feat_rows);
        Var denom = g.recip(g.add_const(g.sum_all(wrow), cfg_.map_epsilon));
        return g.mul_scalarvar(weighted, denom);
    }

    // Single-query cross-attention against the one-element prototype; returns
    // the additive delta. With a single key the softmax weight is exactly 1,
    // so the delta is out_proj(value_proj(prototype)).
    Var cross_attend(Graph& g, ParamBinding& bind, Var h_prompt, Var proto) const {
        if (g.val(h_prompt).cols() != cfg_.prompt_dim || g.val(proto).cols() != cfg_.feat_channels)
            throw std::invalid_argument("cross_attend: width mismatch");
        Var q = g.add_rowvec(g.matmul(h_prompt, bind[qw_]), bind[qb_]);
        Var k = g.add_rowvec(g.matmul(proto, bind[kw_]), bind[kb_]);
        Var v = g.add_rowvec(g.matmul(proto, bind[vw_]), bind[vb_]);
        Var score = g.scale(g.matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<Scalar>(cfg_.prompt_dim)));
        Var attn = g.softmax_rows(score);
        Var ctx = g.matmul(attn, v);
        return g.add_rowvec(g.matmul(ctx, bind[ow_]), bind[ob_]);
    }

    // Level-t refinement (t >= 1): beta(h) + CA(beta(h), MAP(F, m^{t-1})).
    // Level 0 uses project() alone; there is no previous mask to pool under.
    Var refine(Graph& g, ParamBinding& bind, Var h_hidden, Var feat_rows, Var prev_mask_logits) const {
        Var p = project(g, bind, h_hidden);
        Var proto = masked_average_pool(g, feat_rows, prev_mask_logits);
        return g.add(p, cross_attend(g, bind, p, proto));
    }

  private:
    static ParamId add_normal(ParamStore& store, Rng& rng, const std::string& name, std::vector<int> shape, Scalar stddev) {
        Tensor t(std::move(shape));
        rng.fill_normal(t, 0.0, stddev);
        return store.add(name, std::move(t), false);
    }

    RefinerConfig cfg_;
    ParamId b1w_, b1b_, b2w_, b2b_;
    ParamId qw_, qb_, kw_, kb_, vw_, vb_, ow_, ob_;
};

} // namespace cores
