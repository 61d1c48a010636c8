#pragma once

// Frozen visual side: a strided convolutional feature extractor standing in
// for a large pretrained image encoder, and the soft-mask prompt encoder that
// turns previous-round mask logits into a dense prompt grid. Features are
// computed off-tape (inputs are data, parameters never train); the prompt
// encoder runs on-tape because gradients must flow through the previous mask.

#include "cores/params.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace cores {

struct BackboneConfig {
    int image_size = 64;
    int grid = 16;           // feature grid side = image_size / 4
    int stem_channels = 16;
    int feat_channels = 32;
    int prompt_channels = 32;

    void validate() const {
        if (image_size != grid * 4) throw ConfigError("backbone: image_size must be 4 * grid");
        if (stem_channels < 1 || feat_channels < 1 || prompt_channels < 1)
            throw ConfigError("backbone: channel counts must be positive");
    }
};

namespace detail {

// 3x3 conv, stride 2, pad 1: [Cin, H, W] -> [Cout, H/2, W/2].
inline Tensor conv3x3_s2(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Cout = w.dim(0);
    const int OH = H / 2, OW = W / 2;
    Tensor out({Cout, OH, OW});
    for (int co = 0; co < Cout; ++co)
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                Scalar acc = b.data[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < Cin; ++ci)
                    for (int ky = 0; ky < 3; ++ky) {
                        const int iy = oy * 2 + ky - 1;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int ix = ox * 2 + kx - 1;
                            if (ix < 0 || ix >= W) continue;
                            acc += x.data[(static_cast<std::size_t>(ci) * H + iy) * W + ix] *
                                   w.data[((static_cast<std::size_t>(co) * Cin + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                out.data[(static_cast<std::size_t>(co) * OH + oy) * OW + ox] = acc;
            }
    return out;
}

} // namespace detail

class Backbone {
  public:
    Backbone(ParamStore& store, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        Tensor c1w({cfg_.stem_channels, 3, 3, 3});
        rng.fill_normal(c1w, 0.0, std::sqrt(2.0 / 27.0));
        Tensor c1b({cfg_.stem_channels});
        rng.fill_normal(c1b, 0.0, 0.05);
        Tensor c2w({cfg_.feat_channels, cfg_.stem_channels, 3, 3});
        rng.fill_normal(c2w, 0.0, std::sqrt(2.0 / (9.0 * cfg_.stem_channels)));
        Tensor c2b({cfg_.feat_channels});
        rng.fill_normal(c2b, 0.0, 0.05);
        Tensor thw({1, cfg_.prompt_channels});
        rng.fill_normal(thw, 0.0, 0.5);
        Tensor thb({cfg_.prompt_channels});
        rng.fill_normal(thb, 0.0, 0.1);

        c1w_ = store.add("backbone.stem.w", std::move(c1w), true);
        c1b_ = store.add("backbone.stem.b", std::move(c1b), true);
        c2w_ = store.add("backbone.feat.w", std::move(c2w), true);
        c2b_ = store.add("backbone.feat.b", std::move(c2b), true);
        thw_ = store.add("backbone.prompt.w", std::move(thw), true);
        thb_ = store.add("backbone.prompt.b", std::move(thb), true);
    }

    const BackboneConfig& config() const { return cfg_; }

    // F_v: [3, S, S] image -> [feat_channels, grid, grid], deterministic.
    Tensor extract_features(const ParamStore& store, const Tensor& image) const {
        if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
            throw std::invalid_argument("extract_features: expected [3," + std::to_string(cfg_.image_size) + "," +
                                        std::to_string(cfg_.image_size) + "] image, got " + shape_str(image.shape));
        Tensor h = detail::conv3x3_s2(image, store.value(c1w_), store.value(c1b_));
        for (auto& v : h.data) v = detail::gelu_fwd(v);
        Tensor f = detail::conv3x3_s2(h, store.value(c2w_), store.value(c2b_));
        for (auto& v : f.data) v = std::tanh(v);
        return f;
    }

    // Feature map [C, G, G] flattened to per-cell rows [G*G, C] for fusion.
    static Tensor features_as_rows(const Tensor& feat) {
        const int C = feat.dim(0), G = feat.dim(1);
        Tensor rows({G * G, C});
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < G; ++y)
                for (int x = 0; x < G; ++x)
                    rows.data[(static_cast<std::size_t>(y) * G + x) * C + c] = feat.data[(static_cast<std::size_t>(c) * G + y) * G + x];
        return rows;
    }

    // Mean-pool the feature grid to out_grid x out_grid token rows [P, C]
    // for the language model's visual prefix.
    static Tensor pool_to_tokens(const Tensor& feat, int out_grid) {
        const int C = feat.dim(0), G = feat.dim(1);
        if (G % out_grid != 0) throw std::invalid_argument("pool_to_tokens: grid not divisible");
        const int s = G / out_grid;
        Tensor rows({out_grid * out_grid, C});
        for (int c = 0; c < C; ++c)
            for (int oy = 0; oy < out_grid; ++oy)
                for (int ox = 0; ox < out_grid; ++ox) {
                    Scalar acc = 0;
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx)
                            acc += feat.data[(static_cast<std::size_t>(c) * G + oy * s + dy) * G + ox * s + dx];
                    rows.data[(static_cast<std::size_t>(oy) * out_grid + ox) * C + c] = acc / (s * s);
                }
        return rows;
    }

    // theta: mask logits [S, S] -> dense prompt rows [grid*grid, prompt_channels].
    // Raw logits in, never binarized; differentiable w.r.t. the logits.
    Var encode_mask_prompt(Graph& g, ParamBinding& bind, Var mask_logits) const {
        const Tensor& m = g.val(mask_logits);
        if (m.ndim() != 2 || m.dim(0) != cfg_.image_size || m.dim(1) != cfg_.image_size)
            throw std::invalid_argument("encode_mask_prompt: expected [" + std::to_string(cfg_.image_size) + "," +
                                        std::to_string(cfg_.image_size) + "] logits, got " + shape_str(m.shape));
        Var down = g.bilinear_resize(mask_logits, cfg_.grid, cfg_.grid);
        Var col = g.reshape(down, {cfg_.grid * cfg_.grid, 1});
        return g.add_rowvec(g.matmul(col, bind[thw_]), bind[thb_]);
    }

    ParamId prompt_w() const { return thw_; }
    ParamId prompt_b() const { return thb_; }

  private:
    BackboneConfig cfg_;
    ParamId c1w_, c1b_, c2w_, c2b_, thw_, thb_;
};

} // namespace cores
