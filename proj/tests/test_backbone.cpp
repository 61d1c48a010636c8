#include "cores/backbone.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace cores;

namespace {

Tensor random_image(Rng& rng, int size) {
    Tensor img({3, size, size});
    rng.fill_uniform(img, 0.0, 1.0);
    return img;
}

} // namespace

TEST_CASE("feature extraction is deterministic with the documented shape", "[backbone]") {
    ParamStore store;
    Rng rng(301);
    Backbone bb(store, BackboneConfig{}, rng);

    Rng img_rng(302);
    const Tensor img = random_image(img_rng, 64);
    const Tensor f1 = bb.extract_features(store, img);
    const Tensor f2 = bb.extract_features(store, img);
    REQUIRE(f1.shape == std::vector<int>{32, 16, 16});
    REQUIRE(f1.all_finite());
    for (std::int64_t i = 0; i < f1.size(); ++i) REQUIRE(f1.data[i] == f2.data[i]);

    const Tensor zero_f = bb.extract_features(store, Tensor({3, 64, 64}));
    const Tensor zero_f2 = bb.extract_features(store, Tensor({3, 64, 64}));
    REQUIRE(zero_f.all_finite());
    for (std::int64_t i = 0; i < zero_f.size(); ++i) REQUIRE(zero_f.data[i] == zero_f2.data[i]);
    // bias-only response is spatially constant away from the zero-padded rim
    for (int c = 0; c < 32; ++c)
        for (int y = 2; y < 14; ++y)
            for (int x = 2; x < 14; ++x)
                REQUIRE(zero_f.data[(static_cast<std::size_t>(c) * 16 + y) * 16 + x] ==
                        Catch::Approx(zero_f.data[(static_cast<std::size_t>(c) * 16 + 8) * 16 + 8]).margin(1e-12));

    REQUIRE_THROWS_AS(bb.extract_features(store, Tensor({3, 32, 32})), std::invalid_argument);
    REQUIRE_THROWS_AS(bb.extract_features(store, Tensor({1, 64, 64})), std::invalid_argument);
}

TEST_CASE("every backbone parameter is registered frozen", "[backbone]") {
    ParamStore store;
    Rng rng(303);
    Backbone bb(store, BackboneConfig{}, rng);
    REQUIRE(store.count() == 6);
    for (int i = 0; i < store.count(); ++i) {
        INFO(store.name(i));
        REQUIRE(store.frozen(i));
    }
    REQUIRE(store.trainable_count() == 0);
}

TEST_CASE("shifting the image by one patch stride shifts interior features by one cell", "[backbone]") {
    ParamStore store;
    Rng rng(304);
    Backbone bb(store, BackboneConfig{}, rng);

    Rng img_rng(305);
    const Tensor img = random_image(img_rng, 64);
    Tensor shifted({3, 64, 64});
    for (int c = 0; c < 3; ++c)
        for (int y = 4; y < 64; ++y)
            for (int x = 4; x < 64; ++x)
                shifted.data[(static_cast<std::size_t>(c) * 64 + y) * 64 + x] =
                    img.data[(static_cast<std::size_t>(c) * 64 + y - 4) * 64 + x - 4];

    const Tensor f = bb.extract_features(store, img);
    const Tensor fs = bb.extract_features(store, shifted);
    for (int c = 0; c < 32; ++c)
        for (int y = 2; y < 16; ++y)
            for (int x = 2; x < 16; ++x)
                REQUIRE(fs.data[(static_cast<std::size_t>(c) * 16 + y) * 16 + x] ==
                        Catch::Approx(f.data[(static_cast<std::size_t>(c) * 16 + y - 1) * 16 + x - 1]).margin(1e-12));
}

TEST_CASE("mask prompt encoding is soft, constant-preserving, and differentiable", "[backbone]") {
    ParamStore store;
    Rng rng(306);
    Backbone bb(store, BackboneConfig{}, rng);
    const Tensor& thb = store.value(bb.prompt_b());

    {
        Graph g;
        ParamBinding bind(g, store, true);
        Var zero = g.leaf(Tensor({64, 64}), true);
        Var prompt = bb.encode_mask_prompt(g, bind, zero);
        REQUIRE(g.val(prompt).shape == std::vector<int>{256, 32});
        for (int r = 0; r < 256; ++r)
            for (int c = 0; c < 32; ++c) REQUIRE(g.val(prompt).at(r, c) == Catch::Approx(thb.at(c)).margin(1e-12));
    }
    {
        Graph g;
        ParamBinding bind(g, store, true);
        Tensor logits({64, 64});
        Rng lrng(307);
        lrng.fill_normal(logits, 0.0, 2.0);
        Tensor doubled = logits;
        doubled.scale_(2.0);
        Var p1 = bb.encode_mask_prompt(g, bind, g.leaf(logits, false));
        Var p2 = bb.encode_mask_prompt(g, bind, g.leaf(doubled, false));
        Scalar diff = 0;
        for (std::int64_t i = 0; i < g.val(p1).size(); ++i) diff = std::max(diff, std::abs(g.val(p1).data[i] - g.val(p2).data[i]));
        REQUIRE(diff > 1e-3);
    }
    {
        Graph g;
        ParamBinding bind(g, store, true);
        Tensor logits({64, 64});
        Rng lrng(308);
        lrng.fill_normal(logits, 0.0, 1.0);
        Var m = g.leaf(logits, true);
        Var prompt = bb.encode_mask_prompt(g, bind, m);
        g.backward(g.mean_all(g.gelu(prompt)));
        REQUIRE(g.grad(m).norm2() > 0.0);
    }
}

TEST_CASE("mask prompt encoding matches a hand-composed oracle on a 4x4 grid", "[backbone]") {
    BackboneConfig cfg;
    cfg.image_size = 4;
    cfg.grid = 1;
    ParamStore store;
    Rng rng(309);
    Backbone bb(store, cfg, rng);

    Tensor logits({4, 4});
    Rng lrng(310);
    lrng.fill_normal(logits, 0.0, 1.5);

    // 4 -> 1 bilinear with half-pixel centers samples src 1.5 on both axes,
    // so the single cell is the mean of the central 2x2 block.
    const Scalar pooled = (logits.at(1, 1) + logits.at(1, 2) + logits.at(2, 1) + logits.at(2, 2)) / 4.0;
    const Tensor& w = store.value(bb.prompt_w());
    const Tensor& b = store.value(bb.prompt_b());

    Graph g;
    ParamBinding bind(g, store, false);
    Var prompt = bb.encode_mask_prompt(g, bind, g.leaf(logits, false));
    REQUIRE(g.val(prompt).shape == std::vector<int>{1, cfg.prompt_channels});
    for (int c = 0; c < cfg.prompt_channels; ++c)
        REQUIRE(g.val(prompt).at(0, c) == Catch::Approx(pooled * w.at(0, c) + b.at(c)).margin(1e-12));
}

TEST_CASE("feature pooling and row flattening preserve cell contents", "[backbone]") {
    Tensor feat({2, 4, 4});
    for (std::int64_t i = 0; i < feat.size(); ++i) feat.data[i] = static_cast<Scalar>(i);

    const Tensor rows = Backbone::features_as_rows(feat);
    REQUIRE(rows.shape == std::vector<int>{16, 2});
    REQUIRE(rows.at(0, 0) == feat.data[0]);
    REQUIRE(rows.at(0, 1) == feat.data[16]);
    REQUIRE(rows.at(5, 0) == feat.data[5]);

    const Tensor toks = Backbone::pool_to_tokens(feat, 2);
    REQUIRE(toks.shape == std::vector<int>{4, 2});
    REQUIRE(toks.at(0, 0) == Catch::Approx((0.0 + 1.0 + 4.0 + 5.0) / 4.0));
    REQUIRE(toks.at(3, 1) == Catch::Approx((26.0 + 27.0 + 30.0 + 31.0) / 4.0));
}
