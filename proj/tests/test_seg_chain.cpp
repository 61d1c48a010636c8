#include "cores/seg_chain.hpp"

#include "small_world.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <optional>
#include <vector>

using namespace cores;
using cores::testing::SmallWorld;
using Fixture = SmallWorld;

namespace {

SegChainConfig chain_cfg(int levels, bool use_refiner = true) {
    SegChainConfig c;
    c.levels = levels;
    c.use_refiner = use_refiner;
    return c;
}

} // namespace

TEST_CASE("seg chain config validation") {
    SegChainConfig c;
    c.levels = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.levels = 2;
    c.use_cos = false;
    c.use_refiner = true;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.use_refiner = false;
    CHECK_NOTHROW(c.validate());
    c.in_context_k = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("mismatched component dimensions are rejected at wiring time") {
    ParamStore store;
    Rng rng(4);
    Backbone bb(store, cores::testing::small_backbone_cfg(), rng);
    Refiner ref(store, cores::testing::small_refiner_cfg(), rng);
    MaskDecoder::Config bad = cores::testing::small_decoder_cfg();
    bad.prompt_dim = 6;
    bad.feat_channels = 10;
    MaskDecoder dec(store, bad, rng);
    CHECK_THROWS_AS(SegChain(bb, ref, dec), ConfigError);
}

TEST_CASE("decode is deterministic and produces image-resolution logits") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    Var feat = f.feat_rows(g);
    Var tok = g.constant(Tensor({1, 8}, {0.2, -0.1, 0.5, 0.3, -0.4, 0.0, 0.7, -0.2}));
    Var a = f.decoder.decode(g, bind, feat, std::nullopt, tok);
    Var b = f.decoder.decode(g, bind, feat, std::nullopt, tok);
    REQUIRE(g.val(a).rows() == 16);
    REQUIRE(g.val(a).cols() == 16);
    CHECK(g.val(a).all_finite());
    for (int i = 0; i < 256; ++i) CHECK(g.val(a).data[i] == g.val(b).data[i]);
}

TEST_CASE("decode rejects malformed inputs") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    Var feat = f.feat_rows(g);
    Var tok = g.constant(Tensor({1, 8}));
    CHECK_THROWS_AS(f.decoder.decode(g, bind, feat, std::nullopt, g.constant(Tensor({1, 5}))), std::invalid_argument);
    CHECK_THROWS_AS(f.decoder.decode(g, bind, g.constant(Tensor({9, 10})), std::nullopt, tok), std::invalid_argument);
    CHECK_THROWS_AS(f.decoder.decode(g, bind, feat, g.constant(Tensor({16, 6})), tok), std::invalid_argument);
}

TEST_CASE("the condition token steers the decoded mask") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    Var feat = f.feat_rows(g);
    Tensor ta({1, 8}), tb({1, 8});
    Rng data(9);
    data.fill_normal(ta, 0.0, 1.0);
    data.fill_normal(tb, 0.0, 1.0);
    Var ma = f.decoder.decode(g, bind, feat, std::nullopt, g.constant(ta));
    Var mb = f.decoder.decode(g, bind, feat, std::nullopt, g.constant(tb));
    Scalar diff = 0;
    for (int i = 0; i < 256; ++i) diff = std::max(diff, std::abs(g.val(ma).data[i] - g.val(mb).data[i]));
    CHECK(diff > 1e-8);
}

TEST_CASE("no-prompt embedding differs from an encoded zero-logit prompt") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    Var feat = f.feat_rows(g);
    Var tok = g.constant(Tensor({1, 8}, {0.3, 0.1, -0.2, 0.4, 0.0, -0.5, 0.2, 0.6}));
    Var zero_prompt = f.backbone.encode_mask_prompt(g, bind, g.constant(Tensor({16, 16})));
    Var with_none = f.decoder.decode(g, bind, feat, std::nullopt, tok);
    Var with_zero = f.decoder.decode(g, bind, feat, zero_prompt, tok);
    Scalar diff = 0;
    for (int i = 0; i < 256; ++i) diff = std::max(diff, std::abs(g.val(with_none).data[i] - g.val(with_zero).data[i]));
    CHECK(diff > 1e-8);
}

TEST_CASE("single-level chain decodes once with no prompt encoding") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 1), chain_cfg(1));
    CHECK(st.levels() == 1);
    CHECK_FALSE(st.degraded());
    CHECK(st.theta_calls() == 0);
    CHECK(st.refine_calls() == 0);
    CHECK_FALSE(st.prompt(0).has_value());
    const Tensor& m = g.val(st.final_mask().logits());
    CHECK(m.rows() == 16);
    CHECK(m.cols() == 16);
    CHECK(m.all_finite());
}

TEST_CASE("two-level chain makes exactly one prompt encoding and one refinement") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 2), chain_cfg(2));
    CHECK(st.levels() == 2);
    CHECK(st.theta_calls() == 1);
    CHECK(st.refine_calls() == 1);
    CHECK_FALSE(st.prompt(0).has_value());
    REQUIRE(st.prompt(1).has_value());
    CHECK(g.val(*st.prompt(1)).rows() == 16);
    CHECK(g.val(*st.prompt(1)).cols() == 8);

    Scalar diff = 0;
    const Tensor& m0 = g.val(st.mask_logits(0));
    const Tensor& m1 = g.val(st.mask_logits(1));
    for (int i = 0; i < 256; ++i) diff = std::max(diff, std::abs(m0.data[i] - m1.data[i]));
    CHECK(diff > 1e-8);
}

TEST_CASE("three-level chain encodes two prompts") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 3), chain_cfg(3));
    CHECK(st.levels() == 3);
    CHECK(st.theta_calls() == 2);
    CHECK(st.refine_calls() == 2);
}

TEST_CASE("refinement can be disabled independently of the chain") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 2), chain_cfg(2, false));
    CHECK(st.theta_calls() == 1);
    CHECK(st.refine_calls() == 0);
}

TEST_CASE("missing embeddings degrade to a single decode from the last available one") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 2), chain_cfg(3));
    CHECK(st.degraded());
    CHECK(st.levels() == 1);
    CHECK(st.theta_calls() == 0);
    CHECK(g.val(st.final_mask().logits()).all_finite());

    // the degraded decode uses embedding row 1, the last available
    Graph g2;
    ParamBinding bind2(g2, f.store, false);
    Tensor last({1, 12});
    for (int c = 0; c < 12; ++c) last.at(0, c) = f.embeddings.at(1, c);
    ChainState ref = f.chain.run_chain(g2, bind2, f.image, g2.constant(last), chain_cfg(1));
    const Tensor& a = g.val(st.final_mask().logits());
    const Tensor& b = g2.val(ref.final_mask().logits());
    for (int i = 0; i < 256; ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("surplus embeddings are a caller error") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    CHECK_THROWS_AS(f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 3), chain_cfg(2)), std::invalid_argument);
}

TEST_CASE("single token baseline equals a one-level chain exactly") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    Var emb = f.emb_rows(g, 1);
    Var base = f.chain.single_token_baseline(g, bind, f.image, emb);
    ChainState st = f.chain.run_chain(g, bind, f.image, emb, chain_cfg(1));
    // copy out: later chain runs grow the graph and may move node storage
    Tensor a = g.val(base);
    Tensor b = g.val(st.final_mask().logits());
    for (int i = 0; i < 256; ++i) CHECK(a.data[i] == b.data[i]);

    Var again = f.chain.single_token_baseline(g, bind, f.image, emb);
    for (int i = 0; i < 256; ++i) CHECK(g.val(again).data[i] == a.data[i]);
}

TEST_CASE("final mask gradient reaches the first-level embedding") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, true);
    Tensor emb({2, 12});
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 12; ++c) emb.at(r, c) = f.embeddings.at(r, c);
    Var ev = g.leaf(emb, true);
    ChainState st = f.chain.run_chain(g, bind, f.image, ev, chain_cfg(2));
    Var loss = g.sum_all(st.final_mask().logits());
    g.backward(loss);
    const Tensor& ge = g.grad(ev);
    Scalar row0 = 0, row1 = 0;
    for (int c = 0; c < 12; ++c) {
        row0 += ge.at(0, c) * ge.at(0, c);
        row1 += ge.at(1, c) * ge.at(1, c);
    }
    CHECK(std::sqrt(row0) > 1e-10);
    CHECK(std::sqrt(row1) > 1e-10);
}

TEST_CASE("reading an intermediate mask is recorded, reading the final one is not") {
    Fixture f;
    Graph g;
    ParamBinding bind(g, f.store, false);
    ChainState st = f.chain.run_chain(g, bind, f.image, f.emb_rows(g, 2), chain_cfg(2));
    CHECK_FALSE(st.intermediate_accessed());
    (void)st.final_mask();
    (void)st.mask_logits(1);
    CHECK_FALSE(st.intermediate_accessed());
    (void)st.mask_logits(0);
    CHECK(st.intermediate_accessed());
    CHECK_THROWS_AS(st.mask_logits(2), std::out_of_range);
}

TEST_CASE("binarize thresholds logits at zero") {
    Tensor logits({2, 2}, {-0.5, 0.0, 0.01, 3.0});
    std::vector<std::uint8_t> bits = binarize_logits(logits);
    REQUIRE(bits.size() == 4);
    CHECK(bits[0] == 0);
    CHECK(bits[1] == 0);
    CHECK(bits[2] == 1);
    CHECK(bits[3] == 1);
}
