#include "cores/pipeline.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "small_pipeline.hpp"

using namespace cores;
using namespace cores::testing;

namespace {

struct BuiltModel {
    ParamStore store;
    CoresModel model;
    ContextLibrary library;

    explicit BuiltModel(const PipelineConfig& cfg, std::uint64_t seed = 11)
        : model(store, cfg, seed), library(default_library(6, 8)) {}
};

LossBreakdown forward_once(BuiltModel& w, const LoadedSample& s) {
    Graph g;
    ParamBinding bind(g, w.store, false);
    auto examples = sample_examples(w.library, w.model.config().chain.in_context_k, 99);
    return w.model.train_forward(g, bind, s, examples).breakdown;
}

bool all_finite(const Tensor& t) {
    for (Scalar v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace

TEST_CASE("pipeline config validation rejects inconsistent dimensions") {
    PipelineConfig bad = small_pipeline_cfg();
    bad.refiner.hidden_dim = 10;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = small_pipeline_cfg();
    bad.prefix_grid = 3;  // does not divide grid 4
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = small_pipeline_cfg();
    bad.c1 = C1Supervision::pseudo;
    bad.chain.levels = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = small_pipeline_cfg();
    bad.c1 = C1Supervision::gt;
    bad.chain.use_cos = false;
    bad.chain.use_refiner = false;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = small_pipeline_cfg();
    bad.c1_weight = -0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK_NOTHROW(small_pipeline_cfg().validate());
}

TEST_CASE("model construction registers the visual projection as trainable") {
    BuiltModel w(small_pipeline_cfg());
    const ParamId wid = w.store.find("visproj.w");
    const ParamId bid = w.store.find("visproj.b");
    CHECK_FALSE(w.store.frozen(wid));
    CHECK_FALSE(w.store.frozen(bid));
    CHECK(w.store.value(wid).dim(0) == 10);  // feat channels
    CHECK(w.store.value(wid).dim(1) == 12);  // hidden dim
    CHECK(w.model.system_prompt().length() == 3);
}

TEST_CASE("visual prefix pools the feature grid to prefix_grid^2 tokens") {
    BuiltModel w(small_pipeline_cfg());
    LoadedSample s = make_hand_sample(0);
    Graph g;
    ParamBinding bind(g, w.store, false);
    Var prefix = w.model.visual_prefix(g, bind, s.image);
    Tensor p = g.val(prefix);
    REQUIRE(p.ndim() == 2);
    CHECK(p.dim(0) == 4);  // prefix_grid 2
    CHECK(p.dim(1) == 12);
    CHECK(all_finite(p));
}

TEST_CASE("train forward produces a consistent dual-chain breakdown") {
    BuiltModel w(small_pipeline_cfg());
    LoadedSample s = make_hand_sample(1);
    Graph g;
    ParamBinding bind(g, w.store, false);
    auto examples = sample_examples(w.library, 1, 7);
    TrainForward f = w.model.train_forward(g, bind, s, examples);

    CHECK(f.breakdown.consistent(w.model.config().weights));
    CHECK(std::isfinite(f.breakdown.total));
    CHECK(f.breakdown.cor > 0.0);
    CHECK(f.state.levels() == 2);
    CHECK(f.state.theta_calls() == 1);
    CHECK(f.state.refine_calls() == 1);
    CHECK_FALSE(f.state.intermediate_accessed());
    // with first-level supervision off the objective is the total itself
    CHECK(f.objective.id == f.total.id);
}

TEST_CASE("component flags control template and segmenting depth") {
    SECTION("both chains on") {
        PipelineConfig cfg = small_pipeline_cfg();
        BuiltModel w(cfg);
        CHECK(w.model.template_levels() == 2);
        CHECK(w.model.seg_levels() == 2);
    }
    SECTION("segmenting chain without the text chain replicates the mask token") {
        PipelineConfig cfg = small_pipeline_cfg();
        cfg.chain.use_cor = false;
        BuiltModel w(cfg);
        CHECK(w.model.template_levels() == 1);
        CHECK(w.model.seg_levels() == 2);

        LoadedSample s = make_hand_sample(2);
        Graph g;
        ParamBinding bind(g, w.store, false);
        auto examples = sample_examples(w.library, 1, 7);
        TrainForward f = w.model.train_forward(g, bind, s, examples);
        REQUIRE(f.state.levels() == 2);
        Tensor h0 = g.val(f.state.hidden(0));
        Tensor h1 = g.val(f.state.hidden(1));
        REQUIRE(h0.data.size() == h1.data.size());
        for (std::size_t i = 0; i < h0.data.size(); ++i) CHECK(h0.data[i] == h1.data[i]);
    }
    SECTION("text chain without the segmenting chain decodes one level") {
        PipelineConfig cfg = small_pipeline_cfg();
        cfg.chain.use_cos = false;
        cfg.chain.use_refiner = false;
        BuiltModel w(cfg);
        CHECK(w.model.template_levels() == 2);
        CHECK(w.model.seg_levels() == 1);

        LoadedSample s = make_hand_sample(3);
        Graph g;
        ParamBinding bind(g, w.store, false);
        auto examples = sample_examples(w.library, 1, 7);
        TrainForward f = w.model.train_forward(g, bind, s, examples);
        CHECK(f.state.levels() == 1);
        CHECK(f.state.theta_calls() == 0);
        CHECK(f.state.refine_calls() == 0);
    }
    SECTION("no chains gives the single-level baseline") {
        PipelineConfig cfg = small_pipeline_cfg();
        cfg.chain.use_cor = false;
        cfg.chain.use_cos = false;
        cfg.chain.use_refiner = false;
        BuiltModel w(cfg);
        CHECK(w.model.template_levels() == 1);
        CHECK(w.model.seg_levels() == 1);

        LoadedSample s = make_hand_sample(4);
        LossBreakdown b = forward_once(w, s);
        CHECK(b.consistent(cfg.weights));
    }
}

TEST_CASE("first-level target selection") {
    PipelineConfig cfg = small_pipeline_cfg();
    cfg.c1 = C1Supervision::pseudo;
    BuiltModel w(cfg);

    SECTION("pseudo mode marks the quadrant holding the object centroid") {
        LoadedSample s = make_hand_sample(3);  // qx=1, qy=1
        Tensor t = w.model.first_level_target(s);
        REQUIRE(t.dim(0) == 16);
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                CHECK(t.at(y, x) == ((x >= 8 && y >= 8) ? 1.0 : 0.0));
    }
    SECTION("pseudo mode rejects an empty object mask") {
        LoadedSample s = make_hand_sample(0);
        s.gt_mask = Tensor({16, 16});
        CHECK_THROWS_AS(w.model.first_level_target(s), std::invalid_argument);
    }
    SECTION("gt mode supervises the first level with the final object mask") {
        PipelineConfig gt_cfg = small_pipeline_cfg();
        gt_cfg.c1 = C1Supervision::gt;
        BuiltModel wg(gt_cfg);
        LoadedSample s = make_hand_sample(1);
        Tensor t = wg.model.first_level_target(s);
        REQUIRE(t.data.size() == s.gt_mask.data.size());
        for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(t.data[i] == s.gt_mask.data[i]);
    }
}

TEST_CASE("first-level supervision adds exactly the weighted auxiliary term") {
    PipelineConfig cfg = small_pipeline_cfg();
    cfg.c1 = C1Supervision::pseudo;
    cfg.c1_weight = 0.25;
    BuiltModel w(cfg);
    LoadedSample s = make_hand_sample(2);

    Graph g;
    ParamBinding bind(g, w.store, false);
    auto examples = sample_examples(w.library, 1, 7);
    TrainForward f = w.model.train_forward(g, bind, s, examples);
    CHECK(f.objective.id != f.total.id);

    const Tensor target = w.model.first_level_target(s);
    Var m0 = f.state.mask_logits(0);
    const Scalar aux = cfg.weights.lambda_d * g.scalar(dice_loss(g, m0, target)) +
                       cfg.weights.lambda_c * g.scalar(mask_ce_loss(g, m0, target));
    CHECK(g.scalar(f.objective) == Catch::Approx(g.scalar(f.total) + 0.25 * aux).margin(1e-12));
}

TEST_CASE("gradients reach trainable pipeline entry points but never frozen ones") {
    BuiltModel w(small_pipeline_cfg());
    LoadedSample s = make_hand_sample(5);
    Graph g;
    ParamBinding bind(g, w.store, true);
    auto examples = sample_examples(w.library, 1, 7);
    TrainForward f = w.model.train_forward(g, bind, s, examples);
    g.backward(f.objective);

    CHECK(bind.grad_norm(w.store.find("visproj.w")) > 0.0);
    CHECK(bind.grad_norm(w.store.find("refiner.beta.w1")) > 0.0);
    CHECK(bind.grad_norm(w.store.find("decoder.hyper.w1")) > 0.0);
    CHECK(bind.grad_norm(w.store.find("mllm.l0.lora.q.up")) > 0.0);
    CHECK(bind.grad_norm(w.store.find("backbone.stem.w")) == 0.0);
    CHECK(bind.grad_norm(w.store.find("mllm.emb")) == 0.0);
}

TEST_CASE("inference is deterministic and reports mask logits at image size") {
    BuiltModel w(small_pipeline_cfg());
    LoadedSample s = make_hand_sample(6);

    InferenceResult a = w.model.infer(w.store, s, w.library, 31, true);
    InferenceResult b = w.model.infer(w.store, s, w.library, 31, true);

    REQUIRE(a.final_logits.ndim() == 2);
    CHECK(a.final_logits.dim(0) == 16);
    CHECK(a.final_logits.dim(1) == 16);
    CHECK(all_finite(a.final_logits));
    CHECK(a.answer.length() > 0);
    CHECK(a.answer.length() == b.answer.length());
    REQUIRE(a.final_logits.data.size() == b.final_logits.data.size());
    for (std::size_t i = 0; i < a.final_logits.data.size(); ++i)
        CHECK(a.final_logits.data[i] == b.final_logits.data[i]);
    CHECK(a.level_logits.size() == static_cast<std::size_t>(2));
    CHECK(a.level_logits.back().data == a.final_logits.data);

    InferenceResult c = w.model.infer(w.store, s, w.library, 32, false);
    CHECK(c.level_logits.empty());
}
