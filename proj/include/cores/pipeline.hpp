#pragma once

// Full-model assembly: backbone features enter the language model as
// projected prefix tokens, the prompt is built from a system preamble plus
// sampled in-context exemplars plus the two-word query, and the hidden states
// at the template's special-token slots drive the segmentation chain. The
// component flags choose how deep each of the two chains runs: without the
// reasoning chain the answer template collapses to its final level, and
// without the segmenting chain only the last slot embedding is decoded.

#include "cores/backbone.hpp"
#include "cores/incontext.hpp"
#include "cores/losses.hpp"
#include "cores/refiner.hpp"
#include "cores/seg_chain.hpp"
#include "cores/synth_data.hpp"
#include "cores/template_chain.hpp"
#include "cores/toy_mllm.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cores {

// The fixed instruction prefix every prompt starts from.
inline TokenSequence system_prompt_tokens(const Vocabulary& vocab) { return vocab.tokenize("<bos> find the"); }

struct PipelineConfig {
    MllmConfig mllm;
    BackboneConfig backbone;
    RefinerConfig refiner;
    MaskDecoder::Config decoder;
    SegChainConfig chain;
    LossWeights weights;
    C1Supervision c1 = C1Supervision::off;
    Scalar c1_weight = 0.1;
    int prefix_grid = 4;  // backbone grid pooled to prefix_grid^2 prefix tokens

    void validate() const {
        backbone.validate();
        refiner.validate();
        decoder.validate();
        chain.validate();
        weights.validate();
        if (mllm.hidden_dim != refiner.hidden_dim)
            throw ConfigError("pipeline: refiner hidden_dim must equal mllm hidden_dim");
        if (prefix_grid < 1 || backbone.grid % prefix_grid != 0)
            throw ConfigError("pipeline: prefix_grid must divide the backbone grid");
        if (c1_weight < 0.0) throw ConfigError("pipeline: c1_weight must be nonnegative");
        if (c1 != C1Supervision::off && (!chain.use_cos || chain.levels < 2))
            throw ConfigError("pipeline: first-level supervision needs a segmenting chain of at least 2 levels");
    }
};

struct TrainForward {
    Var cor;        // scalar text loss over the answer template
    ChainState state;
    CosParts parts;
    Var total;      // weighted dual-chain loss
    Var objective;  // total plus the optional first-level auxiliary term
    LossBreakdown breakdown;
};

struct InferenceResult {
    TokenSequence answer;
    Tensor final_logits;               // [S, S]
    std::vector<Tensor> level_logits;  // populated when keep_levels is set
    bool degraded = false;
};

class CoresModel {
  public:
    CoresModel(ParamStore& store, const PipelineConfig& cfg, std::uint64_t seed)
        : cfg_(finalized(cfg)),
          vocab_(Vocabulary::standard()),
          rng_(seed),
          mllm_(store, cfg_.mllm, rng_),
          backbone_(store, cfg_.backbone, rng_),
          refiner_(store, cfg_.refiner, rng_),
          decoder_(store, cfg_.decoder, rng_),
          chain_(backbone_, refiner_, decoder_) {
        const int C = cfg_.backbone.feat_channels;
        const int D = cfg_.mllm.hidden_dim;
        Tensor w({C, D});
        rng_.fill_normal(w, 0.0, 1.0 / std::sqrt(static_cast<Scalar>(C)));
        visw_ = store.add("visproj.w", std::move(w), false);
        visb_ = store.add("visproj.b", Tensor({D}), false);
        system_ = system_prompt_tokens(vocab_);
    }

    const PipelineConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    const SegChain& seg_chain() const { return chain_; }
    const ToyMllm& mllm() const { return mllm_; }
    const Backbone& backbone() const { return backbone_; }
    const TokenSequence& system_prompt() const { return system_; }

    int template_levels() const { return cfg_.chain.use_cor ? cfg_.chain.levels : 1; }
    int seg_levels() const { return cfg_.chain.use_cos ? cfg_.chain.levels : 1; }

    Var visual_prefix(Graph& g, ParamBinding& bind, const Tensor& image) const {
        const Tensor feat = backbone_.extract_features(bind.store(), image);
        const Tensor tokens = Backbone::pool_to_tokens(feat, cfg_.prefix_grid);
        return g.add_rowvec(g.matmul(g.constant(tokens), bind[visw_]), bind[visb_]);
    }

    TokenSequence build_prompt(const std::string& scene_word, const std::string& attr_word,
                               const std::vector<ContextExample>& examples) const {
        const TokenSequence query = vocab_.tokenize(scene_word + " " + attr_word);
        return assemble_prompt(system_, examples, query, vocab_);
    }

    TrainForward train_forward(Graph& g, ParamBinding& bind, const LoadedSample& sample,
                               const std::vector<ContextExample>& examples, Rng* dropout_rng = nullptr) const {
        const ChainTemplate tmpl = build_template(template_levels(), vocab_);
        const TokenSequence prompt = build_prompt(sample.scene_word, sample.attr_word, examples);

        TokenSequence input = prompt;
        input.ids.insert(input.ids.end(), tmpl.ids.ids.begin(), tmpl.ids.ids.end());

        Var prefix = visual_prefix(g, bind, sample.image);
        const MllmOutput out = mllm_.encode(g, bind, prefix, input, dropout_rng);

        const int P = prompt.length();
        const int T = tmpl.ids.length();
        // position P-1 predicts the first template token; teacher forcing
        Var answer_logits = g.slice_rows(out.logits, P - 1, P + T - 1);
        Var cor = cor_loss(g, answer_logits, tmpl.ids, std::vector<bool>(static_cast<std::size_t>(T), false));

        std::vector<int> positions;
        positions.reserve(tmpl.slot_positions.size());
        for (int s : tmpl.slot_positions) positions.push_back(out.prefix_len + P + s);
        Var emb = ToyMllm::extract_chain_embeddings(g, out.hidden, positions, template_levels());

        SegChainConfig seg = cfg_.chain;
        seg.levels = seg_levels();
        ChainState state = chain_.run_chain(g, bind, sample.image, chain_rows(g, emb), seg);

        TrainForward f{Var{}, std::move(state), CosParts{}, Var{}, Var{}, LossBreakdown{}};
        f.cor = cor;
        f.parts = cos_loss(g, f.state.final_mask(), sample.gt_mask, cfg_.weights);
        f.total = total_loss(g, cor, f.parts.cos, cfg_.weights);
        f.objective = cfg_.c1 == C1Supervision::off ? f.total : g.add(f.total, first_level_term(g, f.state, sample));
        f.breakdown = make_breakdown(g, cor, f.parts, f.total);
        return f;
    }

    // Greedy generation, then a teacher-forced re-encode of the emitted
    // answer to read the slot embeddings (causal masking makes the re-encoded
    // hidden states identical to the generation-time ones).
    InferenceResult infer(const ParamStore& store, const LoadedSample& sample, const ContextLibrary& library,
                          std::uint64_t seed, bool keep_levels = false, std::optional<int> k_override = {}) const {
        const int k = k_override.value_or(cfg_.chain.in_context_k);
        const std::vector<ContextExample> examples = sample_examples(library, k, seed);
        const TokenSequence prompt = build_prompt(sample.scene_word, sample.attr_word, examples);
        const int max_new = build_template(template_levels(), vocab_).ids.length() + 4;

        const auto make_prefix = [&](Graph& g, ParamBinding& b) {
            return std::optional<Var>(visual_prefix(g, b, sample.image));
        };
        const TokenSequence answer = mllm_.generate_answer(store, make_prefix, prompt, max_new, vocab_.eos());

        TokenSequence full = prompt;
        full.ids.insert(full.ids.end(), answer.ids.begin(), answer.ids.end());

        Graph g;
        ParamBinding bind(g, store, false);
        Var prefix = visual_prefix(g, bind, sample.image);
        const MllmOutput out = mllm_.encode(g, bind, prefix, full, nullptr);

        std::vector<int> slots;
        for (int i = 0; i < answer.length(); ++i)
            if (vocab_.is_special(answer.ids[static_cast<std::size_t>(i)])) slots.push_back(i);
        const int levels = seg_levels();
        bool no_slots = false;
        std::vector<int> positions;
        if (slots.empty()) {
            // no special token emitted: decode from the last hidden state
            positions.push_back(out.prefix_len + full.length() - 1);
            no_slots = true;
        } else {
            if (static_cast<int>(slots.size()) > levels)
                slots.erase(slots.begin(), slots.end() - levels);  // keep the tail; the last slot is the mask token
            for (int s : slots) positions.push_back(out.prefix_len + prompt.length() + s);
        }
        Var emb = ToyMllm::extract_chain_embeddings(g, out.hidden, positions, static_cast<int>(positions.size()));

        SegChainConfig seg = cfg_.chain;
        seg.levels = levels;
        const ChainState state = chain_.run_chain(g, bind, sample.image, emb, seg);

        InferenceResult r;
        r.answer = answer;
        r.degraded = state.degraded() || no_slots;
        r.final_logits = g.val(state.final_mask().logits());
        if (keep_levels)
            for (int t = 0; t < state.levels(); ++t) r.level_logits.push_back(g.val(state.mask_logits(t)));
        return r;
    }

    // Auxiliary target for the optional first-level supervision: the final
    // object mask itself (low-weight "gt" mode), or a pseudo target that
    // dilates the object mask to the image quadrant holding it (scenes are
    // quadrant-anchored by generation).
    Tensor first_level_target(const LoadedSample& sample) const {
        if (cfg_.c1 == C1Supervision::gt) return sample.gt_mask;
        const int S = sample.gt_mask.dim(0);
        int cx = 0, cy = 0, n = 0;
        for (int y = 0; y < S; ++y)
            for (int x = 0; x < S; ++x)
                if (sample.gt_mask.data[static_cast<std::size_t>(y) * S + x] == 1.0) {
                    cx += x;
                    cy += y;
                    ++n;
                }
        if (n == 0) throw std::invalid_argument("first_level_target: empty object mask");
        const int qx = (cx / n) / (S / 2), qy = (cy / n) / (S / 2);
        Tensor t({S, S});
        for (int y = qy * (S / 2); y < (qy + 1) * (S / 2); ++y)
            for (int x = qx * (S / 2); x < (qx + 1) * (S / 2); ++x) t.data[static_cast<std::size_t>(y) * S + x] = 1.0;
        return t;
    }

  private:
    static PipelineConfig finalized(PipelineConfig c) {
        c.mllm.vocab_size = Vocabulary::standard().size();
        c.validate();
        c.mllm.validate();
        return c;
    }

    Var chain_rows(Graph& g, Var emb) const {
        const int tl = template_levels();
        if (cfg_.chain.use_cos) {
            if (cfg_.chain.use_cor) return emb;
            return g.gather_rows(emb, std::vector<int>(static_cast<std::size_t>(cfg_.chain.levels), 0));
        }
        return tl > 1 ? g.slice_rows(emb, tl - 1, tl) : emb;
    }

    Var first_level_term(Graph& g, const ChainState& state, const LoadedSample& sample) const {
        const Tensor target = first_level_target(sample);
        Var m0 = state.mask_logits(0);
        Var term = g.add(g.scale(dice_loss(g, m0, target), cfg_.weights.lambda_d),
                         g.scale(mask_ce_loss(g, m0, target), cfg_.weights.lambda_c));
        return g.scale(term, cfg_.c1_weight);
    }

    PipelineConfig cfg_;
    Vocabulary vocab_;
    Rng rng_;
    ToyMllm mllm_;
    Backbone backbone_;
    Refiner refiner_;
    MaskDecoder decoder_;
    SegChain chain_;
    ParamId visw_, visb_;
    TokenSequence system_;
};

} // namespace cores
