#pragma once

// Decoder-only language model with a visual prefix: pre-LN transformer
// blocks, causal attention, frozen base weights, and low-rank adapters on the
// attention query/value projections as the only trainable part. Emits
// per-position vocabulary logits over the text span plus last-layer hidden
// states for the whole sequence.

#include "cores/params.hpp"
#include "cores/template_chain.hpp"

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace cores {

struct MllmConfig {
    int hidden_dim = 64;
    int layers = 2;
    int heads = 4;
    int vocab_size = 0;
    int max_seq_len = 128;
    int lora_rank = 8;
    Scalar lora_alpha = 16.0;
    Scalar lora_dropout = 0.05;

    void validate() const {
        if (vocab_size < 2) throw ConfigError("mllm: vocab_size must be set");
        if (hidden_dim % heads != 0) throw ConfigError("mllm: hidden_dim must be divisible by heads");
        if (lora_rank < 1) throw ConfigError("mllm: lora_rank must be >= 1");
        if (layers < 1 || max_seq_len < 2) throw ConfigError("mllm: layers/max_seq_len too small");
    }
    Scalar lora_scaling() const { return lora_alpha / static_cast<Scalar>(lora_rank); }
};

struct MllmOutput {
    Var logits;     // [text_len, vocab]
    Var hidden;     // [prefix_len + text_len, hidden_dim], post final norm
    int prefix_len = 0;
    int text_len = 0;
};

class ToyMllm {
  public:
    ToyMllm(ParamStore& store, const MllmConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        const int D = cfg_.hidden_dim, V = cfg_.vocab_size, R = cfg_.lora_rank;
        const Scalar ws = 1.0 / std::sqrt(static_cast<Scalar>(D));

        emb_ = add_normal(store, rng, "mllm.emb", {V, D}, 1.0, true);
        pos_ = add_normal(store, rng, "mllm.pos", {cfg_.max_seq_len, D}, 0.5, true);

        layers_.resize(static_cast<std::size_t>(cfg_.layers));
        for (int l = 0; l < cfg_.layers; ++l) {
            const std::string p = "mllm.l" + std::to_string(l) + ".";
            Layer& L = layers_[static_cast<std::size_t>(l)];
            L.ln1g = store.add(p + "ln1.g", Tensor::full({D}, 1.0), true);
            L.ln1b = store.add(p + "ln1.b", Tensor({D}), true);
            L.wq = add_normal(store, rng, p + "attn.wq", {D, D}, ws, true);
            L.wk = add_normal(store, rng, p + "attn.wk", {D, D}, ws, true);
            L.wv = add_normal(store, rng, p + "attn.wv", {D, D}, ws, true);
            L.wo = add_normal(store, rng, p + "attn.wo", {D, D}, ws, true);
            L.bq = store.add(p + "attn.bq", Tensor({D}), true);
            L.bk = store.add(p + "attn.bk", Tensor({D}), true);
            L.bv = store.add(p + "attn.bv", Tensor({D}), true);
            L.bo = store.add(p + "attn.bo", Tensor({D}), true);
            L.lora_aq = add_normal(store, rng, p + "lora.q.down", {D, R}, ws, false);
            L.lora_bq = store.add(p + "lora.q.up", Tensor({R, D}), false);
            L.lora_av = add_normal(store, rng, p + "lora.v.down", {D, R}, ws, false);
            L.lora_bv = store.add(p + "lora.v.up", Tensor({R, D}), false);
            L.ln2g = store.add(p + "ln2.g", Tensor::full({D}, 1.0), true);
            L.ln2b = store.add(p + "ln2.b", Tensor({D}), true);
            L.w1 = add_normal(store, rng, p + "mlp.w1", {D, 4 * D}, ws, true);
            L.b1 = store.add(p + "mlp.b1", Tensor({4 * D}), true);
            L.w2 = add_normal(store, rng, p + "mlp.w2", {4 * D, D}, 1.0 / std::sqrt(4.0 * D), true);
            L.b2 = store.add(p + "mlp.b2", Tensor({D}), true);
        }
        lnfg_ = store.add("mllm.lnf.g", Tensor::full({D}, 1.0), true);
        lnfb_ = store.add("mllm.lnf.b", Tensor({D}), true);
        headw_ = add_normal(store, rng, "mllm.head.w", {D, V}, ws, true);
        headb_ = store.add("mllm.head.b", Tensor({V}), true);
    }

    const MllmConfig& config() const { return cfg_; }

    // Teacher-forced forward over (visual prefix ++ text). Causal masking over
    // the whole sequence; logits cover the text span only. dropout_rng gates
    // adapter dropout and is only consulted when the binding is in train mode.
    MllmOutput encode(Graph& g, ParamBinding& bind, std::optional<Var> prefix, const TokenSequence& text,
                      Rng* dropout_rng = nullptr) const {
        const int D = cfg_.hidden_dim;
        const int P = prefix ? g.val(*prefix).rows() : 0;
        const int T = text.length();
        if (T < 1) throw ConfigError("mllm: empty text span");
        const int S = P + T;
        if (S > cfg_.max_seq_len)
            throw ConfigError("mllm: sequence length " + std::to_string(S) + " exceeds capacity " +
                              std::to_string(cfg_.max_seq_len));
        for (int t : text.ids)
            if (t < 0 || t >= cfg_.vocab_size) throw VocabError("mllm: token id out of range");
        if (prefix && g.val(*prefix).cols() != D) throw std::invalid_argument("mllm: prefix width must equal hidden_dim");

        Var x = g.gather_rows(bind[emb_], text.ids);
        if (prefix) x = g.concat_rows({*prefix, x});
        x = g.add(x, g.slice_rows(bind[pos_], 0, S));

        Tensor causal({S, S});
        for (int i = 0; i < S; ++i)
            for (int j = i + 1; j < S; ++j) causal.at(i, j) = -1e30;

        const bool drop_on = bind.train_mode() && dropout_rng != nullptr && cfg_.lora_dropout > 0.0;
        for (const Layer& L : layers_) {
            Var xn = g.layernorm(x, bind[L.ln1g], bind[L.ln1b]);
            Var q = g.add_rowvec(g.matmul(xn, bind[L.wq]), bind[L.bq]);
            q = g.add(q, lora_delta(g, bind, xn, L.lora_aq, L.lora_bq, drop_on, dropout_rng));
            Var k = g.add_rowvec(g.matmul(xn, bind[L.wk]), bind[L.bk]);
            Var v = g.add_rowvec(g.matmul(xn, bind[L.wv]), bind[L.bv]);
            v = g.add(v, lora_delta(g, bind, xn, L.lora_av, L.lora_bv, drop_on, dropout_rng));

            const int H = cfg_.heads, Dh = D / cfg_.heads;
            std::vector<Var> ctx;
            ctx.reserve(static_cast<std::size_t>(H));
            for (int h = 0; h < H; ++h) {
                Var qh = g.slice_cols(q, h * Dh, (h + 1) * Dh);
                Var kh = g.slice_cols(k, h * Dh, (h + 1) * Dh);
                Var vh = g.slice_cols(v, h * Dh, (h + 1) * Dh);
                Var scores = g.scale(g.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<Scalar>(Dh)));
                Var probs = g.softmax_rows(scores, &causal);
                ctx.push_back(g.matmul(probs, vh));
            }
            Var attn = g.add_rowvec(g.matmul(g.concat_cols(ctx), bind[L.wo]), bind[L.bo]);
            x = g.add(x, attn);

            Var xm = g.layernorm(x, bind[L.ln2g], bind[L.ln2b]);
            Var h1 = g.gelu(g.add_rowvec(g.matmul(xm, bind[L.w1]), bind[L.b1]));
            Var h2 = g.add_rowvec(g.matmul(h1, bind[L.w2]), bind[L.b2]);
            x = g.add(x, h2);
        }

        MllmOutput out;
        out.hidden = g.layernorm(x, bind[lnfg_], bind[lnfb_]);
        Var text_hidden = P > 0 ? g.slice_rows(out.hidden, P, S) : out.hidden;
        out.logits = g.add_rowvec(g.matmul(text_hidden, bind[headw_]), bind[headb_]);
        out.prefix_len = P;
        out.text_len = T;
        return out;
    }

    // Chain embeddings h^t gathered from the full-sequence hidden states at
    // the given absolute positions, in template order -> [levels, hidden_dim].
    static Var extract_chain_embeddings(Graph& g, Var hidden, const std::vector<int>& positions, int expected_levels) {
        if (static_cast<int>(positions.size()) < expected_levels)
            throw ChainDegradationError("chain produced " + std::to_string(positions.size()) + " special positions, expected " +
                                        std::to_string(expected_levels));
        const int S = g.val(hidden).rows();
        std::vector<Var> rows;
        rows.reserve(positions.size());
        for (int p : positions) {
            if (p < 0 || p >= S) throw std::out_of_range("extract_chain_embeddings: position " + std::to_string(p));
            rows.push_back(g.slice_rows(hidden, p, p + 1));
        }
        return g.concat_rows(rows);
    }

    // Greedy decoding: repeatedly re-encode prompt ++ emitted tokens and take
    // the argmax of the final position until the end marker or max_new.
    TokenSequence generate_answer(const ParamStore& store,
                                  const std::function<std::optional<Var>(Graph&, ParamBinding&)>& make_prefix,
                                  const TokenSequence& prompt, int max_new, int eos_id) const {
        TokenSequence out;
        TokenSequence seq = prompt;
        for (int step = 0; step < max_new; ++step) {
            Graph g;
            ParamBinding bind(g, store, false);
            MllmOutput enc = encode(g, bind, make_prefix(g, bind), seq, nullptr);
            const Tensor& logits = g.val(enc.logits);
            const int V = logits.cols();
            const int last = logits.rows() - 1;
            int best = 0;
            for (int v = 1; v < V; ++v)
                if (logits.at(last, v) > logits.at(last, best)) best = v;
            out.ids.push_back(best);
            seq.ids.push_back(best);
            if (best == eos_id) break;
        }
        return out;
    }

  private:
    struct Layer {
        ParamId ln1g, ln1b, wq, wk, wv, wo, bq, bk, bv, bo;
        ParamId lora_aq, lora_bq, lora_av, lora_bv;
        ParamId ln2g, ln2b, w1, b1, w2, b2;
    };

    static ParamId add_normal(ParamStore& store, Rng& rng, const std::string& name, std::vector<int> shape, Scalar stddev,
                              bool frozen) {
        Tensor t(std::move(shape));
        rng.fill_normal(t, 0.0, stddev);
        return store.add(name, std::move(t), frozen);
    }

    // Low-rank update scaled by alpha/rank; the up-projection starts at zero
    // so the adapter contributes nothing until trained. Dropout masks the
    // adapter input only, never the frozen path.
    Var lora_delta(Graph& g, ParamBinding& bind, Var xn, ParamId down, ParamId up, bool drop_on, Rng* rng) const {
        Var in = xn;
        if (drop_on) {
            const Tensor& xv = g.val(xn);
            Tensor mask(xv.shape);
            const Scalar keep = 1.0 - cfg_.lora_dropout;
            for (auto& m : mask.data) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
            in = g.mul(xn, g.constant(std::move(mask)));
        }
        return g.scale(g.matmul(g.matmul(in, bind[down]), bind[up]), cfg_.lora_scaling());
    }

    MllmConfig cfg_;
    ParamId emb_, pos_, lnfg_, lnfb_, headw_, headb_;
    std::vector<Layer> layers_;
};

} // namespace cores
