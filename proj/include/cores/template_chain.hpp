#pragma once

// Chain-of-reasoning text side: the closed toy vocabulary, the leveled answer
// templates whose special-token slots anchor mask decoding, and the token
// cross-entropy on the rendered chain.

#include "cores/errors.hpp"
#include "cores/graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

namespace cores {

struct TokenSequence {
    std::vector<int> ids;

    TokenSequence() = default;
    explicit TokenSequence(std::vector<int> v) : ids(std::move(v)) {}
    int length() const { return static_cast<int>(ids.size()); }
    bool empty() const { return ids.empty(); }
};

class Vocabulary {
  public:
    Vocabulary(std::vector<std::string> tokens, int loc, int pos, int seg, int pad)
        : tokens_(std::move(tokens)), loc_(loc), pos_(pos), seg_(seg), pad_(pad) {
        const int n = static_cast<int>(tokens_.size());
        for (int i = 0; i < n; ++i) {
            if (!index_.emplace(tokens_[static_cast<std::size_t>(i)], i).second)
                throw VocabError("duplicate token '" + tokens_[static_cast<std::size_t>(i)] + "'");
        }
        for (int id : {loc_, pos_, seg_, pad_})
            if (id < 0 || id >= n) throw VocabError("special token id out of range");
        if (loc_ == pos_ || loc_ == seg_ || pos_ == seg_) throw VocabError("special token ids must be distinct");
        bos_ = require("<bos>");
        eos_ = require("<eos>");
        sep_ = require("<sep>");
    }

    // The closed vocabulary used by the synthetic task. Scene and attribute
    // code words name grid regions and object kinds.
    static Vocabulary standard() {
        std::vector<std::string> t = {"<pad>", "<bos>", "<eos>", "<sep>", "[LOC]", "[POS]", "[SEG]",
                                      "it",    "appears", "on",  "is",    "located", "at",  ".",
                                      "find",  "the"};
        for (int s = 0; s < 6; ++s) t.push_back("scene" + std::to_string(s));
        for (int a = 0; a < 8; ++a) t.push_back("attr" + std::to_string(a));
        return Vocabulary(std::move(t), 4, 5, 6, 0);
    }

    static Vocabulary from_json_text(const std::string& text) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("vocabulary json: ") + e.what());
        }
        if (!j.contains("tokens") || !j.contains("special")) throw ParseError("vocabulary json: missing tokens/special");
        std::vector<std::string> toks = j.at("tokens").get<std::vector<std::string>>();
        const auto& sp = j.at("special");
        return Vocabulary(std::move(toks), sp.at("loc").get<int>(), sp.at("pos").get<int>(), sp.at("seg").get<int>(),
                          sp.at("pad").get<int>());
    }

    std::string to_json_text() const {
        nlohmann::json j;
        j["tokens"] = tokens_;
        j["special"] = {{"loc", loc_}, {"pos", pos_}, {"seg", seg_}, {"pad", pad_}};
        return j.dump(2) + "\n";
    }

    int size() const { return static_cast<int>(tokens_.size()); }
    int loc() const { return loc_; }
    int pos() const { return pos_; }
    int seg() const { return seg_; }
    int pad() const { return pad_; }
    int bos() const { return bos_; }
    int eos() const { return eos_; }
    int sep() const { return sep_; }

    bool is_special(int id) const { return id == loc_ || id == pos_ || id == seg_; }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) throw VocabError("unknown token '" + token + "'");
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw VocabError("token id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    // Whitespace tokenizer over the closed vocabulary.
    TokenSequence tokenize(const std::string& text) const {
        TokenSequence seq;
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            std::size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j > i) seq.ids.push_back(id(text.substr(i, j - i)));
            i = j;
        }
        return seq;
    }

    std::string detokenize(const TokenSequence& seq) const {
        std::string out;
        for (std::size_t i = 0; i < seq.ids.size(); ++i) {
            if (i) out += ' ';
            out += token(seq.ids[i]);
        }
        return out;
    }

    void validate(const TokenSequence& seq) const {
        for (int t : seq.ids)
            if (t < 0 || t >= size()) throw VocabError("token id " + std::to_string(t) + " out of range");
    }

  private:
    int require(const std::string& tok) const {
        auto it = index_.find(tok);
        if (it == index_.end()) throw VocabError("vocabulary must define " + tok);
        return it->second;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int loc_, pos_, seg_, pad_;
    int bos_ = -1, eos_ = -1, sep_ = -1;
};

// A rendered answer template. slot_positions index the special tokens within
// ids, ordered [LOC] (, [POS]) , [SEG]; [SEG] is always last.
struct ChainTemplate {
    int levels = 0;
    TokenSequence ids;
    std::vector<int> slot_positions;
};

inline ChainTemplate build_template(int levels, const Vocabulary& vocab) {
    std::string text;
    switch (levels) {
        case 1: text = "it is [SEG] . <eos>"; break;
        case 2: text = "it appears on [LOC] . it is [SEG] . <eos>"; break;
        case 3: text = "it appears on [LOC] . it is located at [POS] . it is [SEG] . <eos>"; break;
        default: throw ConfigError("template levels must be 1, 2, or 3 (got " + std::to_string(levels) + ")");
    }
    ChainTemplate t;
    t.levels = levels;
    t.ids = vocab.tokenize(text);
    for (int i = 0; i < t.ids.length(); ++i)
        if (vocab.is_special(t.ids.ids[static_cast<std::size_t>(i)])) t.slot_positions.push_back(i);
    return t;
}

// Indices of [LOC]/[POS]/[SEG] occurrences in order; empty when none present.
inline std::vector<int> locate_special_tokens(const TokenSequence& seq, const Vocabulary& vocab) {
    if (seq.empty()) throw ConfigError("locate_special_tokens: empty sequence");
    std::vector<int> out;
    for (int i = 0; i < seq.length(); ++i)
        if (vocab.is_special(seq.ids[static_cast<std::size_t>(i)])) out.push_back(i);
    return out;
}

// Mean token cross-entropy over non-pad positions of the rendered chain.
// logits: [T, V] on the graph; target/pad_mask length T.
inline Var cor_loss(Graph& g, Var logits, const TokenSequence& target, const std::vector<bool>& pad_mask) {
    const int T = g.val(logits).rows();
    if (target.length() != T || static_cast<int>(pad_mask.size()) != T)
        throw std::invalid_argument("cor_loss: logits length must equal target length");
    std::vector<Scalar> weights(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) weights[static_cast<std::size_t>(t)] = pad_mask[static_cast<std::size_t>(t)] ? 0.0 : 1.0;
    return g.softmax_ce(logits, target.ids, weights);
}

} // namespace cores
