#pragma once

// In-context guidance: a library of pure-text question/answer exemplars and
// the prompt assembler that splices sampled exemplars between the system
// prompt and the user query. Examples carry no special tokens; they steer the
// answer format only.

#include "cores/errors.hpp"
#include "cores/io.hpp"
#include "cores/template_chain.hpp"

#include <json.hpp>

#include <set>
#include <string>
#include <vector>

namespace cores {

struct ContextExample {
    std::string question;
    std::string answer;

    bool operator==(const ContextExample& o) const { return question == o.question && answer == o.answer; }
    bool operator<(const ContextExample& o) const {
        return question != o.question ? question < o.question : answer < o.answer;
    }
};

struct ContextLibrary {
    std::vector<ContextExample> examples;
    std::string source;
    int duplicates_dropped = 0;

    int size() const { return static_cast<int>(examples.size()); }
};

// Parses a JSONL library: one {"question": ..., "answer": ...} object per
// line. Duplicate (question, answer) rows are dropped and counted.
inline ContextLibrary parse_library(const std::string& text, const std::string& source_name) {
    ContextLibrary lib;
    lib.source = source_name;
    std::set<ContextExample> seen;
    int line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        ++line_no;
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            if (end == text.size()) break;
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("question") || !j.contains("answer"))
            throw ParseError(source_name + ":" + std::to_string(line_no) + ": expected {\"question\", \"answer\"}");
        ContextExample ex{j.at("question").get<std::string>(), j.at("answer").get<std::string>()};
        if (ex.question.empty() || ex.answer.empty())
            throw ParseError(source_name + ":" + std::to_string(line_no) + ": question/answer must be nonempty");
        if (seen.insert(ex).second)
            lib.examples.push_back(std::move(ex));
        else
            ++lib.duplicates_dropped;
        if (end == text.size()) break;
    }
    return lib;
}

inline ContextLibrary load_library(const std::string& path) {
    return parse_library(read_text_file(path), path);
}

inline std::string library_to_jsonl(const ContextLibrary& lib) {
    std::string out;
    for (const ContextExample& ex : lib.examples) {
        nlohmann::json j{{"question", ex.question}, {"answer", ex.answer}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

// Every (scene, attribute) pairing phrased as a question plus the answer in
// the two-level reasoning format, without special tokens.
inline ContextLibrary default_library(int scenes = 6, int attrs = 8) {
    ContextLibrary lib;
    lib.source = "<builtin>";
    for (int s = 0; s < scenes; ++s)
        for (int a = 0; a < attrs; ++a) {
            const std::string sc = "scene" + std::to_string(s);
            const std::string at = "attr" + std::to_string(a);
            lib.examples.push_back({sc + " " + at, "it appears on " + sc + " . it is " + at + " ."});
        }
    return lib;
}

// k distinct examples, uniform without replacement, fully determined by seed.
inline std::vector<ContextExample> sample_examples(const ContextLibrary& lib, int k, std::uint64_t seed) {
    if (k < 0 || k > lib.size())
        throw ConfigError("sample_examples: k=" + std::to_string(k) + " outside [0, " + std::to_string(lib.size()) + "]");
    std::vector<int> idx(static_cast<std::size_t>(lib.size()));
    for (int i = 0; i < lib.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    std::vector<ContextExample> out;
    out.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const int j = i + rng.uniform_int(lib.size() - i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        out.push_back(lib.examples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
    }
    return out;
}

// system ++ sep ++ (example ++ sep)* ++ query. Exemplar text must tokenize in
// the vocabulary and must not smuggle special tokens into the prompt.
inline TokenSequence assemble_prompt(const TokenSequence& system, const std::vector<ContextExample>& examples,
                                     const TokenSequence& query, const Vocabulary& vocab) {
    vocab.validate(system);
    vocab.validate(query);
    TokenSequence out;
    out.ids = system.ids;
    out.ids.push_back(vocab.sep());
    for (const ContextExample& ex : examples) {
        TokenSequence q = vocab.tokenize(ex.question);
        TokenSequence a = vocab.tokenize(ex.answer);
        for (int t : q.ids)
            if (vocab.is_special(t)) throw VocabError("context example question contains special token");
        for (int t : a.ids)
            if (vocab.is_special(t)) throw VocabError("context example answer contains special token");
        out.ids.insert(out.ids.end(), q.ids.begin(), q.ids.end());
        out.ids.insert(out.ids.end(), a.ids.begin(), a.ids.end());
        out.ids.push_back(vocab.sep());
    }
    out.ids.insert(out.ids.end(), query.ids.begin(), query.ids.end());
    return out;
}

} // namespace cores
