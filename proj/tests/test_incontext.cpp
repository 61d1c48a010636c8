#include "cores/incontext.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

using namespace cores;

namespace {

std::string sample_jsonl(int n) {
    std::string out;
    for (int i = 0; i < n; ++i)
        out += "{\"question\": \"scene0 attr" + std::to_string(i % 8) + "\", \"answer\": \"it is attr" + std::to_string(i) +
               " .\"}\n";
    return out;
}

} // namespace

TEST_CASE("library parsing accepts valid jsonl and drops duplicates with a count", "[incontext]") {
    ContextLibrary lib = parse_library(sample_jsonl(12), "test");
    REQUIRE(lib.size() == 12);
    REQUIRE(lib.duplicates_dropped == 0);

    std::string dup = sample_jsonl(12);
    dup += "{\"question\": \"scene0 attr0\", \"answer\": \"it is attr0 .\"}\n";
    ContextLibrary lib2 = parse_library(dup, "test");
    REQUIRE(lib2.size() == 12);
    REQUIRE(lib2.duplicates_dropped == 1);

    ContextLibrary empty = parse_library("", "test");
    REQUIRE(empty.size() == 0);
}

TEST_CASE("library parsing reports the offending line", "[incontext]") {
    const std::string bad = sample_jsonl(2) + "not json\n";
    try {
        parse_library(bad, "lib.jsonl");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        REQUIRE(std::string(e.what()).find("lib.jsonl:3") != std::string::npos);
    }
    REQUIRE_THROWS_AS(parse_library("{\"question\": \"q\"}\n", "x"), ParseError);
    REQUIRE_THROWS_AS(parse_library("{\"question\": \"\", \"answer\": \"a\"}\n", "x"), ParseError);
}

TEST_CASE("library jsonl serialization round-trips", "[incontext]") {
    ContextLibrary lib = default_library();
    REQUIRE(lib.size() == 48);
    ContextLibrary back = parse_library(library_to_jsonl(lib), "round");
    REQUIRE(back.size() == lib.size());
    REQUIRE(back.examples == lib.examples);
}

TEST_CASE("sampling is deterministic in the seed and rejects oversized k", "[incontext]") {
    ContextLibrary lib = default_library();
    const auto a = sample_examples(lib, 3, 77);
    const auto b = sample_examples(lib, 3, 77);
    REQUIRE(a == b);
    REQUIRE(a.size() == 3);
    REQUIRE_FALSE(a == sample_examples(lib, 3, 78));

    REQUIRE(sample_examples(lib, 0, 1).empty());
    REQUIRE_THROWS_AS(sample_examples(lib, lib.size() + 1, 1), ConfigError);
    REQUIRE_THROWS_AS(sample_examples(lib, -1, 1), ConfigError);
}

TEST_CASE("sampling returns distinct examples", "[incontext]") {
    ContextLibrary lib = default_library();
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto picked = sample_examples(lib, 4, seed);
        std::set<ContextExample> uniq(picked.begin(), picked.end());
        REQUIRE(uniq.size() == picked.size());
    }
}

TEST_CASE("sampling k=2 of 10 is uniform within 3 sigma over 10000 seeds", "[incontext]") {
    ContextLibrary lib;
    for (int i = 0; i < 10; ++i) lib.examples.push_back({"q" + std::to_string(i), "a" + std::to_string(i)});

    const int draws = 10000;
    std::map<std::string, int> counts;
    for (int s = 0; s < draws; ++s)
        for (const auto& ex : sample_examples(lib, 2, static_cast<std::uint64_t>(s) * 2654435761u + 17))
            ++counts[ex.question];

    const double p = 2.0 / 10.0;
    const double mean = draws * p;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (int i = 0; i < 10; ++i) {
        const double c = counts["q" + std::to_string(i)];
        INFO("example " << i << " count " << c << " expected " << mean << " sigma " << sigma);
        REQUIRE(std::abs(c - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("prompt assembly obeys the documented block order and lengths", "[incontext]") {
    const Vocabulary v = Vocabulary::standard();
    const TokenSequence system({v.bos(), v.id("find"), v.id("the")});
    const TokenSequence query = v.tokenize("scene2 attr3");

    {
        const TokenSequence p = assemble_prompt(system, {}, query, v);
        std::vector<int> expect = system.ids;
        expect.push_back(v.sep());
        expect.insert(expect.end(), query.ids.begin(), query.ids.end());
        REQUIRE(p.ids == expect);
    }
    {
        const ContextExample ex{"scene1 attr0", "it appears on scene1 . it is attr0 ."};
        const TokenSequence p = assemble_prompt(system, {ex}, query, v);
        const int ex_len = v.tokenize(ex.question).length() + v.tokenize(ex.answer).length();
        REQUIRE(p.length() == system.length() + ex_len + query.length() + 2);

        // example tokens sit strictly between the system and query spans
        std::vector<int> exp_ids = v.tokenize(ex.question).ids;
        const auto ans = v.tokenize(ex.answer).ids;
        exp_ids.insert(exp_ids.end(), ans.begin(), ans.end());
        const int sys_end = system.length() + 1;
        for (int i = 0; i < ex_len; ++i) REQUIRE(p.ids[static_cast<std::size_t>(sys_end + i)] == exp_ids[static_cast<std::size_t>(i)]);
        REQUIRE(p.ids[static_cast<std::size_t>(sys_end + ex_len)] == v.sep());
    }
}

TEST_CASE("the query span is always the suffix of the assembled prompt", "[incontext]") {
    const Vocabulary v = Vocabulary::standard();
    const TokenSequence system({v.bos(), v.id("find"), v.id("the")});
    const TokenSequence query = v.tokenize("scene5 attr7");
    ContextLibrary lib = default_library();
    for (int k : {0, 1, 2, 4}) {
        const TokenSequence p = assemble_prompt(system, sample_examples(lib, k, 99), query, v);
        REQUIRE(p.length() >= query.length());
        for (int i = 0; i < query.length(); ++i)
            REQUIRE(p.ids[static_cast<std::size_t>(p.length() - query.length() + i)] == query.ids[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("prompt assembly never emits special tokens inside the example span", "[incontext]") {
    const Vocabulary v = Vocabulary::standard();
    const TokenSequence system({v.bos(), v.id("find"), v.id("the")});
    const TokenSequence query = v.tokenize("scene0 attr0");
    ContextLibrary lib = default_library();
    const TokenSequence p = assemble_prompt(system, sample_examples(lib, 4, 5), query, v);
    for (int i = system.length(); i < p.length() - query.length(); ++i)
        REQUIRE_FALSE(v.is_special(p.ids[static_cast<std::size_t>(i)]));

    const ContextExample bad{"scene0 attr0", "it is [SEG] ."};
    REQUIRE_THROWS_AS(assemble_prompt(system, {bad}, query, v), VocabError);
}
