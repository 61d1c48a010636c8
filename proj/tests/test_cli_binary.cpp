// End-to-end exercise of the cores_cli binary: every subcommand, the exit
// code contract, and byte-level idempotency. The binary path comes from
// CORES_CLI_PATH, set by the build so the test tracks the real artifact.

#include <catch2/catch_amalgamated.hpp>

#include "cores/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

std::string cli_path() {
    const char* p = std::getenv("CORES_CLI_PATH");
    REQUIRE(p != nullptr);
    return p;
}

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& args) {
    const fs::path out = fs::temp_directory_path() / "cores_cli_run_output.txt";
    const std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = raw >= 256 ? raw / 256 : raw;  // WEXITSTATUS without <sys/wait.h>
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
}

fs::path scratch() {
    static const fs::path root = [] {
        const fs::path p = fs::temp_directory_path() / "cores_cli_e2e";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

// A slim model the binary can train in well under a second.
void write_smoke_config(const fs::path& path, int steps) {
    nlohmann::json j;
    j["n"] = 14;
    j["train"] = {{"lr", 0.005},
                  {"warmup_steps", 1},
                  {"steps", steps},
                  {"batch_size", 2},
                  {"seed", 9},
                  {"pipeline",
                   {{"mllm",
                     {{"hidden_dim", 16},
                      {"layers", 1},
                      {"heads", 2},
                      {"max_seq_len", 96},
                      {"lora_rank", 2},
                      {"lora_alpha", 4.0},
                      {"lora_dropout", 0.0}}},
                    {"backbone",
                     {{"image_size", 64}, {"grid", 16}, {"stem_channels", 4}, {"feat_channels", 8}, {"prompt_channels", 8}}},
                    {"refiner", {{"hidden_dim", 16}, {"prompt_dim", 8}, {"feat_channels", 8}, {"grid", 16}}},
                    {"decoder",
                     {{"grid", 16},
                      {"image_size", 64},
                      {"feat_channels", 8},
                      {"prompt_dim", 8},
                      {"mask_channels", 4},
                      {"hyper_hidden", 8}}},
                    {"chain",
                     {{"levels", 2}, {"use_cor", true}, {"use_cos", true}, {"use_refiner", true}, {"in_context_k", 1}}},
                    {"prefix_grid", 4}}}};
    std::ofstream(path) << j.dump(2);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int count_lines(const fs::path& p) {
    std::ifstream in(p);
    int n = 0;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

} // namespace

TEST_CASE("cli exit codes follow the usage/runtime contract") {
    CHECK(run("--help").exit_code == 0);
    CHECK(run("gen-data --help").exit_code == 0);
    CHECK(run("").exit_code == 2);                               // missing subcommand
    CHECK(run("frobnicate").exit_code == 2);                     // unknown subcommand
    CHECK(run("gen-data --out x --bogus-flag 1").exit_code == 2);  // unknown flag
    CHECK(run("gen-data").exit_code == 2);                       // missing required --out
    CHECK(run("train --data /nonexistent --out x").exit_code == 2);

    const fs::path bad = scratch() / "bad.json";
    std::ofstream(bad) << "{\"train\": {\"lr\": \"fast\"}}";
    CHECK(run("gen-data --config " + bad.string() + " --out " + (scratch() / "never").string()).exit_code == 2);
}

TEST_CASE("cli pipeline: gen-data, train, eval, infer, inspect-prompt, ablate") {
    const fs::path root = scratch();
    const fs::path cfg = root / "smoke.json";
    const fs::path data = root / "data";
    write_smoke_config(cfg, 4);

    SECTION("gen-data writes the dataset and reruns byte-identically") {
        REQUIRE(run("gen-data --config " + cfg.string() + " --out " + data.string() + " --seed 7").exit_code == 0);
        REQUIRE(fs::exists(data / "manifest.json"));

        const fs::path again = root / "data_again";
        REQUIRE(run("gen-data --config " + cfg.string() + " --out " + again.string() + " --seed 7").exit_code == 0);
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(data)) files.push_back(e.path().filename());
        REQUIRE_FALSE(files.empty());
        for (const fs::path& f : files) CHECK(slurp(data / f) == slurp(again / f));

        const fs::path other_seed = root / "data_seed8";
        REQUIRE(run("gen-data --config " + cfg.string() + " --out " + other_seed.string() + " --seed 8").exit_code == 0);
        CHECK(slurp(data / "manifest.json") != slurp(other_seed / "manifest.json"));
    }

    SECTION("gen-context emits a parseable exemplar library") {
        const fs::path lib = root / "lib.jsonl";
        REQUIRE(run("gen-context --out " + lib.string()).exit_code == 0);
        const cores::ContextLibrary parsed = cores::load_library(lib.string());
        CHECK(parsed.size() == 48);
        CHECK(parsed.duplicates_dropped == 0);
    }

    SECTION("train, then eval and infer against the checkpoint") {
        if (!fs::exists(data / "manifest.json"))
            REQUIRE(run("gen-data --config " + cfg.string() + " --out " + data.string() + " --seed 7").exit_code == 0);

        const fs::path run_dir = root / "run";
        const RunResult tr = run("train --config " + cfg.string() + " --data " + data.string() + " --out " + run_dir.string());
        REQUIRE(tr.exit_code == 0);
        REQUIRE(fs::exists(run_dir / "checkpoint.bin"));
        CHECK(count_lines(run_dir / "train_log.jsonl") == 4);

        SECTION("eval on the val split prints a metrics document") {
            const fs::path report = root / "eval.json";
            const RunResult ev = run("eval --ckpt " + (run_dir / "checkpoint.bin").string() + " --data " + data.string() +
                                     " --split val --seed 3 --out " + report.string());
            REQUIRE(ev.exit_code == 0);
            const nlohmann::json j = nlohmann::json::parse(slurp(report));
            CHECK(j.at("giou").get<double>() >= -1.0);
            CHECK(j.at("giou").get<double>() <= 1.0);
            CHECK(j.at("n_samples").get<int>() >= 1);
        }

        SECTION("infer writes one final mask per sample plus answers") {
            const fs::path inf = root / "inf";
            const RunResult ir = run("infer --ckpt " + (run_dir / "checkpoint.bin").string() + " --data " + data.string() +
                                     " --out " + inf.string() + " --split val --limit 2 --seed 3");
            REQUIRE(ir.exit_code == 0);
            int masks = 0;
            for (const auto& e : fs::directory_iterator(inf))
                if (e.path().extension() == ".pgm") ++masks;
            CHECK(masks == 2);
            CHECK(count_lines(inf / "answers.jsonl") == 2);
            for (std::string line; std::getline(*std::make_unique<std::ifstream>(inf / "answers.jsonl"), line);) break;
            const nlohmann::json first = nlohmann::json::parse(slurp(inf / "answers.jsonl").substr(
                0, slurp(inf / "answers.jsonl").find('\n')));
            CHECK(first.contains("id"));
            CHECK(first.contains("query"));
            CHECK(first.contains("answer"));
            CHECK(first.contains("degraded"));
        }

        SECTION("train --resume on a finished run is a no-op") {
            const std::string before = slurp(run_dir / "checkpoint.bin");
            const RunResult rr =
                run("train --resume " + (run_dir / "checkpoint.bin").string() + " --data " + data.string() + " --out " +
                    run_dir.string());
            REQUIRE(rr.exit_code == 0);
            CHECK(rr.output.find("ran 0 steps") != std::string::npos);
            CHECK(slurp(run_dir / "checkpoint.bin") == before);
        }

        SECTION("resume flags exclude fresh-run configuration") {
            CHECK(run("train --resume " + (run_dir / "checkpoint.bin").string() + " --config " + cfg.string() +
                      " --data " + data.string() + " --out " + run_dir.string())
                      .exit_code == 2);
        }
    }

    SECTION("inspect-prompt prints the three labeled sections in order") {
        const RunResult r = run("inspect-prompt --k 1 --seed 11");
        REQUIRE(r.exit_code == 0);
        const auto sys_pos = r.output.find("[system]");
        const auto ctx_pos = r.output.find("[in-context]");
        const auto query_pos = r.output.find("[query]");
        REQUIRE(sys_pos != std::string::npos);
        REQUIRE(ctx_pos != std::string::npos);
        REQUIRE(query_pos != std::string::npos);
        CHECK(sys_pos < ctx_pos);
        CHECK(ctx_pos < query_pos);
        CHECK(run("inspect-prompt --k 1 --seed 11").output == r.output);
    }

    SECTION("eval scores externally supplied mask directories") {
        const fs::path gt = root / "ext_gt";
        const fs::path pred = root / "ext_pred";
        fs::create_directories(gt);
        fs::create_directories(pred);
        cores::Tensor a({8, 8}), b({8, 8});
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 8; ++x) a.at(y, x) = 1.0;
        for (int y = 2; y < 6; ++y)
            for (int x = 0; x < 8; ++x) b.at(y, x) = 1.0;
        cores::write_pgm((gt / "m.pgm").string(), a);
        cores::write_pgm((pred / "m.pgm").string(), b);

        const RunResult r = run("eval --pred-dir " + pred.string() + " --gt-dir " + gt.string());
        REQUIRE(r.exit_code == 0);
        const nlohmann::json j = nlohmann::json::parse(r.output);
        CHECK(j.at("giou").get<double>() == Catch::Approx(16.0 / 48.0));

        CHECK(run("eval --pred-dir " + pred.string() + " --gt-dir " + gt.string() + " --ckpt " + cfg.string())
                  .exit_code == 2);
    }

    SECTION("ablate writes a table over the requested axis") {
        if (!fs::exists(data / "manifest.json"))
            REQUIRE(run("gen-data --config " + cfg.string() + " --out " + data.string() + " --seed 7").exit_code == 0);
        const fs::path abl = root / "abl";
        const RunResult r =
            run("ablate --axis levels --config " + cfg.string() + " --data " + data.string() + " --out " + abl.string());
        REQUIRE(r.exit_code == 0);
        const nlohmann::json table = nlohmann::json::parse(slurp(abl / "ablation.json"));
        REQUIRE(table.size() == 3);
        CHECK(table[0].at("levels") == 1);
        CHECK(table[2].at("levels") == 3);
        for (const auto& row : table) {
            CHECK(row.contains("giou"));
            CHECK(row.contains("name"));
        }
    }
}
