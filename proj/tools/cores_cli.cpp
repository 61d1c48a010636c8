// Command-line workbench for the hierarchical reasoning-segmentation stack:
// dataset and context-library generation, training, evaluation, inference,
// prompt inspection, and the ablation harness. One binary, one config
// schema, one seed discipline.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include "cores/cli.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace {

using namespace cores;

// Option state outlives setup_* scopes; the registry ties its lifetime to
// main's.
std::vector<std::shared_ptr<void>>& option_registry() {
    static std::vector<std::shared_ptr<void>> reg;
    return reg;
}

template <typename T>
T* registered() {
    auto p = std::make_shared<T>();
    option_registry().push_back(p);
    return p.get();
}

struct CommonOpts {
    std::string config_path;
    std::uint64_t seed = 0;
    CLI::Option* config_opt = nullptr;
    CLI::Option* seed_opt = nullptr;

    RootConfig load() const { return config_path.empty() ? RootConfig{} : load_root_config(config_path); }
    bool seed_given() const { return seed_opt->count() > 0; }
};

CommonOpts* add_common(CLI::App* cmd) {
    CommonOpts* opts = registered<CommonOpts>();
    opts->config_opt = cmd->add_option("--config", opts->config_path, "JSON config file (sections: train, synth, n)")
                           ->check(CLI::ExistingFile);
    opts->seed_opt = cmd->add_option("--seed", opts->seed, "random seed override");
    return opts;
}

// Flags that reshape the training configuration on top of the config file.
struct ModelOpts {
    int levels = 0;
    int k = -1;
    std::string components;
    std::string preset;
    CLI::Option* levels_opt = nullptr;
    CLI::Option* k_opt = nullptr;
    CLI::Option* components_opt = nullptr;
    CLI::Option* preset_opt = nullptr;

    void apply(TrainConfig& cfg) const {
        if (components_opt->count() > 0) apply_components(cfg, parse_components(components));
        if (levels_opt->count() > 0) cfg.pipeline.chain.levels = levels;
        if (k_opt->count() > 0) cfg.pipeline.chain.in_context_k = k;
        if (preset_opt->count() > 0) cfg.pipeline.weights = apply_preset(cfg.pipeline.weights, preset);
    }
};

ModelOpts* add_model_opts(CLI::App* cmd) {
    ModelOpts* opts = registered<ModelOpts>();
    opts->levels_opt =
        cmd->add_option("--levels", opts->levels, "chain depth (logical levels)")->check(CLI::Range(1, 3));
    opts->k_opt = cmd->add_option("--k", opts->k, "in-context exemplar count")->check(CLI::NonNegativeNumber);
    opts->components_opt = cmd->add_option("--components", opts->components,
                                           "comma list of components: inc,cor,cos,cos-r (empty = baseline)");
    opts->preset_opt =
        cmd->add_option("--preset", opts->preset, "loss-weight preset")->check(CLI::IsMember(preset_names()));
    return opts;
}

void write_json_artifact(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

Tensor binarized(const Tensor& logits) {
    Tensor m(logits.shape);
    for (std::size_t i = 0; i < logits.data.size(); ++i) m.data[i] = logits.data[i] > 0.0 ? 1.0 : 0.0;
    return m;
}

void setup_gen_data(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("gen-data", "generate a synthetic hierarchical segmentation dataset");
    CommonOpts* common = add_common(cmd);
    auto* out_dir = registered<std::string>();
    auto* n = registered<int>();
    cmd->add_option("--out", *out_dir, "dataset output directory")->required();
    CLI::Option* n_opt = cmd->add_option("--n", *n, "sample count")->check(CLI::PositiveNumber);
    cmd->callback([common, out_dir, n, n_opt] {
        const RootConfig rc = common->load();
        const int count = n_opt->count() > 0 ? *n : rc.n;
        const Manifest man = generate_dataset(common->seed, count, rc.synth, *out_dir);
        std::cout << "wrote " << man.entries.size() << " samples (train " << man.split("train").size() << " / val "
                  << man.split("val").size() << ") to " << *out_dir << "\n";
    });
}

void setup_gen_context(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("gen-context", "write the in-context exemplar library as JSONL");
    CommonOpts* common = add_common(cmd);
    auto* out_path = registered<std::string>();
    cmd->add_option("--out", *out_path, "library output file (.jsonl)")->required();
    cmd->callback([common, out_path] {
        const RootConfig rc = common->load();
        const ContextLibrary lib = context_library_for_task(rc.synth);
        std::ofstream out(*out_path);
        if (!out) throw IoError("cannot write " + *out_path);
        out << library_to_jsonl(lib);
        std::cout << "wrote " << lib.size() << " exemplars to " << *out_path << "\n";
    });
}

void setup_train(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "train a model on a generated dataset");
    CommonOpts* common = add_common(cmd);
    ModelOpts* model = add_model_opts(cmd);
    auto* data_dir = registered<std::string>();
    auto* out_dir = registered<std::string>();
    auto* resume_path = registered<std::string>();
    cmd->add_option("--data", *data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", *out_dir, "output directory for checkpoint and log")->required();
    CLI::Option* resume_opt =
        cmd->add_option("--resume", *resume_path, "continue from a checkpoint (its embedded config wins)")
            ->check(CLI::ExistingFile)
            ->excludes(common->config_opt)
            ->excludes(common->seed_opt)
            ->excludes(model->levels_opt)
            ->excludes(model->k_opt)
            ->excludes(model->components_opt)
            ->excludes(model->preset_opt);
    cmd->callback([common, model, data_dir, out_dir, resume_path, resume_opt] {
        TrainResult result;
        if (resume_opt->count() > 0) {
            result = resume_training(*resume_path, *data_dir, *out_dir);
        } else {
            RootConfig rc = common->load();
            if (common->seed_given()) rc.train.seed = common->seed;
            model->apply(rc.train);
            rc.train.validate();
            result = train_loop(rc.train, *data_dir, *out_dir);
        }
        std::cout << "ran " << result.steps_run << " steps; loss " << result.first.total << " -> "
                  << result.final.total << "\n"
                  << "checkpoint: " << result.checkpoint_path << "\n"
                  << "log: " << result.log_path << "\n";
    });
}

void setup_eval(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split, or score mask directories");
    CommonOpts* common = add_common(cmd);
    auto* ckpt = registered<std::string>();
    auto* data_dir = registered<std::string>();
    auto* split = registered<std::string>();
    *split = "val";
    auto* out_path = registered<std::string>();
    auto* pred_dir = registered<std::string>();
    auto* gt_dir = registered<std::string>();
    CLI::Option* ckpt_opt = cmd->add_option("--ckpt", *ckpt, "model checkpoint")->check(CLI::ExistingFile);
    CLI::Option* data_opt = cmd->add_option("--data", *data_dir, "dataset directory")->check(CLI::ExistingDirectory);
    CLI::Option* split_opt =
        cmd->add_option("--split", *split, "manifest split to score")->check(CLI::IsMember({"train", "val"}));
    cmd->add_option("--out", *out_path, "write the metrics JSON here as well");
    CLI::Option* gt_opt =
        cmd->add_option("--gt-dir", *gt_dir, "directory of ground-truth .pgm masks")->check(CLI::ExistingDirectory);
    CLI::Option* pred_opt = cmd->add_option("--pred-dir", *pred_dir, "directory of predicted .pgm masks")
                                ->check(CLI::ExistingDirectory)
                                ->excludes(ckpt_opt)
                                ->excludes(data_opt)
                                ->excludes(split_opt)
                                ->needs(gt_opt);
    gt_opt->needs(pred_opt);
    cmd->callback([common, ckpt, ckpt_opt, data_dir, split, out_path, pred_dir, gt_dir, pred_opt] {
        EvalReport report;
        if (pred_opt->count() > 0) {
            report = evaluate_mask_dirs(*pred_dir, *gt_dir);
        } else {
            if (ckpt_opt->count() == 0 || data_dir->empty())
                throw ConfigError("eval needs either --pred-dir/--gt-dir or --ckpt/--data");
            Trainer trainer = Trainer::restore(*ckpt);
            const Manifest manifest = load_manifest(*data_dir);
            const EvalOutcome outcome =
                evaluate_split(trainer.model(), trainer.store(), *data_dir, manifest, *split, common->seed);
            report = outcome.report;
            std::cerr << "degraded generations: " << outcome.degraded << "/" << outcome.n << "\n";
        }
        const nlohmann::json j = report_to_json(report);
        std::cout << j.dump(2) << "\n";
        if (!out_path->empty()) write_json_artifact(*out_path, j);
    });
}

void setup_infer(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("infer", "run inference and write mask rasters");
    CommonOpts* common = add_common(cmd);
    auto* ckpt = registered<std::string>();
    auto* data_dir = registered<std::string>();
    auto* out_dir = registered<std::string>();
    auto* split = registered<std::string>();
    *split = "val";
    auto* limit = registered<int>();
    auto* dump_levels = registered<bool>();
    auto* k = registered<int>();
    cmd->add_option("--ckpt", *ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--data", *data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", *out_dir, "output directory for masks")->required();
    cmd->add_option("--split", *split, "manifest split")->check(CLI::IsMember({"train", "val"}));
    cmd->add_option("--limit", *limit, "stop after this many samples (0 = all)")->check(CLI::NonNegativeNumber);
    CLI::Option* k_opt =
        cmd->add_option("--k", *k, "override the in-context exemplar count")->check(CLI::NonNegativeNumber);
    cmd->add_flag("--dump-levels", *dump_levels, "also write each intermediate level's mask");
    cmd->callback([common, ckpt, data_dir, out_dir, split, limit, dump_levels, k, k_opt] {
        const Trainer trainer = Trainer::restore(*ckpt);
        const CoresModel& model = trainer.model();
        const Manifest manifest = load_manifest(*data_dir);
        const ContextLibrary library = context_library_for_task(manifest.config);
        std::vector<ManifestEntry> entries = manifest.split(*split);
        if (*limit > 0 && static_cast<int>(entries.size()) > *limit) entries.resize(static_cast<std::size_t>(*limit));
        std::optional<int> k_override;
        if (k_opt->count() > 0) k_override = *k;

        std::filesystem::create_directories(*out_dir);
        std::ofstream answers(*out_dir + "/answers.jsonl");
        if (!answers) throw IoError("cannot write " + *out_dir + "/answers.jsonl");

        int degraded = 0;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const ManifestEntry& e = entries[i];
            const LoadedSample sample = load_sample(*data_dir, e);
            const InferenceResult r = model.infer(trainer.store(), sample, library, mix_seed(common->seed, 0xE7A1ULL, i),
                                                  *dump_levels, k_override);
            write_pgm(*out_dir + "/" + e.id + "_mask.pgm", binarized(r.final_logits));
            if (*dump_levels)
                for (std::size_t t = 0; t + 1 < r.level_logits.size(); ++t)
                    write_pgm(*out_dir + "/" + e.id + "_level" + std::to_string(t) + ".pgm",
                              binarized(r.level_logits[t]));
            if (r.degraded) ++degraded;
            nlohmann::json line{{"id", e.id},
                                {"query", e.query},
                                {"answer", model.vocab().detokenize(r.answer)},
                                {"degraded", r.degraded}};
            answers << line.dump() << "\n";
        }
        std::cout << "wrote masks for " << entries.size() << " samples to " << *out_dir << " (degraded " << degraded
                  << ")\n";
    });
}

void setup_inspect_prompt(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("inspect-prompt", "print the assembled prompt with labeled spans");
    CommonOpts* common = add_common(cmd);
    auto* k = registered<int>();
    *k = 1;
    auto* query = registered<std::string>();
    *query = "scene0 attr0";
    cmd->add_option("--k", *k, "in-context exemplar count")->check(CLI::NonNegativeNumber);
    cmd->add_option("--query", *query, "two-word query (scene word, attribute word)");
    cmd->callback([common, k, query] {
        const RootConfig rc = common->load();
        const Vocabulary vocab = Vocabulary::standard();
        const ContextLibrary library = context_library_for_task(rc.synth);
        const std::vector<ContextExample> examples = sample_examples(library, *k, common->seed);
        const TokenSequence query_tokens = vocab.tokenize(*query);
        std::cout << render_prompt_sections(vocab, system_prompt_tokens(vocab), examples, query_tokens);
    });
}

void setup_ablate(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("ablate", "train and evaluate a variant grid along one axis");
    CommonOpts* common = add_common(cmd);
    ModelOpts* model = add_model_opts(cmd);
    auto* axis = registered<std::string>();
    auto* data_dir = registered<std::string>();
    auto* out_dir = registered<std::string>();
    cmd->add_option("--axis", *axis, "ablation axis: components, k, or levels")
        ->required()
        ->check(CLI::IsMember({"components", "k", "in-context", "levels"}));
    cmd->add_option("--data", *data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--out", *out_dir, "output directory for variant artifacts and the table")->required();
    cmd->callback([common, model, axis, data_dir, out_dir] {
        RootConfig rc = common->load();
        if (common->seed_given()) rc.train.seed = common->seed;
        model->apply(rc.train);
        rc.train.validate();
        const std::vector<AblationRow> table = ablate(rc.train, ablation_axis_from_string(*axis), *data_dir, *out_dir);
        const nlohmann::json j = ablation_table_json(table);
        write_json_artifact(*out_dir + "/ablation.json", j);
        for (const AblationRow& r : table)
            std::cout << r.name << "  giou " << r.report.giou << "  ciou " << r.report.ciou << "\n";
        std::cout << "table: " << *out_dir << "/ablation.json\n";
    });
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical dual-chain reasoning segmentation workbench"};
    app.require_subcommand(1);
    setup_gen_data(app);
    setup_gen_context(app);
    setup_train(app);
    setup_eval(app);
    setup_infer(app);
    setup_inspect_prompt(app);
    setup_ablate(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const cores::ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const cores::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const cores::VocabError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
