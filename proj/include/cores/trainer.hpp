#pragma once

// Training loop: frozen/trainable partition, decoupled-weight-decay adaptive
// moments, linear warmup then linear decay to zero, JSONL loss logging, and
// binary checkpoints that resume exactly. All randomness is derived
// functionally from (seed, step, index), so a resumed run replays the same
// batches, exemplars, and dropout masks as an uninterrupted one.

#include "cores/checkpoint.hpp"
#include "cores/config.hpp"
#include "cores/metrics.hpp"
#include "cores/pipeline.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cores {

struct ParamPartition {
    std::vector<int> frozen_ids;
    std::vector<int> trainable_ids;
    std::map<std::string, int> category_counts;  // category -> tensor count

    int total() const { return static_cast<int>(frozen_ids.size() + trainable_ids.size()); }
};

namespace detail {

struct PartitionCategory {
    const char* label;
    bool frozen;
};

inline PartitionCategory categorize_parameter(const std::string& name) {
    if (name.rfind("mllm.", 0) == 0) {
        if (name.find(".lora.") != std::string::npos) return {"lora_adapters", false};
        return {"mllm_base", true};
    }
    if (name.rfind("backbone.prompt.", 0) == 0) return {"prompt_encoder", true};
    if (name.rfind("backbone.", 0) == 0) return {"visual_backbone", true};
    if (name.rfind("refiner.beta.", 0) == 0) return {"beta_projection", false};
    if (name.rfind("refiner.ca.", 0) == 0) return {"refiner_cross_attention", false};
    if (name == "decoder.no_prompt") return {"no_prompt_embedding", false};
    if (name.rfind("decoder.", 0) == 0) return {"mask_decoder", false};
    if (name.rfind("visproj.", 0) == 0) return {"visual_prefix_projection", false};
    throw PartitionError("parameter '" + name + "' matches no partition category");
}

} // namespace detail

// Buckets every registered parameter into the frozen/trainable partition and
// cross-checks each stored flag against its category. Fails fast on any
// unknown name or contradicting flag, so no parameter can silently train.
inline ParamPartition partition_parameters(const ParamStore& store) {
    ParamPartition part;
    for (int i = 0; i < store.count(); ++i) {
        const detail::PartitionCategory cat = detail::categorize_parameter(store.name(i));
        if (store.frozen(i) != cat.frozen)
            throw PartitionError("parameter '" + store.name(i) + "' is registered " +
                                 (store.frozen(i) ? "frozen" : "trainable") + " but belongs to category '" + cat.label +
                                 "'");
        (cat.frozen ? part.frozen_ids : part.trainable_ids).push_back(i);
        ++part.category_counts[cat.label];
    }
    return part;
}

class Trainer {
  public:
    explicit Trainer(const TrainConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        // behind a pointer: the model's chain holds references to sibling
        // members, so the object must never relocate when a Trainer moves
        model_ = std::make_unique<CoresModel>(store_, cfg_.pipeline, mix_seed(cfg_.seed, 0x5EED0ULL));
        partition_ = partition_parameters(store_);
        m_.resize(static_cast<std::size_t>(store_.count()));
        v_.resize(static_cast<std::size_t>(store_.count()));
        for (int i : partition_.trainable_ids) {
            m_[static_cast<std::size_t>(i)] = Tensor(store_.value(i).shape);
            v_[static_cast<std::size_t>(i)] = Tensor(store_.value(i).shape);
        }
    }

    const TrainConfig& config() const { return cfg_; }
    ParamStore& store() { return store_; }
    const ParamStore& store() const { return store_; }
    CoresModel& model() { return *model_; }
    const CoresModel& model() const { return *model_; }
    const ParamPartition& partition() const { return partition_; }
    int step() const { return step_; }

    // Sum of frozen-parameter gradient norms seen across every backward pass
    // so far; the freeze contract keeps this at exactly zero.
    Scalar frozen_grad_norm_accum() const { return frozen_grad_accum_; }

    // One optimizer step over a batch. The heavy lifting is per-sample: each
    // builds its own graph, runs the dual-chain forward, and accumulates
    // scaled gradients in registration order.
    LossBreakdown train_step(const std::vector<const LoadedSample*>& batch, const ContextLibrary& library) {
        const int step = step_ + 1;
        std::vector<Tensor> grads(static_cast<std::size_t>(store_.count()));
        LossBreakdown mean{0.0, 0.0, 0.0, 0.0, 0.0};
        const Scalar inv_b = 1.0 / static_cast<Scalar>(batch.size());

        for (std::size_t i = 0; i < batch.size(); ++i) {
            Graph g;
            ParamBinding bind(g, store_, true);
            const std::uint64_t sample_tag = mix_seed(cfg_.seed, static_cast<std::uint64_t>(step), i);
            Rng dropout_rng(mix_seed(sample_tag, 0xD120ULL));
            const std::vector<ContextExample> examples =
                sample_examples(library, cfg_.pipeline.chain.in_context_k, mix_seed(sample_tag, 0x1C0ULL));

            const TrainForward f = model_->train_forward(g, bind, *batch[i], examples, &dropout_rng);
            const Scalar objective = g.scalar(f.objective);
            if (!std::isfinite(objective) || !std::isfinite(f.breakdown.total))
                throw TrainingError("non-finite loss at step " + std::to_string(step) + ": " +
                                    breakdown_json(f.breakdown, lr_at(cfg_, step)).dump());

            g.backward(f.objective);
            bind.add_grads_into(grads, inv_b);
            for (int id : partition_.frozen_ids) frozen_grad_accum_ += bind.grad_norm(ParamId{id});
            if (cfg_.pipeline.c1 == C1Supervision::off && f.state.intermediate_accessed())
                throw std::logic_error("train_step: an intermediate chain mask was read during loss computation");

            mean.cor += f.breakdown.cor * inv_b;
            mean.dice += f.breakdown.dice * inv_b;
            mean.mask_ce += f.breakdown.mask_ce * inv_b;
            mean.cos += f.breakdown.cos * inv_b;
            mean.total += f.breakdown.total * inv_b;
        }

        apply_update(grads, lr_at(cfg_, step));
        step_ = step;
        return mean;
    }

    static nlohmann::json breakdown_json(const LossBreakdown& b, Scalar lr) {
        return {{"cor", b.cor}, {"dice", b.dice}, {"mask_ce", b.mask_ce}, {"cos", b.cos}, {"total", b.total}, {"lr", lr}};
    }

    void save(const std::string& path) const {
        nlohmann::json meta{{"train", to_json(cfg_)}, {"step", step_}};
        std::vector<std::pair<std::string, Tensor>> extras;
        for (int i : partition_.trainable_ids) {
            extras.emplace_back("adam.m." + store_.name(i), m_[static_cast<std::size_t>(i)]);
            extras.emplace_back("adam.v." + store_.name(i), v_[static_cast<std::size_t>(i)]);
        }
        save_checkpoint(path, store_, meta, extras);
    }

    // Rebuilds a trainer from a checkpoint: the embedded config reconstructs
    // the model (same registration), then stored values and moments replace
    // the fresh ones.
    static Trainer restore(const std::string& path) {
        const nlohmann::json meta = read_checkpoint_meta(path);
        Trainer t(train_config_from_json(meta.at("train"), path));
        const LoadedCheckpoint loaded = load_checkpoint(path, t.store_);
        t.step_ = loaded.meta.at("step").get<int>();
        for (const auto& [name, value] : loaded.extras) {
            const bool is_m = name.rfind("adam.m.", 0) == 0;
            const bool is_v = name.rfind("adam.v.", 0) == 0;
            if (!is_m && !is_v) throw ParseError(path + ": unexpected extra tensor '" + name + "'");
            const ParamId id = t.store_.find(name.substr(7));
            if (t.store_.value(id).shape != value.shape)
                throw ParseError(path + ": moment shape mismatch for '" + name + "'");
            (is_m ? t.m_ : t.v_)[static_cast<std::size_t>(id.idx)] = value;
        }
        return t;
    }

  private:
    void apply_update(std::vector<Tensor>& grads, Scalar lr) {
        const int t = step_ + 1;
        const Scalar bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const Scalar bc2 = 1.0 - std::pow(cfg_.beta2, t);
        for (int i : partition_.trainable_ids) {
            Tensor& p = store_.value(i);
            Tensor& gm = m_[static_cast<std::size_t>(i)];
            Tensor& gv = v_[static_cast<std::size_t>(i)];
            const Tensor* grad = &grads[static_cast<std::size_t>(i)];
            Tensor zero;
            if (grad->size() == 0) {
                zero = Tensor(p.shape);  // parameter unused under this configuration
                grad = &zero;
            }
            for (std::int64_t k = 0; k < p.size(); ++k) {
                const Scalar gk = grad->data[k];
                gm.data[k] = cfg_.beta1 * gm.data[k] + (1.0 - cfg_.beta1) * gk;
                gv.data[k] = cfg_.beta2 * gv.data[k] + (1.0 - cfg_.beta2) * gk * gk;
                const Scalar mhat = gm.data[k] / bc1;
                const Scalar vhat = gv.data[k] / bc2;
                p.data[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.adam_epsilon) + cfg_.weight_decay * p.data[k]);
            }
        }
    }

    TrainConfig cfg_;
    ParamStore store_;
    std::unique_ptr<CoresModel> model_;
    ParamPartition partition_;
    std::vector<Tensor> m_, v_;
    int step_ = 0;
    Scalar frozen_grad_accum_ = 0.0;
};

struct TrainResult {
    std::string checkpoint_path;
    std::string log_path;
    LossBreakdown first;
    LossBreakdown final;
    int steps_run = 0;
};

namespace detail {

inline std::vector<LoadedSample> load_split(const std::string& dataset_dir, const Manifest& manifest,
                                            const std::string& split) {
    std::vector<LoadedSample> out;
    for (const ManifestEntry& e : manifest.split(split)) out.push_back(load_sample(dataset_dir, e));
    if (out.empty()) throw ConfigError("dataset has no '" + split + "' samples");
    return out;
}

} // namespace detail

// Runs `trainer` from its current step to cfg.steps, appending one JSONL
// record per step and checkpointing into out_dir.
inline TrainResult run_training(Trainer& trainer, const std::string& dataset_dir, const std::string& out_dir) {
    const TrainConfig& cfg = trainer.config();
    const Manifest manifest = load_manifest(dataset_dir);
    const std::vector<LoadedSample> train = detail::load_split(dataset_dir, manifest, "train");
    const ContextLibrary library = context_library_for_task(manifest.config);

    std::filesystem::create_directories(out_dir);
    const std::string log_path = out_dir + "/train_log.jsonl";
    const std::string ckpt_path = out_dir + "/checkpoint.bin";
    std::ofstream log(log_path, trainer.step() == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw IoError("cannot write " + log_path);

    TrainResult result;
    result.checkpoint_path = ckpt_path;
    result.log_path = log_path;

    for (int step = trainer.step() + 1; step <= cfg.steps; ++step) {
        Rng batch_rng(mix_seed(cfg.seed, 0xBA7C4ULL, static_cast<std::uint64_t>(step)));
        std::vector<const LoadedSample*> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int b = 0; b < cfg.batch_size; ++b)
            batch.push_back(&train[static_cast<std::size_t>(batch_rng.uniform_int(static_cast<int>(train.size())))]);

        const LossBreakdown breakdown = trainer.train_step(batch, library);
        nlohmann::json line = Trainer::breakdown_json(breakdown, lr_at(cfg, step));
        line["step"] = step;
        log << line.dump() << "\n";
        if (!log) throw IoError("write failed for " + log_path);

        if (step == 1) result.first = breakdown;
        result.final = breakdown;
        ++result.steps_run;

        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps) trainer.save(ckpt_path);
    }
    log.flush();
    trainer.save(ckpt_path);
    return result;
}

inline TrainResult train_loop(const TrainConfig& cfg, const std::string& dataset_dir, const std::string& out_dir) {
    Trainer trainer(cfg);
    return run_training(trainer, dataset_dir, out_dir);
}

inline TrainResult resume_training(const std::string& checkpoint_path, const std::string& dataset_dir,
                                   const std::string& out_dir) {
    Trainer trainer = Trainer::restore(checkpoint_path);
    return run_training(trainer, dataset_dir, out_dir);
}

struct EvalOutcome {
    EvalReport report;
    int degraded = 0;
    int n = 0;
};

// Full-inference evaluation over one manifest split: greedy generation,
// chain decode, threshold at logit zero, metrics over the whole split.
inline EvalOutcome evaluate_split(const CoresModel& model, const ParamStore& store, const std::string& dataset_dir,
                                  const Manifest& manifest, const std::string& split, std::uint64_t seed) {
    const ContextLibrary library = context_library_for_task(manifest.config);
    const std::vector<ManifestEntry> entries = manifest.split(split);
    if (entries.empty()) throw ConfigError("dataset has no '" + split + "' samples");

    EvalOutcome out;
    std::vector<EvalRecord> records;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const LoadedSample sample = load_sample(dataset_dir, entries[i]);
        const InferenceResult r = model.infer(store, sample, library, mix_seed(seed, 0xE7A1ULL, i));
        records.push_back(make_record_from_logits(r.final_logits, sample.gt_mask));
        if (r.degraded) ++out.degraded;
    }
    out.n = static_cast<int>(records.size());
    out.report = evaluate(records, SizeThresholds::for_image_area(static_cast<std::int64_t>(
                                       manifest.config.image_size * manifest.config.image_size)));
    return out;
}

struct AblationRow {
    std::string name;
    TrainConfig config;
    EvalReport report;
    int degraded = 0;
};

enum class AblationAxis { components, in_context, levels };

inline AblationAxis ablation_axis_from_string(const std::string& s) {
    if (s == "components") return AblationAxis::components;
    if (s == "k" || s == "in-context") return AblationAxis::in_context;
    if (s == "levels") return AblationAxis::levels;
    throw ConfigError("unknown ablation axis '" + s + "' (expected components, k, or levels)");
}

// The variant grid along one ablation axis, mirroring the component,
// exemplar-count, and chain-depth studies.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_matrix(const TrainConfig& base, AblationAxis axis) {
    std::vector<std::pair<std::string, TrainConfig>> rows;
    auto push = [&](const std::string& name, bool cor, bool cos, bool refiner, int k, int levels) {
        TrainConfig c = base;
        c.pipeline.chain.use_cor = cor;
        c.pipeline.chain.use_cos = cos;
        c.pipeline.chain.use_refiner = refiner;
        c.pipeline.chain.in_context_k = k;
        c.pipeline.chain.levels = levels;
        rows.emplace_back(name, std::move(c));
    };
    const SegChainConfig& b = base.pipeline.chain;
    switch (axis) {
        case AblationAxis::components:
            // single-component rows drop the in-context input and refinement
            push("baseline", false, false, false, 0, b.levels);
            push("cor", true, false, false, 0, b.levels);
            push("cos", false, true, false, 0, b.levels);
            push("full", true, true, true, b.in_context_k, b.levels);
            break;
        case AblationAxis::in_context:
            for (int k : {0, 1, 2, 4}) push("k" + std::to_string(k), b.use_cor, b.use_cos, b.use_refiner, k, b.levels);
            break;
        case AblationAxis::levels:
            for (int levels : {1, 2, 3})
                push("levels" + std::to_string(levels), b.use_cor, b.use_cos, b.use_refiner, b.in_context_k, levels);
            break;
    }
    return rows;
}

// Trains every variant from scratch and evaluates it on the validation
// split. Writes per-variant artifacts under out_dir/<name>/.
inline std::vector<AblationRow> ablate(const TrainConfig& base, AblationAxis axis, const std::string& dataset_dir,
                                       const std::string& out_dir) {
    const Manifest manifest = load_manifest(dataset_dir);
    std::vector<AblationRow> table;
    for (const auto& [name, cfg] : ablation_matrix(base, axis)) {
        Trainer trainer(cfg);
        run_training(trainer, dataset_dir, out_dir + "/" + name);
        const EvalOutcome outcome =
            evaluate_split(trainer.model(), trainer.store(), dataset_dir, manifest, "val", cfg.seed);
        table.push_back({name, cfg, outcome.report, outcome.degraded});
    }
    return table;
}

inline nlohmann::json ablation_table_json(const std::vector<AblationRow>& table) {
    nlohmann::json rows = nlohmann::json::array();
    for (const AblationRow& r : table) {
        nlohmann::json row{{"name", r.name},
                           {"giou", r.report.giou},
                           {"ciou", r.report.ciou},
                           {"degraded", r.degraded},
                           {"levels", r.config.pipeline.chain.levels},
                           {"k", r.config.pipeline.chain.in_context_k},
                           {"use_cor", r.config.pipeline.chain.use_cor},
                           {"use_cos", r.config.pipeline.chain.use_cos},
                           {"use_refiner", r.config.pipeline.chain.use_refiner}};
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace cores
