#pragma once

// Flag and config plumbing shared by the command-line tool: the root config
// schema, component-list parsing, loss-weight presets, prompt rendering, and
// the metrics report shape.

#include "cores/config.hpp"
#include "cores/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace cores {

// One schema for every command: "train" drives training/eval/inference,
// "synth" and "n" drive dataset generation.
struct RootConfig {
    TrainConfig train;
    SynthConfig synth;
    int n = 100;
};

inline nlohmann::json to_json(const SynthConfig& c) { return detail::config_to_json(c); }

inline SynthConfig synth_from_json(const nlohmann::json& j, const std::string& where = "synth") {
    detail::reject_unknown(j,
                           {"image_size", "min_scenes", "max_scenes", "min_objects", "max_objects", "scene_min_side",
                            "scene_max_side", "object_min_side", "object_max_side", "num_scene_codes",
                            "num_attr_codes", "noise_sigma", "train_fraction", "max_retries"},
                           where);
    SynthConfig c;
    detail::read_key(j, "image_size", c.image_size, where);
    detail::read_key(j, "min_scenes", c.min_scenes, where);
    detail::read_key(j, "max_scenes", c.max_scenes, where);
    detail::read_key(j, "min_objects", c.min_objects, where);
    detail::read_key(j, "max_objects", c.max_objects, where);
    detail::read_key(j, "scene_min_side", c.scene_min_side, where);
    detail::read_key(j, "scene_max_side", c.scene_max_side, where);
    detail::read_key(j, "object_min_side", c.object_min_side, where);
    detail::read_key(j, "object_max_side", c.object_max_side, where);
    detail::read_key(j, "num_scene_codes", c.num_scene_codes, where);
    detail::read_key(j, "num_attr_codes", c.num_attr_codes, where);
    detail::read_key(j, "noise_sigma", c.noise_sigma, where);
    detail::read_key(j, "train_fraction", c.train_fraction, where);
    detail::read_key(j, "max_retries", c.max_retries, where);
    return c;
}

inline RootConfig root_config_from_json(const nlohmann::json& j, const std::string& where = "config") {
    detail::reject_unknown(j, {"train", "synth", "n"}, where);
    RootConfig c;
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"), where + ".train");
    if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"), where + ".synth");
    detail::read_key(j, "n", c.n, where);
    return c;
}

inline RootConfig load_root_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return root_config_from_json(j, path);
}

// --components takes a comma list drawn from {inc, cor, cos, cos-r}; the
// empty string selects the bare single-level baseline.
struct ComponentFlags {
    bool inc = false;
    bool cor = false;
    bool cos = false;
    bool refiner = false;
};

inline ComponentFlags parse_components(const std::string& list) {
    ComponentFlags f;
    std::stringstream ss(list);
    std::string token;
    while (std::getline(ss, token, ',')) {
        if (token.empty()) continue;
        if (token == "inc") f.inc = true;
        else if (token == "cor") f.cor = true;
        else if (token == "cos") f.cos = true;
        else if (token == "cos-r") f.refiner = true;
        else throw ConfigError("unknown component '" + token + "' (expected inc, cor, cos, cos-r)");
    }
    if (f.refiner) f.cos = true;  // refinement runs inside the segmenting chain
    return f;
}

inline void apply_components(TrainConfig& cfg, const ComponentFlags& f) {
    cfg.pipeline.chain.use_cor = f.cor;
    cfg.pipeline.chain.use_cos = f.cos;
    cfg.pipeline.chain.use_refiner = f.refiner;
    if (!f.inc) cfg.pipeline.chain.in_context_k = 0;
}

// Loss-weight presets: the studied rescalings of the chain pair and of the
// mask pair, each preserving its default pair sum.
inline const std::map<std::string, LossWeights (*)(const LossWeights&)>& weight_presets() {
    static const std::map<std::string, LossWeights (*)(const LossWeights&)> presets = {
        {"cos-cor-2-1", [](const LossWeights& w) { return w.with_cos_cor_ratio(2, 1); }},
        {"cos-cor-1-1", [](const LossWeights& w) { return w.with_cos_cor_ratio(1, 1); }},
        {"cos-cor-1-2", [](const LossWeights& w) { return w.with_cos_cor_ratio(1, 2); }},
        {"ce-dice-4-1", [](const LossWeights& w) { return w.with_ce_dice_ratio(4, 1); }},
        {"ce-dice-3-2", [](const LossWeights& w) { return w.with_ce_dice_ratio(3, 2); }},
        {"ce-dice-2-3", [](const LossWeights& w) { return w.with_ce_dice_ratio(2, 3); }},
    };
    return presets;
}

inline std::vector<std::string> preset_names() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : weight_presets()) names.push_back(name);
    return names;
}

inline LossWeights apply_preset(const LossWeights& w, const std::string& name) {
    const auto it = weight_presets().find(name);
    if (it == weight_presets().end()) throw ConfigError("unknown preset '" + name + "'");
    return it->second(w);
}

// The assembled prompt, rendered as the three labeled spans in prompt order.
inline std::string render_prompt_sections(const Vocabulary& vocab, const TokenSequence& system,
                                          const std::vector<ContextExample>& examples, const TokenSequence& query) {
    std::ostringstream out;
    out << "[system]\n" << vocab.detokenize(system) << "\n\n";
    out << "[in-context]\n";
    if (examples.empty()) {
        out << "(none)\n";
    } else {
        for (const ContextExample& e : examples) out << "Q: " << e.question << "\nA: " << e.answer << "\n";
    }
    out << "\n[query]\n" << vocab.detokenize(query) << "\n";
    return out.str();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j{{"giou", r.giou}, {"ciou", r.ciou}, {"n_samples", r.n_samples}};
    j["ciou_small"] = r.ciou_small ? nlohmann::json(*r.ciou_small) : nlohmann::json(nullptr);
    j["ciou_medium"] = r.ciou_medium ? nlohmann::json(*r.ciou_medium) : nlohmann::json(nullptr);
    j["ciou_large"] = r.ciou_large ? nlohmann::json(*r.ciou_large) : nlohmann::json(nullptr);
    return j;
}

// Pairs prediction and ground-truth mask rasters by filename for the
// model-free evaluation path.
inline EvalReport evaluate_mask_dirs(const std::string& pred_dir, const std::string& gt_dir) {
    std::vector<std::string> names;
    for (const auto& entry : std::filesystem::directory_iterator(pred_dir))
        if (entry.path().extension() == ".pgm") names.push_back(entry.path().filename().string());
    if (names.empty()) throw ConfigError("no .pgm masks in " + pred_dir);
    std::sort(names.begin(), names.end());

    std::vector<EvalRecord> records;
    std::int64_t area = 0;
    for (const std::string& name : names) {
        const std::string gt_path = gt_dir + "/" + name;
        if (!std::filesystem::exists(gt_path)) throw ConfigError("missing ground truth for " + name);
        Tensor pred = read_pgm(pred_dir + "/" + name);
        Tensor gt = read_pgm(gt_path);
        for (Scalar& v : pred.data) v = v > 0.5 ? 1.0 : 0.0;
        for (Scalar& v : gt.data) v = v > 0.5 ? 1.0 : 0.0;
        records.push_back(make_record(pred, gt));
        area = pred.size();
    }
    return evaluate(records, SizeThresholds::for_image_area(area));
}

} // namespace cores
