#pragma once

// JSON (de)serialization for every configuration struct. Missing keys keep
// their defaults so a config file only has to name what it changes; unknown
// keys are rejected to catch typos.

#include "cores/io.hpp"
#include "cores/pipeline.hpp"

#include <json.hpp>

#include <set>
#include <string>

namespace cores {

struct TrainConfig {
    Scalar lr = 0.0003;
    int warmup_steps = 100;
    Scalar weight_decay = 0.01;
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar adam_epsilon = 1e-8;
    int batch_size = 8;
    int steps = 2000;
    int checkpoint_every = 0;  // 0: checkpoint only at the end
    std::uint64_t seed = 0;
    PipelineConfig pipeline;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("trainer: lr must be positive");
        if (warmup_steps < 0) throw ConfigError("trainer: warmup_steps must be nonnegative");
        if (steps < 1 || steps < warmup_steps) throw ConfigError("trainer: steps must be >= warmup_steps and >= 1");
        if (batch_size < 1) throw ConfigError("trainer: batch_size must be positive");
        if (weight_decay < 0.0) throw ConfigError("trainer: weight_decay must be nonnegative");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("trainer: moment decays must lie in [0, 1)");
        if (adam_epsilon <= 0.0) throw ConfigError("trainer: adam_epsilon must be positive");
        if (checkpoint_every < 0) throw ConfigError("trainer: checkpoint_every must be nonnegative");
        pipeline.validate();
    }
};

// Linear warmup to lr over warmup_steps, then linear decay that reaches zero
// exactly at the final step. Steps are 1-indexed.
inline Scalar lr_at(const TrainConfig& c, int step) {
    if (step < 1 || step > c.steps) throw std::out_of_range("lr_at: step " + std::to_string(step));
    if (c.warmup_steps > 0 && step <= c.warmup_steps)
        return c.lr * static_cast<Scalar>(step) / static_cast<Scalar>(c.warmup_steps);
    if (c.steps == c.warmup_steps) return c.lr;
    return c.lr * static_cast<Scalar>(c.steps - step) / static_cast<Scalar>(c.steps - c.warmup_steps);
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ParseError(where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw ParseError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& slot, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        slot = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + "." + key + ": " + e.what());
    }
}

} // namespace detail

inline nlohmann::json to_json(const MllmConfig& c) {
    return {{"hidden_dim", c.hidden_dim}, {"layers", c.layers},       {"heads", c.heads},
            {"max_seq_len", c.max_seq_len}, {"lora_rank", c.lora_rank}, {"lora_alpha", c.lora_alpha},
            {"lora_dropout", c.lora_dropout}};
}

inline MllmConfig mllm_from_json(const nlohmann::json& j, const std::string& where = "mllm") {
    detail::reject_unknown(j, {"hidden_dim", "layers", "heads", "max_seq_len", "lora_rank", "lora_alpha", "lora_dropout"},
                           where);
    MllmConfig c;
    detail::read_key(j, "hidden_dim", c.hidden_dim, where);
    detail::read_key(j, "layers", c.layers, where);
    detail::read_key(j, "heads", c.heads, where);
    detail::read_key(j, "max_seq_len", c.max_seq_len, where);
    detail::read_key(j, "lora_rank", c.lora_rank, where);
    detail::read_key(j, "lora_alpha", c.lora_alpha, where);
    detail::read_key(j, "lora_dropout", c.lora_dropout, where);
    return c;
}

inline nlohmann::json to_json(const BackboneConfig& c) {
    return {{"image_size", c.image_size},
            {"grid", c.grid},
            {"stem_channels", c.stem_channels},
            {"feat_channels", c.feat_channels},
            {"prompt_channels", c.prompt_channels}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j, const std::string& where = "backbone") {
    detail::reject_unknown(j, {"image_size", "grid", "stem_channels", "feat_channels", "prompt_channels"}, where);
    BackboneConfig c;
    detail::read_key(j, "image_size", c.image_size, where);
    detail::read_key(j, "grid", c.grid, where);
    detail::read_key(j, "stem_channels", c.stem_channels, where);
    detail::read_key(j, "feat_channels", c.feat_channels, where);
    detail::read_key(j, "prompt_channels", c.prompt_channels, where);
    return c;
}

inline nlohmann::json to_json(const RefinerConfig& c) {
    return {{"hidden_dim", c.hidden_dim},
            {"prompt_dim", c.prompt_dim},
            {"feat_channels", c.feat_channels},
            {"grid", c.grid},
            {"map_epsilon", c.map_epsilon}};
}

inline RefinerConfig refiner_from_json(const nlohmann::json& j, const std::string& where = "refiner") {
    detail::reject_unknown(j, {"hidden_dim", "prompt_dim", "feat_channels", "grid", "map_epsilon"}, where);
    RefinerConfig c;
    detail::read_key(j, "hidden_dim", c.hidden_dim, where);
    detail::read_key(j, "prompt_dim", c.prompt_dim, where);
    detail::read_key(j, "feat_channels", c.feat_channels, where);
    detail::read_key(j, "grid", c.grid, where);
    detail::read_key(j, "map_epsilon", c.map_epsilon, where);
    return c;
}

inline nlohmann::json to_json(const MaskDecoder::Config& c) {
    return {{"grid", c.grid},
            {"image_size", c.image_size},
            {"feat_channels", c.feat_channels},
            {"prompt_dim", c.prompt_dim},
            {"mask_channels", c.mask_channels},
            {"hyper_hidden", c.hyper_hidden}};
}

inline MaskDecoder::Config decoder_from_json(const nlohmann::json& j, const std::string& where = "decoder") {
    detail::reject_unknown(j, {"grid", "image_size", "feat_channels", "prompt_dim", "mask_channels", "hyper_hidden"},
                           where);
    MaskDecoder::Config c;
    detail::read_key(j, "grid", c.grid, where);
    detail::read_key(j, "image_size", c.image_size, where);
    detail::read_key(j, "feat_channels", c.feat_channels, where);
    detail::read_key(j, "prompt_dim", c.prompt_dim, where);
    detail::read_key(j, "mask_channels", c.mask_channels, where);
    detail::read_key(j, "hyper_hidden", c.hyper_hidden, where);
    return c;
}

inline nlohmann::json to_json(const SegChainConfig& c) {
    return {{"levels", c.levels},
            {"use_cor", c.use_cor},
            {"use_cos", c.use_cos},
            {"use_refiner", c.use_refiner},
            {"in_context_k", c.in_context_k}};
}

inline SegChainConfig seg_chain_from_json(const nlohmann::json& j, const std::string& where = "chain") {
    detail::reject_unknown(j, {"levels", "use_cor", "use_cos", "use_refiner", "in_context_k"}, where);
    SegChainConfig c;
    detail::read_key(j, "levels", c.levels, where);
    detail::read_key(j, "use_cor", c.use_cor, where);
    detail::read_key(j, "use_cos", c.use_cos, where);
    detail::read_key(j, "use_refiner", c.use_refiner, where);
    detail::read_key(j, "in_context_k", c.in_context_k, where);
    return c;
}

inline nlohmann::json to_json(const LossWeights& w) {
    return {{"lambda_d", w.lambda_d}, {"lambda_c", w.lambda_c}, {"lambda_r", w.lambda_r}, {"lambda_s", w.lambda_s}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j, const std::string& where = "weights") {
    detail::reject_unknown(j, {"lambda_d", "lambda_c", "lambda_r", "lambda_s"}, where);
    LossWeights w;
    detail::read_key(j, "lambda_d", w.lambda_d, where);
    detail::read_key(j, "lambda_c", w.lambda_c, where);
    detail::read_key(j, "lambda_r", w.lambda_r, where);
    detail::read_key(j, "lambda_s", w.lambda_s, where);
    return w;
}

inline nlohmann::json to_json(const PipelineConfig& c) {
    return {{"mllm", to_json(c.mllm)},
            {"backbone", to_json(c.backbone)},
            {"refiner", to_json(c.refiner)},
            {"decoder", to_json(c.decoder)},
            {"chain", to_json(c.chain)},
            {"weights", to_json(c.weights)},
            {"c1", to_string(c.c1)},
            {"c1_weight", c.c1_weight},
            {"prefix_grid", c.prefix_grid}};
}

inline PipelineConfig pipeline_from_json(const nlohmann::json& j, const std::string& where = "pipeline") {
    detail::reject_unknown(
        j, {"mllm", "backbone", "refiner", "decoder", "chain", "weights", "c1", "c1_weight", "prefix_grid"}, where);
    PipelineConfig c;
    if (j.contains("mllm")) c.mllm = mllm_from_json(j.at("mllm"), where + ".mllm");
    if (j.contains("backbone")) c.backbone = backbone_from_json(j.at("backbone"), where + ".backbone");
    if (j.contains("refiner")) c.refiner = refiner_from_json(j.at("refiner"), where + ".refiner");
    if (j.contains("decoder")) c.decoder = decoder_from_json(j.at("decoder"), where + ".decoder");
    if (j.contains("chain")) c.chain = seg_chain_from_json(j.at("chain"), where + ".chain");
    if (j.contains("weights")) c.weights = loss_weights_from_json(j.at("weights"), where + ".weights");
    if (j.contains("c1")) c.c1 = c1_from_string(j.at("c1").get<std::string>());
    detail::read_key(j, "c1_weight", c.c1_weight, where);
    detail::read_key(j, "prefix_grid", c.prefix_grid, where);
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"warmup_steps", c.warmup_steps},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"checkpoint_every", c.checkpoint_every},
            {"seed", c.seed},
            {"pipeline", to_json(c.pipeline)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& where = "train") {
    detail::reject_unknown(j,
                           {"lr", "warmup_steps", "weight_decay", "beta1", "beta2", "adam_epsilon", "batch_size",
                            "steps", "checkpoint_every", "seed", "pipeline"},
                           where);
    TrainConfig c;
    detail::read_key(j, "lr", c.lr, where);
    detail::read_key(j, "warmup_steps", c.warmup_steps, where);
    detail::read_key(j, "weight_decay", c.weight_decay, where);
    detail::read_key(j, "beta1", c.beta1, where);
    detail::read_key(j, "beta2", c.beta2, where);
    detail::read_key(j, "adam_epsilon", c.adam_epsilon, where);
    detail::read_key(j, "batch_size", c.batch_size, where);
    detail::read_key(j, "steps", c.steps, where);
    detail::read_key(j, "checkpoint_every", c.checkpoint_every, where);
    detail::read_key(j, "seed", c.seed, where);
    if (j.contains("pipeline")) c.pipeline = pipeline_from_json(j.at("pipeline"), where + ".pipeline");
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return train_config_from_json(j, path);
}

} // namespace cores
