#pragma once

// Two-level synthetic reasoning-segmentation task. Each image holds several
// "scene" rectangles placed in distinct quadrants, each filled with a muted
// scene color and containing a few small brightly colored objects. A query
// names (scene word, attribute word); every sample is built so at least one
// object with the same attribute sits in a different scene, which makes pure
// attribute matching ambiguous and forces scene-level reasoning.

#include "cores/incontext.hpp"
#include "cores/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace cores {

struct SynthConfig {
    int image_size = 64;
    int min_scenes = 2;
    int max_scenes = 4;
    int min_objects = 1;  // per scene
    int max_objects = 3;  // per scene
    int scene_min_side = 24;
    int scene_max_side = 30;
    int object_min_side = 8;
    int object_max_side = 16;
    int num_scene_codes = 6;
    int num_attr_codes = 8;
    Scalar noise_sigma = 0.02;
    Scalar train_fraction = 0.8;
    int max_retries = 64;

    void validate() const {
        if (image_size != 64) throw ConfigError("synth: image_size is fixed at 64");
        if (min_scenes < 2 || max_scenes > 4 || min_scenes > max_scenes)
            throw ConfigError("synth: scene count must lie in [2, 4]");
        if (min_objects < 1 || min_objects > max_objects) throw ConfigError("synth: bad object count range");
        if (scene_min_side > scene_max_side || object_min_side > object_max_side)
            throw ConfigError("synth: degenerate size range");
        if (scene_max_side > image_size / 2) throw ConfigError("synth: scenes must fit their quadrant");
        if (num_scene_codes < max_scenes || num_scene_codes > 6) throw ConfigError("synth: scene codes out of range");
        if (num_attr_codes < 2 || num_attr_codes > 8) throw ConfigError("synth: attribute codes out of range");
        if (train_fraction <= 0.0 || train_fraction >= 1.0) throw ConfigError("synth: train_fraction in (0,1)");
        if (noise_sigma < 0.0) throw ConfigError("synth: negative noise");
        if (max_retries < 1) throw ConfigError("synth: max_retries must be positive");
    }
};

struct SceneRegion {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open pixel bounds
    int scene_code = 0;
};

struct SynthObject {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int attr_code = 0;
    int scene_index = 0;
};

struct SynthScene {
    Tensor image;  // [3, S, S] in [0, 1]
    std::vector<SceneRegion> scenes;
    std::vector<SynthObject> objects;
};

struct SynthSample {
    Tensor image;
    Tensor gt_mask;     // target object, [S, S] 0/1
    Tensor scene_mask;  // target scene region, diagnostic only
    std::string scene_word;
    std::string attr_word;
    int scene_code = 0;
    int attr_code = 0;
    SynthObject target;
    SceneRegion target_scene;
    std::vector<SceneRegion> scenes;
    std::vector<SynthObject> objects;
    std::uint64_t layout_hash = 0;
    std::uint64_t seed = 0;
};

namespace detail {

inline const std::array<std::array<Scalar, 3>, 6>& scene_palette() {
    static const std::array<std::array<Scalar, 3>, 6> p = {{{0.35, 0.20, 0.20},
                                                            {0.20, 0.35, 0.20},
                                                            {0.20, 0.20, 0.35},
                                                            {0.35, 0.35, 0.20},
                                                            {0.35, 0.20, 0.35},
                                                            {0.20, 0.35, 0.35}}};
    return p;
}

inline const std::array<std::array<Scalar, 3>, 8>& attr_palette() {
    static const std::array<std::array<Scalar, 3>, 8> p = {{{0.95, 0.10, 0.10},
                                                            {0.10, 0.95, 0.10},
                                                            {0.10, 0.10, 0.95},
                                                            {0.95, 0.95, 0.10},
                                                            {0.95, 0.10, 0.95},
                                                            {0.10, 0.95, 0.95},
                                                            {0.95, 0.55, 0.10},
                                                            {0.75, 0.75, 0.75}}};
    return p;
}

inline bool rects_overlap(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1) {
    return ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1;
}

inline void fill_rect(Tensor& image, int x0, int y0, int x1, int y1, const std::array<Scalar, 3>& color) {
    const int S = image.dim(1);
    for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) image.data[(static_cast<std::size_t>(c) * S + y) * S + x] = color[static_cast<std::size_t>(c)];
}

// Layout before rendering; attribute codes may still be adjusted.
struct Layout {
    std::vector<SceneRegion> scenes;
    std::vector<SynthObject> objects;
};

inline Layout generate_layout(Rng& rng, const SynthConfig& cfg) {
    Layout lay;
    const int q = cfg.image_size / 2;
    const int n_scenes = cfg.min_scenes + rng.uniform_int(cfg.max_scenes - cfg.min_scenes + 1);

    std::array<int, 4> quadrants = {0, 1, 2, 3};
    for (int i = 0; i < n_scenes; ++i) {
        const int j = i + rng.uniform_int(4 - i);
        std::swap(quadrants[static_cast<std::size_t>(i)], quadrants[static_cast<std::size_t>(j)]);
    }
    std::vector<int> codes(static_cast<std::size_t>(cfg.num_scene_codes));
    for (int i = 0; i < cfg.num_scene_codes; ++i) codes[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < n_scenes; ++i) {
        const int j = i + rng.uniform_int(cfg.num_scene_codes - i);
        std::swap(codes[static_cast<std::size_t>(i)], codes[static_cast<std::size_t>(j)]);
    }

    for (int s = 0; s < n_scenes; ++s) {
        const int qi = quadrants[static_cast<std::size_t>(s)];
        const int qx = (qi % 2) * q, qy = (qi / 2) * q;
        const int w = cfg.scene_min_side + rng.uniform_int(cfg.scene_max_side - cfg.scene_min_side + 1);
        const int h = cfg.scene_min_side + rng.uniform_int(cfg.scene_max_side - cfg.scene_min_side + 1);
        SceneRegion r;
        r.x0 = qx + rng.uniform_int(q - w + 1);
        r.y0 = qy + rng.uniform_int(q - h + 1);
        r.x1 = r.x0 + w;
        r.y1 = r.y0 + h;
        r.scene_code = codes[static_cast<std::size_t>(s)];
        lay.scenes.push_back(r);

        const int n_obj = cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
        std::vector<SynthObject> placed;
        for (int o = 0; o < n_obj; ++o) {
            bool ok = false;
            for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) {
                const int ow = cfg.object_min_side + rng.uniform_int(cfg.object_max_side - cfg.object_min_side + 1);
                const int oh = cfg.object_min_side + rng.uniform_int(cfg.object_max_side - cfg.object_min_side + 1);
                const int spanx = (r.x1 - r.x0) - ow - 2;  // strict interior: 1px margin
                const int spany = (r.y1 - r.y0) - oh - 2;
                if (spanx < 0 || spany < 0) continue;
                SynthObject obj;
                obj.x0 = r.x0 + 1 + rng.uniform_int(spanx + 1);
                obj.y0 = r.y0 + 1 + rng.uniform_int(spany + 1);
                obj.x1 = obj.x0 + ow;
                obj.y1 = obj.y0 + oh;
                obj.attr_code = rng.uniform_int(cfg.num_attr_codes);
                obj.scene_index = s;
                bool clash = false;
                for (const SynthObject& p : placed)
                    if (rects_overlap(obj.x0, obj.y0, obj.x1, obj.y1, p.x0, p.y0, p.x1, p.y1)) clash = true;
                if (!clash) {
                    placed.push_back(obj);
                    ok = true;
                }
            }
            if (!ok && static_cast<int>(placed.size()) < cfg.min_objects)
                throw GenerationError("could not place an object inside a scene after " +
                                      std::to_string(cfg.max_retries) + " attempts");
        }
        for (const SynthObject& p : placed) lay.objects.push_back(p);
    }

    // guarantee a cross-scene attribute collision
    bool collision = false;
    for (std::size_t a = 0; a < lay.objects.size() && !collision; ++a)
        for (std::size_t b = a + 1; b < lay.objects.size() && !collision; ++b)
            if (lay.objects[a].attr_code == lay.objects[b].attr_code &&
                lay.objects[a].scene_index != lay.objects[b].scene_index)
                collision = true;
    if (!collision) {
        SynthObject* first = nullptr;
        for (SynthObject& o : lay.objects)
            if (o.scene_index == 0) {
                first = &o;
                break;
            }
        for (SynthObject& o : lay.objects)
            if (o.scene_index != 0) {
                o.attr_code = first->attr_code;
                break;
            }
    }
    return lay;
}

inline Tensor render(const Layout& lay, const SynthConfig& cfg, Rng& rng) {
    Tensor image({3, cfg.image_size, cfg.image_size});
    image.fill_(0.05);
    for (const SceneRegion& r : lay.scenes)
        fill_rect(image, r.x0, r.y0, r.x1, r.y1, scene_palette()[static_cast<std::size_t>(r.scene_code)]);
    for (const SynthObject& o : lay.objects)
        fill_rect(image, o.x0, o.y0, o.x1, o.y1, attr_palette()[static_cast<std::size_t>(o.attr_code)]);
    if (cfg.noise_sigma > 0.0)
        for (auto& v : image.data) v += rng.normal() * cfg.noise_sigma;
    return image;
}

inline std::uint64_t layout_hash(const Layout& lay) {
    std::string s;
    for (const SceneRegion& r : lay.scenes)
        s += std::to_string(r.x0) + "," + std::to_string(r.y0) + "," + std::to_string(r.x1) + "," +
             std::to_string(r.y1) + ":" + std::to_string(r.scene_code) + ";";
    s += "|";
    for (const SynthObject& o : lay.objects)
        s += std::to_string(o.x0) + "," + std::to_string(o.y0) + "," + std::to_string(o.x1) + "," +
             std::to_string(o.y1) + ":" + std::to_string(o.attr_code) + "@" + std::to_string(o.scene_index) + ";";
    return fnv1a(s.data(), s.size());
}

inline Tensor rect_mask(int image_size, int x0, int y0, int x1, int y1) {
    Tensor m({image_size, image_size});
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) m.data[static_cast<std::size_t>(y) * image_size + x] = 1.0;
    return m;
}

} // namespace detail

inline SynthScene generate_scene(std::uint64_t seed, const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    detail::Layout lay = detail::generate_layout(rng, cfg);
    SynthScene scene;
    scene.scenes = lay.scenes;
    scene.objects = lay.objects;
    scene.image = detail::render(lay, cfg, rng);
    return scene;
}

inline SynthSample generate_sample(std::uint64_t seed, const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    detail::Layout lay = detail::generate_layout(rng, cfg);

    // candidates: objects whose attribute also appears in a different scene
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < lay.objects.size(); ++i)
        for (std::size_t j = 0; j < lay.objects.size(); ++j)
            if (i != j && lay.objects[i].attr_code == lay.objects[j].attr_code &&
                lay.objects[i].scene_index != lay.objects[j].scene_index) {
                candidates.push_back(i);
                break;
            }
    if (candidates.empty()) throw GenerationError("layout lost its cross-scene attribute collision");
    const std::size_t ti = candidates[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(candidates.size())))];
    SynthObject& target = lay.objects[ti];

    // make the (scene, attribute) pair unique inside the target scene
    for (std::size_t i = 0; i < lay.objects.size(); ++i) {
        SynthObject& o = lay.objects[i];
        if (i != ti && o.scene_index == target.scene_index && o.attr_code == target.attr_code) {
            int alt = rng.uniform_int(cfg.num_attr_codes - 1);
            if (alt >= target.attr_code) ++alt;
            o.attr_code = alt;
        }
    }

    SynthSample sample;
    sample.seed = seed;
    sample.image = detail::render(lay, cfg, rng);
    sample.target = target;
    sample.target_scene = lay.scenes[static_cast<std::size_t>(target.scene_index)];
    sample.scene_code = sample.target_scene.scene_code;
    sample.attr_code = target.attr_code;
    sample.scene_word = "scene" + std::to_string(sample.scene_code);
    sample.attr_word = "attr" + std::to_string(sample.attr_code);
    sample.gt_mask = detail::rect_mask(cfg.image_size, target.x0, target.y0, target.x1, target.y1);
    sample.scene_mask = detail::rect_mask(cfg.image_size, sample.target_scene.x0, sample.target_scene.y0,
                                          sample.target_scene.x1, sample.target_scene.y1);
    sample.scenes = lay.scenes;
    sample.objects = lay.objects;
    sample.layout_hash = detail::layout_hash(lay);
    return sample;
}

// QA exemplars phrased over the task vocabulary, answers ordered scene word
// before attribute word. Plain text only; no special tokens, no image ids.
inline ContextLibrary context_library_for_task(const SynthConfig& cfg) {
    cfg.validate();
    return default_library(cfg.num_scene_codes, cfg.num_attr_codes);
}

struct ManifestEntry {
    std::string id;
    std::string split;  // "train" or "val"
    std::string image;
    std::string gt_mask;
    std::string scene_mask;
    std::string meta;
    std::string query;  // "sceneI attrJ"
    std::uint64_t layout_hash = 0;
    std::uint64_t seed = 0;
};

struct Manifest {
    std::uint64_t seed = 0;
    int n = 0;
    SynthConfig config;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> split(const std::string& name) const {
        std::vector<ManifestEntry> out;
        for (const ManifestEntry& e : entries)
            if (e.split == name) out.push_back(e);
        return out;
    }
};

namespace detail {

inline nlohmann::json config_to_json(const SynthConfig& c) {
    return nlohmann::json{{"image_size", c.image_size},
                          {"min_scenes", c.min_scenes},
                          {"max_scenes", c.max_scenes},
                          {"min_objects", c.min_objects},
                          {"max_objects", c.max_objects},
                          {"scene_min_side", c.scene_min_side},
                          {"scene_max_side", c.scene_max_side},
                          {"object_min_side", c.object_min_side},
                          {"object_max_side", c.object_max_side},
                          {"num_scene_codes", c.num_scene_codes},
                          {"num_attr_codes", c.num_attr_codes},
                          {"noise_sigma", c.noise_sigma},
                          {"train_fraction", c.train_fraction},
                          {"max_retries", c.max_retries}};
}

inline SynthConfig config_from_json(const nlohmann::json& j) {
    SynthConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.min_scenes = j.at("min_scenes").get<int>();
    c.max_scenes = j.at("max_scenes").get<int>();
    c.min_objects = j.at("min_objects").get<int>();
    c.max_objects = j.at("max_objects").get<int>();
    c.scene_min_side = j.at("scene_min_side").get<int>();
    c.scene_max_side = j.at("scene_max_side").get<int>();
    c.object_min_side = j.at("object_min_side").get<int>();
    c.object_max_side = j.at("object_max_side").get<int>();
    c.num_scene_codes = j.at("num_scene_codes").get<int>();
    c.num_attr_codes = j.at("num_attr_codes").get<int>();
    c.noise_sigma = j.at("noise_sigma").get<Scalar>();
    c.train_fraction = j.at("train_fraction").get<Scalar>();
    c.max_retries = j.at("max_retries").get<int>();
    return c;
}

inline std::string sample_id(int i) {
    std::string s = std::to_string(i);
    return std::string(6 - std::min<std::size_t>(6, s.size()), '0') + s;
}

} // namespace detail

inline Manifest generate_dataset(std::uint64_t seed, int n, const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    if (n < 1) throw ConfigError("generate_dataset: n must be positive");
    std::filesystem::create_directories(out_dir);

    const int n_train = static_cast<int>(static_cast<Scalar>(n) * cfg.train_fraction + 0.5);
    Manifest man;
    man.seed = seed;
    man.n = n;
    man.config = cfg;

    std::set<std::pair<std::uint64_t, std::string>> seen;  // (layout hash, query)
    for (int i = 0; i < n; ++i) {
        SynthSample sample = generate_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), cfg);
        for (int retry = 1; seen.count({sample.layout_hash, sample.scene_word + " " + sample.attr_word}) &&
                            retry <= cfg.max_retries;
             ++retry)
            sample = generate_sample(mix_seed(seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(retry)), cfg);
        const std::string query = sample.scene_word + " " + sample.attr_word;
        if (seen.count({sample.layout_hash, query}))
            throw GenerationError("could not produce a fresh layout for sample " + std::to_string(i));
        seen.insert({sample.layout_hash, query});

        ManifestEntry e;
        e.id = detail::sample_id(i);
        e.split = i < n_train ? "train" : "val";
        e.image = e.id + "_image.ppm";
        e.gt_mask = e.id + "_gt.pgm";
        e.scene_mask = e.id + "_scene.pgm";
        e.meta = e.id + "_meta.json";
        e.query = query;
        e.layout_hash = sample.layout_hash;
        e.seed = sample.seed;

        write_ppm(out_dir + "/" + e.image, sample.image);
        write_pgm(out_dir + "/" + e.gt_mask, sample.gt_mask);
        write_pgm(out_dir + "/" + e.scene_mask, sample.scene_mask);
        nlohmann::json meta{{"id", e.id},
                            {"query", query},
                            {"scene_word", sample.scene_word},
                            {"attr_word", sample.attr_word},
                            {"scene_code", sample.scene_code},
                            {"attr_code", sample.attr_code},
                            {"target_box", {sample.target.x0, sample.target.y0, sample.target.x1, sample.target.y1}},
                            {"scene_box",
                             {sample.target_scene.x0, sample.target_scene.y0, sample.target_scene.x1,
                              sample.target_scene.y1}},
                            {"layout_hash", e.layout_hash},
                            {"seed", e.seed}};
        write_text_file(out_dir + "/" + e.meta, meta.dump(2) + "\n");
        man.entries.push_back(std::move(e));
    }

    nlohmann::json entries = nlohmann::json::array();
    for (const ManifestEntry& e : man.entries)
        entries.push_back(nlohmann::json{{"id", e.id},
                                         {"split", e.split},
                                         {"image", e.image},
                                         {"gt_mask", e.gt_mask},
                                         {"scene_mask", e.scene_mask},
                                         {"meta", e.meta},
                                         {"query", e.query},
                                         {"layout_hash", e.layout_hash},
                                         {"seed", e.seed}});
    nlohmann::json root{{"seed", seed}, {"n", n}, {"config", detail::config_to_json(cfg)}, {"samples", entries}};
    write_text_file(out_dir + "/manifest.json", root.dump(2) + "\n");
    return man;
}

inline Manifest load_manifest(const std::string& dataset_dir) {
    const std::string path = dataset_dir + "/manifest.json";
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    Manifest man;
    try {
        man.seed = root.at("seed").get<std::uint64_t>();
        man.n = root.at("n").get<int>();
        man.config = detail::config_from_json(root.at("config"));
        for (const nlohmann::json& j : root.at("samples")) {
            ManifestEntry e;
            e.id = j.at("id").get<std::string>();
            e.split = j.at("split").get<std::string>();
            e.image = j.at("image").get<std::string>();
            e.gt_mask = j.at("gt_mask").get<std::string>();
            e.scene_mask = j.at("scene_mask").get<std::string>();
            e.meta = j.at("meta").get<std::string>();
            e.query = j.at("query").get<std::string>();
            e.layout_hash = j.at("layout_hash").get<std::uint64_t>();
            e.seed = j.at("seed").get<std::uint64_t>();
            man.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    return man;
}

// What the training/eval loops consume: pixels plus the query words.
struct LoadedSample {
    Tensor image;
    Tensor gt_mask;
    Tensor scene_mask;
    std::string scene_word;
    std::string attr_word;
};

inline LoadedSample load_sample(const std::string& dataset_dir, const ManifestEntry& e) {
    LoadedSample s;
    s.image = read_ppm(dataset_dir + "/" + e.image);
    s.gt_mask = read_pgm(dataset_dir + "/" + e.gt_mask);
    s.scene_mask = read_pgm(dataset_dir + "/" + e.scene_mask);
    const auto space = e.query.find(' ');
    if (space == std::string::npos) throw ParseError("manifest query '" + e.query + "' is not two words");
    s.scene_word = e.query.substr(0, space);
    s.attr_word = e.query.substr(space + 1);
    return s;
}

} // namespace cores
