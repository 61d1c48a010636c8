#pragma once

// Unified binary checkpoint: one JSON metadata blob (configs, step counter)
// followed by every registered parameter with its frozen flag, then named
// extra tensors (optimizer moments). Loading overwrites an already
// constructed store by name so registration order never matters on disk.

#include "cores/errors.hpp"
#include "cores/params.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace cores {

namespace detail {

constexpr char kCheckpointMagic[8] = {'C', 'O', 'R', 'E', 'S', 'C', 'K', '1'};

inline void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint64_t get_u64(std::istream& in, const std::string& path) {
    std::uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw ParseError(path + ": truncated checkpoint");
    return v;
}

inline void put_blob(std::ostream& out, const std::string& name, const Tensor& t, bool frozen) {
    put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(frozen ? 1 : 0);
    put_u64(out, t.shape.size());
    for (int d : t.shape) put_u64(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(Scalar)));
}

struct Blob {
    std::string name;
    Tensor value;
    bool frozen = false;
};

inline Blob get_blob(std::istream& in, const std::string& path) {
    Blob b;
    b.name.resize(get_u64(in, path));
    if (!in.read(b.name.data(), static_cast<std::streamsize>(b.name.size()))) throw ParseError(path + ": truncated name");
    const int flag = in.get();
    if (flag != 0 && flag != 1) throw ParseError(path + ": bad frozen flag for '" + b.name + "'");
    b.frozen = flag == 1;
    std::vector<int> shape(get_u64(in, path));
    for (auto& d : shape) d = static_cast<int>(get_u64(in, path));
    b.value = shape.empty() ? Tensor::scalar(0.0) : Tensor(std::move(shape));
    if (!in.read(reinterpret_cast<char*>(b.value.data.data()),
                 static_cast<std::streamsize>(b.value.data.size() * sizeof(Scalar))))
        throw ParseError(path + ": truncated data for '" + b.name + "'");
    return b;
}

} // namespace detail

inline void save_checkpoint(const std::string& path, const ParamStore& store, const nlohmann::json& meta,
                            const std::vector<std::pair<std::string, Tensor>>& extras = {}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(detail::kCheckpointMagic, 8);
    const std::string m = meta.dump();
    detail::put_u64(out, m.size());
    out.write(m.data(), static_cast<std::streamsize>(m.size()));
    detail::put_u64(out, static_cast<std::uint64_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) detail::put_blob(out, store.name(i), store.value(i), store.frozen(i));
    detail::put_u64(out, extras.size());
    for (const auto& [name, value] : extras) detail::put_blob(out, name, value, false);
    if (!out) throw IoError("write failed for " + path);
}

struct LoadedCheckpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> extras;
};

inline nlohmann::json read_checkpoint_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw ParseError(path + ": not a checkpoint file");
    std::string m(detail::get_u64(in, path), '\0');
    if (!in.read(m.data(), static_cast<std::streamsize>(m.size()))) throw ParseError(path + ": truncated metadata");
    try {
        return nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": metadata: " + e.what());
    }
}

// Overwrites the values of an already registered store. Every stored blob
// must match a registered parameter in name, shape, and frozen flag, and
// every registered parameter must be present.
inline LoadedCheckpoint load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        throw ParseError(path + ": not a checkpoint file");

    LoadedCheckpoint result;
    std::string m(detail::get_u64(in, path), '\0');
    if (!in.read(m.data(), static_cast<std::streamsize>(m.size()))) throw ParseError(path + ": truncated metadata");
    try {
        result.meta = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": metadata: " + e.what());
    }

    const std::uint64_t n = detail::get_u64(in, path);
    if (n != static_cast<std::uint64_t>(store.count()))
        throw ParseError(path + ": checkpoint has " + std::to_string(n) + " parameters, model registers " +
                         std::to_string(store.count()));
    for (std::uint64_t i = 0; i < n; ++i) {
        detail::Blob b = detail::get_blob(in, path);
        const ParamId id = store.find(b.name);
        if (store.value(id).shape != b.value.shape) throw ParseError(path + ": shape mismatch for '" + b.name + "'");
        if (store.frozen(id) != b.frozen) throw ParseError(path + ": frozen flag mismatch for '" + b.name + "'");
        store.value(id) = std::move(b.value);
    }

    const std::uint64_t e = detail::get_u64(in, path);
    for (std::uint64_t i = 0; i < e; ++i) {
        detail::Blob b = detail::get_blob(in, path);
        result.extras.emplace_back(std::move(b.name), std::move(b.value));
    }
    return result;
}

} // namespace cores
