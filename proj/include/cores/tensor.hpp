#pragma once

// Dense row-major tensor of doubles plus the deterministic RNG and hashing
// helpers used across the library. Everything is value-semantic; shapes are
// small vectors of ints.

#include <cstdint>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cores {

using Scalar = double;

struct Tensor {
    std::vector<int> shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, Scalar v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    // 2-D accessors; rows() / cols() assume a matrix view [R, C].
    int rows() const { return shape.at(0); }
    int cols() const { return shape.size() == 1 ? 1 : shape.at(1); }

    Scalar& at(int i) { return data[static_cast<std::size_t>(i)]; }
    Scalar at(int i) const { return data[static_cast<std::size_t>(i)]; }
    Scalar& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    Scalar at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    Scalar* ptr() { return data.data(); }
    const Scalar* ptr() const { return data.data(); }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != size()) throw std::invalid_argument("tensor: reshape count mismatch");
        return Tensor(std::move(s), data);
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void add_(const Tensor& o) {
        if (!same_shape(o)) throw std::invalid_argument("tensor: add_ shape mismatch");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
    }
    void scale_(Scalar s) {
        for (auto& v : data) v *= s;
    }
    void fill_(Scalar s) { std::fill(data.begin(), data.end(), s); }

    Scalar sum() const {
        Scalar acc = 0;
        for (Scalar v : data) acc += v;
        return acc;
    }
    Scalar norm2() const {
        Scalar acc = 0;
        for (Scalar v : data) acc += v * v;
        return std::sqrt(acc);
    }
    Scalar max_abs() const {
        Scalar m = 0;
        for (Scalar v : data) m = std::max(m, std::abs(v));
        return m;
    }
    bool all_finite() const {
        for (Scalar v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit transforms so streams are
// stable across standard library implementations.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and stream indices.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    splitmix64(s);
    return splitmix64(s);
}
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : state_(seed) {
        // Warm up so small seeds decorrelate.
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1).
    Scalar uniform() { return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53; }

    Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("rng: uniform_int needs n > 0");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Standard normal via Box-Muller (no cached spare; keeps streams simple).
    Scalar normal() {
        Scalar u1 = uniform();
        Scalar u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    Scalar normal(Scalar mean, Scalar stddev) { return mean + stddev * normal(); }

    void fill_normal(Tensor& t, Scalar mean, Scalar stddev) {
        for (auto& v : t.data) v = normal(mean, stddev);
    }
    void fill_uniform(Tensor& t, Scalar lo, Scalar hi) {
        for (auto& v : t.data) v = uniform(lo, hi);
    }

  private:
    std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// FNV-1a hashing, used for checksums and layout fingerprints.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_tensor(const Tensor& t) {
    std::uint64_t h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int));
    return fnv1a(t.data.data(), t.data.size() * sizeof(Scalar), h);
}

} // namespace cores
