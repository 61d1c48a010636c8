#pragma once

#include "cores/errors.hpp"
#include "cores/tensor.hpp"

#include <cctype>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cores {

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << content;
    if (!out) throw IoError("write failed for " + path);
}

inline std::vector<std::uint8_t> read_binary_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void write_binary_file(const std::string& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw IoError("write failed for " + path);
}

namespace detail {

inline std::uint8_t quantize_byte(Scalar v) {
    const Scalar scaled = v * 255.0 + 0.5;
    if (scaled <= 0.0) return 0;
    if (scaled >= 255.0) return 255;
    return static_cast<std::uint8_t>(scaled);
}

// Reads one whitespace-delimited token, skipping '#' comment lines.
inline std::string next_pnm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

} // namespace detail

// Binary portable pixmap (P6, maxval 255) from a [3, H, W] tensor in [0, 1].
inline void write_ppm(const std::string& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_ppm: expected [3, H, W]");
    const int H = image.dim(1), W = image.dim(2);
    std::string payload = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    payload.reserve(payload.size() + static_cast<std::size_t>(3) * H * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                payload.push_back(static_cast<char>(
                    detail::quantize_byte(image.data[(static_cast<std::size_t>(c) * H + y) * W + x])));
    write_binary_file(path, payload.data(), payload.size());
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (detail::next_pnm_token(in) != "P6") throw ParseError(path + ": not a binary pixmap");
    const int W = std::stoi(detail::next_pnm_token(in));
    const int H = std::stoi(detail::next_pnm_token(in));
    const int maxval = std::stoi(detail::next_pnm_token(in));
    if (W < 1 || H < 1 || maxval != 255) throw ParseError(path + ": unsupported pixmap header");
    std::vector<char> bytes(static_cast<std::size_t>(3) * H * W);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError(path + ": truncated pixel data");
    Tensor image({3, H, W});
    std::size_t k = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < 3; ++c)
                image.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                    static_cast<Scalar>(static_cast<std::uint8_t>(bytes[k++])) / 255.0;
    return image;
}

// Binary portable graymap (P5) from a 0/1 mask tensor [H, W]; ones become 255.
inline void write_pgm(const std::string& path, const Tensor& mask) {
    if (mask.ndim() != 2) throw std::invalid_argument("write_pgm: expected [H, W]");
    const int H = mask.dim(0), W = mask.dim(1);
    std::string payload = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    payload.reserve(payload.size() + static_cast<std::size_t>(H) * W);
    for (std::int64_t i = 0; i < mask.size(); ++i)
        payload.push_back(static_cast<char>(mask.data[i] != 0.0 ? 255 : 0));
    write_binary_file(path, payload.data(), payload.size());
}

inline Tensor read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (detail::next_pnm_token(in) != "P5") throw ParseError(path + ": not a binary graymap");
    const int W = std::stoi(detail::next_pnm_token(in));
    const int H = std::stoi(detail::next_pnm_token(in));
    const int maxval = std::stoi(detail::next_pnm_token(in));
    if (W < 1 || H < 1 || maxval != 255) throw ParseError(path + ": unsupported graymap header");
    std::vector<char> bytes(static_cast<std::size_t>(H) * W);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ParseError(path + ": truncated pixel data");
    Tensor mask({H, W});
    for (std::int64_t i = 0; i < mask.size(); ++i)
        mask.data[i] = static_cast<std::uint8_t>(bytes[static_cast<std::size_t>(i)]) > 127 ? 1.0 : 0.0;
    return mask;
}

} // namespace cores
