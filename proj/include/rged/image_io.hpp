#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rged/tensor.hpp"

namespace rged {

/// Binary (h x w) mask, row-major, values 0 or 1.
struct BitMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;

    BitMask() = default;
    BitMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), bits(h * w, fill) {}

    std::uint8_t operator()(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
    std::uint8_t& operator()(std::size_t y, std::size_t x) { return bits[y * width + x]; }

    std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
    double area() const { return bits.empty() ? 0.0 : static_cast<double>(count()) / static_cast<double>(bits.size()); }

    /// As an (h, w) tensor of 0.0 / 1.0.
    Tensor to_tensor() const {
        std::vector<double> v(bits.begin(), bits.end());
        return Tensor(Shape{height, width}, std::move(v));
    }

    friend bool operator==(const BitMask&, const BitMask&) = default;
};

inline std::uint8_t quantize_channel(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline void require_rgb(const Tensor& img) {
    if (img.rank() != 3 || img.dim(2) != 3) throw DimensionError("expected an (h, w, 3) image, got " + shape_str(img.shape()));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
inline std::string pnm_token(std::string_view bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const char c = bytes[pos];
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) tok += bytes[pos++];
    if (tok.empty()) throw DataError("truncated PNM header");
    return tok;
}

inline std::size_t pnm_number(std::string_view bytes, std::size_t& pos) {
    const std::string tok = pnm_token(bytes, pos);
    std::size_t value = 0;
    for (char c : tok) {
        if (c < '0' || c > '9') throw DataError("malformed PNM header field '" + tok + "'");
        value = value * 10 + static_cast<std::size_t>(c - '0');
    }
    return value;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

} // namespace detail

/// Binary PPM (P6, maxval 255). Channels are clamped to [0, 1] and rounded.
inline std::string encode_ppm(const Tensor& img) {
    detail::require_rgb(img);
    const std::size_t h = img.dim(0), w = img.dim(1);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + h * w * 3);
    for (double v : img.data()) out.push_back(static_cast<char>(quantize_channel(v)));
    return out;
}

inline Tensor decode_ppm(std::string_view bytes) {
    std::size_t pos = 0;
    if (detail::pnm_token(bytes, pos) != "P6") throw DataError("not a binary PPM (P6) image");
    const std::size_t w = detail::pnm_number(bytes, pos);
    const std::size_t h = detail::pnm_number(bytes, pos);
    const std::size_t maxval = detail::pnm_number(bytes, pos);
    if (w == 0 || h == 0) throw DataError("PPM has zero extent");
    if (maxval == 0 || maxval > 255) throw DataError("only 8-bit PPM images are supported");
    ++pos; // single whitespace byte after maxval
    if (bytes.size() != pos + w * h * 3) throw DataError("PPM payload length does not match its header");
    std::vector<double> px(w * h * 3);
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = static_cast<double>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<double>(maxval);
    }
    return Tensor(Shape{h, w, 3}, std::move(px));
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& img) { detail::write_file(path, encode_ppm(img)); }
inline Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(detail::read_file(path)); }

/// Raw PBM (P4): rows padded to whole bytes, most significant bit first,
/// 1 = set.
inline std::string encode_pbm(const BitMask& mask) {
    std::string out = "P4\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n";
    const std::size_t row_bytes = (mask.width + 7) / 8;
    for (std::size_t y = 0; y < mask.height; ++y) {
        for (std::size_t b = 0; b < row_bytes; ++b) {
            unsigned char byte = 0;
            for (std::size_t k = 0; k < 8; ++k) {
                const std::size_t x = b * 8 + k;
                if (x < mask.width && mask(y, x)) byte |= static_cast<unsigned char>(0x80u >> k);
            }
            out.push_back(static_cast<char>(byte));
        }
    }
    return out;
}

inline BitMask decode_pbm(std::string_view bytes) {
    std::size_t pos = 0;
    if (detail::pnm_token(bytes, pos) != "P4") throw DataError("not a raw PBM (P4) bitmap");
    const std::size_t w = detail::pnm_number(bytes, pos);
    const std::size_t h = detail::pnm_number(bytes, pos);
    ++pos;
    const std::size_t row_bytes = (w + 7) / 8;
    if (bytes.size() != pos + row_bytes * h) throw DataError("PBM payload length does not match its header");
    BitMask mask(h, w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const auto byte = static_cast<unsigned char>(bytes[pos + y * row_bytes + x / 8]);
            mask(y, x) = (byte >> (7 - x % 8)) & 1u;
        }
    return mask;
}

inline void write_pbm(const std::filesystem::path& path, const BitMask& mask) { detail::write_file(path, encode_pbm(mask)); }
inline BitMask read_pbm(const std::filesystem::path& path) { return decode_pbm(detail::read_file(path)); }

/// Source image with a 50% red tint over masked pixels.
inline Tensor mask_overlay(const Tensor& img, const BitMask& mask) {
    detail::require_rgb(img);
    if (mask.height != img.dim(0) || mask.width != img.dim(1)) throw DimensionError("overlay mask extent differs from image");
    std::vector<double> px(img.data().begin(), img.data().end());
    for (std::size_t p = 0; p < mask.bits.size(); ++p) {
        if (!mask.bits[p]) continue;
        px[p * 3 + 0] = 0.5 * px[p * 3 + 0] + 0.5;
        px[p * 3 + 1] = 0.5 * px[p * 3 + 1];
        px[p * 3 + 2] = 0.5 * px[p * 3 + 2];
    }
    return Tensor(img.shape(), std::move(px));
}

} // namespace rged
