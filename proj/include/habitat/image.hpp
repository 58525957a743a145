#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "habitat/common.hpp"

namespace habitat {

/// 8-bit RGB image, the storage format for everything on disk. Grayscale
/// sources are replicated to three channels at decode time.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb; // row-major, 3 bytes per pixel

    std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Working-precision image used by the augmentation pipeline and encoders.
/// Values are nominally in [0,1].
struct FloatImage {
    int width = 0;
    int height = 0;
    std::vector<double> rgb;

    FloatImage() = default;
    FloatImage(int w, int h, double fill = 0.0) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

    double& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

inline FloatImage to_float(const Image& img) {
    FloatImage out(img.width, img.height);
    for (std::size_t i = 0; i < img.rgb.size(); ++i) out.rgb[i] = img.rgb[i] / 255.0;
    return out;
}

inline Image to_bytes(const FloatImage& img) {
    Image out;
    out.width = img.width;
    out.height = img.height;
    out.rgb.resize(img.rgb.size());
    for (std::size_t i = 0; i < img.rgb.size(); ++i) {
        const double v = std::clamp(img.rgb[i], 0.0, 1.0);
        out.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return out;
}

namespace detail {

inline void skip_pnm_space(std::istream& in) {
    int c = in.peek();
    while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else {
            in.get();
        }
        c = in.peek();
    }
}

inline int read_pnm_int(std::istream& in) {
    skip_pnm_space(in);
    int v = 0;
    if (!(in >> v)) fail("image: malformed PNM header");
    return v;
}

} // namespace detail

/// Reads a binary PPM (P6) or PGM (P5) file into 8-bit RGB.
inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("image: cannot open " + path.string());
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    const bool gray = (m0 == 'P' && m1 == '5');
    if (!gray && !(m0 == 'P' && m1 == '6')) fail("image: unsupported format in " + path.string() + " (want P5/P6)");
    const int w = detail::read_pnm_int(in);
    const int h = detail::read_pnm_int(in);
    const int maxval = detail::read_pnm_int(in);
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) fail("image: bad PNM dimensions in " + path.string());
    in.get(); // single whitespace after header
    const std::size_t n = static_cast<std::size_t>(w) * h;
    std::vector<char> raw(gray ? n : n * 3);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) fail("image: truncated pixel data in " + path.string());
    Image img;
    img.width = w;
    img.height = h;
    img.rgb.resize(n * 3);
    if (gray) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto v = static_cast<std::uint8_t>(raw[i]);
            img.rgb[i * 3 + 0] = v;
            img.rgb[i * 3 + 1] = v;
            img.rgb[i * 3 + 2] = v;
        }
    } else {
        for (std::size_t i = 0; i < raw.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(raw[i]);
    }
    return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("image: cannot write " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!out) fail("image: write failed for " + path.string());
}

/// Bilinear sample with edge replication outside the image bounds.
inline void sample_bilinear(const FloatImage& img, double x, double y, double* out3) {
    const double cx = std::clamp(x, 0.0, static_cast<double>(img.width - 1));
    const double cy = std::clamp(y, 0.0, static_cast<double>(img.height - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, img.width - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fx = cx - x0;
    const double fy = cy - y0;
    for (int c = 0; c < 3; ++c) {
        const double top = img.at(x0, y0, c) * (1.0 - fx) + img.at(x1, y0, c) * fx;
        const double bot = img.at(x0, y1, c) * (1.0 - fx) + img.at(x1, y1, c) * fx;
        out3[c] = top * (1.0 - fy) + bot * fy;
    }
}

/// Bilinear resize. Uses the align-corners-off pixel-center convention, so a
/// same-size resize is an exact copy.
inline FloatImage resize_bilinear(const FloatImage& img, int out_w, int out_h) {
    if (out_w <= 0 || out_h <= 0) fail("image: resize to non-positive size");
    if (img.width == out_w && img.height == out_h) return img;
    FloatImage out(out_w, out_h);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    double px[3];
    for (int y = 0; y < out_h; ++y) {
        const double srcy = (y + 0.5) * sy - 0.5;
        for (int x = 0; x < out_w; ++x) {
            const double srcx = (x + 0.5) * sx - 0.5;
            sample_bilinear(img, srcx, srcy, px);
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = px[c];
        }
    }
    return out;
}

inline FloatImage load_float_image(const std::filesystem::path& path) { return to_float(read_ppm(path)); }

} // namespace habitat
