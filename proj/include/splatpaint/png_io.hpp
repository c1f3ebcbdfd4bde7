#pragma once

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatpaint/image.hpp"

namespace splatpaint {

struct PngError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t quantize8(double v) {
    const double q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
    return static_cast<std::uint8_t>(q);
}

}  // namespace detail

/// Writes [0,1] doubles as an 8-bit PNG. 1 channel -> gray, 3 -> RGB.
inline void write_png(const std::string& path, const ImageD& img) {
    if (img.channels() != 1 && img.channels() != 3)
        throw PngError("write_png: only 1 or 3 channels supported");
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw PngError("write_png: cannot open " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw PngError("write_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw PngError("write_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw PngError("write_png: libpng failure writing " + path);
    }
    png_init_io(png, fp.get());
    const int color = img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, img.width(), img.height(), 8, color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width()) * img.channels());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < img.channels(); ++c)
                row[static_cast<std::size_t>(x) * img.channels() + c] =
                    detail::quantize8(img.at(y, x, c));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline void write_png_mask(const std::string& path, const Mask& m) {
    ImageD img(m.height(), m.width(), 1);
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) img.at(y, x) = m.at(y, x) ? 1.0 : 0.0;
    write_png(path, img);
}

/// Reads a PNG into [0,1] doubles. Gray/gray-alpha load as 1 channel,
/// RGB/RGBA as 3 (alpha dropped). 16-bit inputs keep full precision.
inline ImageD read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw PngError("read_png: cannot open " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw PngError("read_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw PngError("read_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw PngError("read_png: libpng failure reading " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);

    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (depth == 16) png_set_swap(png);  // little-endian samples in memory
    png_read_update_info(png, info);

    const int out_channels = png_get_channels(png, info);
    const int out_depth = png_get_bit_depth(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> row(stride);

    const bool has_alpha = out_channels == 2 || out_channels == 4;
    const int keep = (out_channels >= 3) ? 3 : 1;
    ImageD img(static_cast<int>(h), static_cast<int>(w), keep);
    const double scale = out_depth == 16 ? 65535.0 : 255.0;
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x) {
            for (int c = 0; c < keep; ++c) {
                double v;
                if (out_depth == 16) {
                    const std::size_t i = (static_cast<std::size_t>(x) * out_channels + c) * 2;
                    v = static_cast<double>(row[i] | (row[i + 1] << 8));
                } else {
                    v = row[static_cast<std::size_t>(x) * out_channels + c];
                }
                img.at(static_cast<int>(y), static_cast<int>(x), c) = v / scale;
            }
        }
    }
    (void)has_alpha;
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline Mask read_png_mask(const std::string& path) {
    const ImageD img = read_png(path);
    Mask m(img.height(), img.width(), 1, 0);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) m.at(y, x) = img.at(y, x, 0) > 0.5 ? 1 : 0;
    return m;
}

/// Scalar map -> blue..red heatmap PNG, normalized to the map's max.
inline void write_png_heatmap(const std::string& path, const ImageD& map) {
    if (map.channels() != 1) throw PngError("write_png_heatmap: expected 1 channel");
    double vmax = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i) vmax = std::max(vmax, map.data()[i]);
    if (vmax <= 0.0) vmax = 1.0;
    ImageD rgb(map.height(), map.width(), 3);
    for (int y = 0; y < map.height(); ++y)
        for (int x = 0; x < map.width(); ++x) {
            const double t = std::clamp(map.at(y, x) / vmax, 0.0, 1.0);
            rgb.at(y, x, 0) = t;
            rgb.at(y, x, 1) = 4.0 * t * (1.0 - t);
            rgb.at(y, x, 2) = 1.0 - t;
        }
    write_png(path, rgb);
}

}  // namespace splatpaint
