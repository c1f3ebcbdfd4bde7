#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatpaint/image.hpp"

namespace splatpaint {

// SPLR: raw float raster. Little-endian: magic "SPLR", u32 height, u32 width,
// u32 channels, then height*width*channels float32 values, row-major,
// channel-interleaved.

struct SplrError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little,
              "raster/scene file I/O assumes a little-endian host");

inline void write_splr(const std::string& path, const ImageD& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw SplrError("write_splr: cannot open " + path);
    f.write("SPLR", 4);
    const std::uint32_t h = img.height(), w = img.width(), c = img.channels();
    f.write(reinterpret_cast<const char*>(&h), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(&c), 4);
    std::vector<float> buf(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) buf[i] = static_cast<float>(img.data()[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw SplrError("write_splr: write failed for " + path);
}

inline ImageD read_splr(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SplrError("read_splr: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPLR", 4) != 0)
        throw SplrError("read_splr: bad magic in " + path);
    std::uint32_t h = 0, w = 0, c = 0;
    f.read(reinterpret_cast<char*>(&h), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    f.read(reinterpret_cast<char*>(&c), 4);
    if (!f) throw SplrError("read_splr: truncated header in " + path);
    if (c == 0 || h > (1u << 20) || w > (1u << 20) || c > 4096)
        throw SplrError("read_splr: implausible dimensions in " + path);
    ImageD img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
    std::vector<float> buf(img.size());
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw SplrError("read_splr: truncated payload in " + path);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = buf[i];
    return img;
}

}  // namespace splatpaint
