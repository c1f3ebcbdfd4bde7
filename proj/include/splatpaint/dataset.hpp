#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

#include "splatpaint/png_io.hpp"
#include "splatpaint/splr_io.hpp"
#include "splatpaint/synthetic.hpp"

namespace splatpaint {

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dataset directory layout:
//   cameras.txt
//   view_000/{train.png, truth.png, depth.splr, mask.png, segments.png}
//   view_001/...
// cameras.txt is line-oriented text:
//   splatpaint-cameras 1
//   count <N>
//   segments <K>
//   view <id> <W> <H> <fx> <fy> <cx> <cy> <r00..r22 row-major> <tx> <ty> <tz>
// segments.png stores the per-pixel label in the red channel (0 = unlabeled).

namespace detail {

inline std::string view_dir_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "view_%03d", i);
    return buf;
}

}  // namespace detail

inline void write_dataset(const SyntheticDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream cams(fs::path(dir) / "cameras.txt");
    if (!cams) throw DatasetError("write_dataset: cannot open cameras.txt in " + dir);
    cams << "splatpaint-cameras 1\n";
    cams << "count " << ds.views.size() << "\n";
    cams << "segments " << ds.segment_count << "\n";
    cams << std::setprecision(17);
    for (std::size_t i = 0; i < ds.views.size(); ++i) {
        const Camera& c = ds.views[i].camera;
        cams << "view " << i << " " << c.width << " " << c.height << " " << c.fx << " "
             << c.fy << " " << c.cx << " " << c.cy;
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) cams << " " << c.rot(r, k);
        for (int k = 0; k < 3; ++k) cams << " " << c.trans[k];
        cams << "\n";
    }
    cams.close();

    for (std::size_t i = 0; i < ds.views.size(); ++i) {
        const auto& v = ds.views[i];
        const fs::path vd = fs::path(dir) / detail::view_dir_name(static_cast<int>(i));
        fs::create_directories(vd);
        write_png((vd / "train.png").string(), v.train_image);
        write_png((vd / "truth.png").string(), v.truth_image);
        write_splr((vd / "depth.splr").string(), v.truth_depth);
        write_png_mask((vd / "mask.png").string(), v.inpaint_mask);
        ImageD seg_rgb(v.segments.height(), v.segments.width(), 3, 0.0);
        for (int y = 0; y < v.segments.height(); ++y)
            for (int x = 0; x < v.segments.width(); ++x)
                seg_rgb.at(y, x, 0) = v.segments.at(y, x) / 255.0;
        write_png((vd / "segments.png").string(), seg_rgb);
    }
}

inline SyntheticDataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path root(dir);
    if (!fs::exists(root / "cameras.txt"))
        throw DatasetError("load_dataset: no cameras.txt under " + dir);
    std::ifstream cams(root / "cameras.txt");
    std::string magic;
    int version = 0;
    cams >> magic >> version;
    if (magic != "splatpaint-cameras" || version != 1)
        throw DatasetError("load_dataset: unrecognized cameras.txt header");
    std::string key;
    std::size_t count = 0;
    int segment_count = 0;
    cams >> key >> count;
    if (key != "count") throw DatasetError("load_dataset: expected count line");
    cams >> key >> segment_count;
    if (key != "segments") throw DatasetError("load_dataset: expected segments line");

    SyntheticDataset ds;
    ds.segment_count = segment_count;
    ds.views.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        int id = 0;
        Camera c;
        cams >> key >> id >> c.width >> c.height >> c.fx >> c.fy >> c.cx >> c.cy;
        if (key != "view" || !cams)
            throw DatasetError("load_dataset: malformed view line in cameras.txt");
        for (int r = 0; r < 3; ++r)
            for (int k = 0; k < 3; ++k) cams >> c.rot(r, k);
        for (int k = 0; k < 3; ++k) cams >> c.trans[k];
        if (id < 0 || static_cast<std::size_t>(id) >= count)
            throw DatasetError("load_dataset: view id out of range");
        ds.views[id].camera = c;
    }

    for (std::size_t i = 0; i < count; ++i) {
        auto& v = ds.views[i];
        const fs::path vd = root / detail::view_dir_name(static_cast<int>(i));
        try {
            v.train_image = read_png((vd / "train.png").string());
            v.truth_image = read_png((vd / "truth.png").string());
            v.truth_depth = read_splr((vd / "depth.splr").string());
            v.inpaint_mask = read_png_mask((vd / "mask.png").string());
            const ImageD seg_rgb = read_png((vd / "segments.png").string());
            v.segments =
                Image<std::uint8_t>(seg_rgb.height(), seg_rgb.width(), 1, 0);
            for (int y = 0; y < seg_rgb.height(); ++y)
                for (int x = 0; x < seg_rgb.width(); ++x)
                    v.segments.at(y, x) = static_cast<std::uint8_t>(
                        std::lround(seg_rgb.at(y, x, 0) * 255.0));
        } catch (const std::exception& e) {
            throw DatasetError("load_dataset: view " + std::to_string(i) + ": " + e.what());
        }
        if (v.truth_depth.height() != v.camera.height ||
            v.truth_depth.width() != v.camera.width)
            throw DatasetError("load_dataset: resolution mismatch in view " +
                               std::to_string(i));
    }
    return ds;
}

}  // namespace splatpaint
