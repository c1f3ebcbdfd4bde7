#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "splatpaint/scene.hpp"

namespace splatpaint {

// Scene file "SPLF", little-endian:
//   char[4]  magic "SPLF"
//   u32      version (currently 1)
//   u32      gaussian count
//   u8       sh-degree flag (0 or 1)
// then count fixed-size float32 records:
//   position[3] log_scale[3] rotation[4] color[3] (sh[9] if flag) opacity_logit feature[16]

struct SceneIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SceneHeaderError : SceneIoError {
    using SceneIoError::SceneIoError;
};
struct SceneVersionError : SceneIoError {
    using SceneIoError::SceneIoError;
};
struct SceneTruncatedError : SceneIoError {
    using SceneIoError::SceneIoError;
};

inline constexpr std::uint32_t kSceneFormatVersion = 1;
inline constexpr std::size_t kSceneHeaderBytes = 4 + 4 + 4 + 1;

inline std::size_t scene_record_floats(std::uint8_t sh_degree) {
    return 3 + 3 + 4 + 3 + (sh_degree == 1 ? kSh1Coeffs : 0) + 1 + kFeatureDim;
}
inline std::size_t scene_record_bytes(std::uint8_t sh_degree) {
    return scene_record_floats(sh_degree) * sizeof(float);
}

inline void save_scene(const Scene& scene, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw SceneIoError("save_scene: cannot open " + path);
    f.write("SPLF", 4);
    const std::uint32_t version = kSceneFormatVersion;
    const std::uint32_t count = static_cast<std::uint32_t>(scene.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&count), 4);
    f.put(static_cast<char>(scene.sh_degree));

    std::vector<float> rec(scene_record_floats(scene.sh_degree));
    for (const auto& g : scene.splats) {
        std::size_t i = 0;
        for (int k = 0; k < 3; ++k) rec[i++] = g.position[k];
        for (int k = 0; k < 3; ++k) rec[i++] = g.log_scale[k];
        for (int k = 0; k < 4; ++k) rec[i++] = g.rotation[k];
        for (int k = 0; k < 3; ++k) rec[i++] = g.color[k];
        if (scene.sh_degree == 1)
            for (int k = 0; k < kSh1Coeffs; ++k) rec[i++] = g.sh[k];
        rec[i++] = g.opacity_logit;
        for (int k = 0; k < kFeatureDim; ++k) rec[i++] = g.feature[k];
        f.write(reinterpret_cast<const char*>(rec.data()),
                static_cast<std::streamsize>(rec.size() * sizeof(float)));
    }
    if (!f) throw SceneIoError("save_scene: write failed for " + path);
}

inline Scene load_scene(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw SceneIoError("load_scene: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPLF", 4) != 0)
        throw SceneHeaderError("load_scene: bad magic in " + path);
    std::uint32_t version = 0, count = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&count), 4);
    const int sh_flag = f.get();
    if (!f || sh_flag == EOF) throw SceneHeaderError("load_scene: truncated header in " + path);
    if (version != kSceneFormatVersion)
        throw SceneVersionError("load_scene: unsupported version " + std::to_string(version));
    if (sh_flag != 0 && sh_flag != 1)
        throw SceneHeaderError("load_scene: bad sh-degree flag in " + path);

    Scene scene;
    scene.sh_degree = static_cast<std::uint8_t>(sh_flag);
    scene.splats.resize(count);
    std::vector<float> rec(scene_record_floats(scene.sh_degree));
    for (auto& g : scene.splats) {
        f.read(reinterpret_cast<char*>(rec.data()),
               static_cast<std::streamsize>(rec.size() * sizeof(float)));
        if (!f) throw SceneTruncatedError("load_scene: truncated payload in " + path);
        std::size_t i = 0;
        for (int k = 0; k < 3; ++k) g.position[k] = rec[i++];
        for (int k = 0; k < 3; ++k) g.log_scale[k] = rec[i++];
        for (int k = 0; k < 4; ++k) g.rotation[k] = rec[i++];
        for (int k = 0; k < 3; ++k) g.color[k] = rec[i++];
        if (scene.sh_degree == 1)
            for (int k = 0; k < kSh1Coeffs; ++k) g.sh[k] = rec[i++];
        g.opacity_logit = rec[i++];
        for (int k = 0; k < kFeatureDim; ++k) g.feature[k] = rec[i++];
    }
    return scene;
}

}  // namespace splatpaint
