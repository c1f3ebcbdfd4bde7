#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatpaint/image.hpp"
#include "splatpaint/rasterizer.hpp"
#include "splatpaint/scene.hpp"

namespace splatpaint {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Procedural two-variant scene: a textured ground plane plus a few textured
/// slab/ellipsoid clusters, and a removable object cluster placed clear of
/// the background clusters. World axes follow the camera convention (+y is
/// down), so the ground plane sits at positive y and cameras above it.
struct SceneSpec {
    std::uint64_t seed = 1;
    int background_clusters = 3;  // slab/ellipsoid clusters, 2..5
    int ground_grid = 36;
    double ground_extent = 4.0;
    double object_radius = 0.35;
    double margin_radii = 1.0;  // required gap, in object radii

    int camera_count = 8;  // N >= 4
    double arc_radius = 6.0;
    double arc_span_deg = 110.0;
    double camera_height = 2.4;  // above the look-at point
    Vec3d look_at = Vec3d(0.0, 0.4, 0.0);
    int image_size = 128;
    double focal_scale = 1.1;  // focal = focal_scale * image_size

    double mask_alpha_threshold = 0.05;
    int mask_dilate_px = 2;

    void validate() const {
        if (background_clusters < 2 || background_clusters > 5)
            throw std::invalid_argument("SceneSpec: background_clusters must be 2..5");
        if (camera_count < 4) throw std::invalid_argument("SceneSpec: camera_count must be >= 4");
        if (image_size < 16) throw std::invalid_argument("SceneSpec: image_size must be >= 16");
        if (!(object_radius > 0.0) || !(arc_radius > 0.0) || !(ground_extent > 0.0))
            throw std::invalid_argument("SceneSpec: sizes must be positive");
    }
};

struct ScenePair {
    Scene with_object;
    Scene without_object;
    std::size_t object_start = 0;  // with_object.splats[object_start..] is the object
};

namespace detail {

struct ClusterFootprint {
    Vec3d center;
    double radius;
};

inline GaussianSplat make_splat(const Vec3d& pos, const Vec3d& scale, const Vec3d& color,
                                double opacity, int feature_label) {
    GaussianSplat g;
    g.position = pos.cast<float>();
    g.log_scale = Vec3d(scale.array().log()).cast<float>();
    g.color = color.cast<float>();
    g.opacity_logit = static_cast<float>(std::log(opacity / (1.0 - opacity)));
    g.feature.setZero();
    if (feature_label >= 0 && feature_label < kFeatureDim)
        g.feature[feature_label] = 2.0f;
    return g;
}

inline Vec3d jitter_color(std::mt19937_64& rng, const Vec3d& base, double amount) {
    std::uniform_real_distribution<double> unif(-amount, amount);
    Vec3d c = base + Vec3d(unif(rng), unif(rng), unif(rng));
    return c.cwiseMax(0.05).cwiseMin(0.95);
}

}  // namespace detail

/// Feature slot used to tag the removable object's splats.
inline constexpr int kObjectFeatureLabel = kFeatureDim - 1;

inline ScenePair generate_scene(const SceneSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    Scene background;
    std::vector<detail::ClusterFootprint> footprints;

    // Ground plane: label 1, thin splats on a jittered grid at y = 0.8.
    const double ground_y = 0.8;
    const double spacing = 2.0 * spec.ground_extent / spec.ground_grid;
    const Vec3d ground_base(0.35, 0.45, 0.28);
    for (int i = 0; i < spec.ground_grid; ++i)
        for (int j = 0; j < spec.ground_grid; ++j) {
            const double x = -spec.ground_extent + spacing * (i + 0.5) +
                             0.2 * spacing * (unif(rng) - 0.5);
            const double z = -spec.ground_extent + spacing * (j + 0.5) +
                             0.2 * spacing * (unif(rng) - 0.5);
            background.splats.push_back(detail::make_splat(
                Vec3d(x, ground_y, z), Vec3d(0.55 * spacing, 0.12 * spacing, 0.55 * spacing),
                detail::jitter_color(rng, ground_base, 0.12), 0.92, /*label=*/0));
        }

    // Slab / ellipsoid clusters: labels 2..; alternating shapes.
    const Vec3d palette[5] = {{0.75, 0.3, 0.25}, {0.25, 0.45, 0.75}, {0.8, 0.7, 0.3},
                              {0.5, 0.3, 0.65},  {0.3, 0.7, 0.45}};
    for (int c = 0; c < spec.background_clusters; ++c) {
        const double cx = (unif(rng) * 2.0 - 1.0) * 0.55 * spec.ground_extent;
        const double cz = (unif(rng) * 2.0 - 1.0) * 0.55 * spec.ground_extent;
        const Vec3d base_color = palette[c % 5];
        const int label = c + 1;
        if (c % 2 == 0) {
            // Slab: a box of splats resting on the ground.
            const double sx = 0.45 + 0.45 * unif(rng);
            const double sy = 0.35 + 0.35 * unif(rng);
            const double sz = 0.45 + 0.45 * unif(rng);
            const Vec3d center(cx, ground_y - sy / 2.0, cz);
            const int nx = 6, ny = 4, nz = 6;
            for (int i = 0; i < nx; ++i)
                for (int j = 0; j < ny; ++j)
                    for (int k = 0; k < nz; ++k) {
                        const Vec3d p =
                            center + Vec3d(sx * (i / (nx - 1.0) - 0.5),
                                           sy * (j / (ny - 1.0) - 0.5),
                                           sz * (k / (nz - 1.0) - 0.5));
                        background.splats.push_back(detail::make_splat(
                            p, Vec3d(0.16 * sx, 0.22 * sy, 0.16 * sz),
                            detail::jitter_color(rng, base_color, 0.10), 0.9, label));
                    }
            footprints.push_back({center, 0.5 * Vec3d(sx, sy, sz).norm()});
        } else {
            // Ellipsoid blob of splats.
            const double r = 0.35 + 0.3 * unif(rng);
            const Vec3d center(cx, ground_y - r, cz);
            for (int n = 0; n < 110; ++n) {
                Vec3d dir(unif(rng) * 2 - 1, unif(rng) * 2 - 1, unif(rng) * 2 - 1);
                if (dir.norm() < 1e-6) dir = Vec3d(1, 0, 0);
                dir.normalize();
                const double rr = r * std::cbrt(unif(rng));
                background.splats.push_back(detail::make_splat(
                    center + rr * dir, Vec3d(0.3 * r, 0.3 * r, 0.3 * r),
                    detail::jitter_color(rng, base_color, 0.10), 0.85, label));
            }
            footprints.push_back({center, r});
        }
    }

    // Removable object: a dense bright blob, at least margin_radii object
    // radii clear of every background cluster footprint.
    const double r_obj = spec.object_radius;
    Vec3d obj_center;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        obj_center = Vec3d((unif(rng) * 2 - 1) * 0.5 * spec.ground_extent, ground_y - r_obj,
                           (unif(rng) * 2 - 1) * 0.5 * spec.ground_extent);
        placed = true;
        for (const auto& fp : footprints) {
            if ((obj_center - fp.center).norm() <
                fp.radius + r_obj + spec.margin_radii * r_obj) {
                placed = false;
                break;
            }
        }
    }
    if (!placed)
        throw GenerationError("generate_scene: object placement failed after 100 attempts");

    ScenePair pair;
    pair.without_object = background;
    pair.with_object = background;
    pair.object_start = background.size();
    const Vec3d obj_color(0.9, 0.35, 0.1);
    for (int n = 0; n < 140; ++n) {
        Vec3d dir(unif(rng) * 2 - 1, unif(rng) * 2 - 1, unif(rng) * 2 - 1);
        if (dir.norm() < 1e-6) dir = Vec3d(0, 1, 0);
        dir.normalize();
        const double rr = r_obj * std::cbrt(unif(rng));
        pair.with_object.splats.push_back(detail::make_splat(
            obj_center + rr * dir, Vec3d(0.32 * r_obj, 0.32 * r_obj, 0.32 * r_obj),
            detail::jitter_color(rng, obj_color, 0.08), 0.92, kObjectFeatureLabel));
    }
    return pair;
}

/// Cameras on a circular arc, all looking at the spec's target point.
inline std::vector<Camera> camera_arc(const SceneSpec& spec) {
    std::vector<Camera> cams;
    const double span = spec.arc_span_deg * M_PI / 180.0;
    for (int i = 0; i < spec.camera_count; ++i) {
        const double t = spec.camera_count == 1
                             ? 0.5
                             : static_cast<double>(i) / (spec.camera_count - 1);
        const double angle = -span / 2.0 + span * t;
        const Vec3d pos = spec.look_at + Vec3d(spec.arc_radius * std::sin(angle),
                                               -spec.camera_height,
                                               -spec.arc_radius * std::cos(angle));
        const Vec3d forward = (spec.look_at - pos).normalized();
        Vec3d down = Vec3d(0, 1, 0) - forward * forward.y();  // world +y projected
        down.normalize();
        const Vec3d right = down.cross(forward);

        Camera cam;
        cam.rot.row(0) = right;
        cam.rot.row(1) = down;
        cam.rot.row(2) = forward;
        cam.trans = -(cam.rot * pos);
        cam.fx = cam.fy = spec.focal_scale * spec.image_size;
        cam.cx = (spec.image_size - 1) / 2.0;
        cam.cy = (spec.image_size - 1) / 2.0;
        cam.width = cam.height = spec.image_size;
        cams.push_back(cam);
    }
    return cams;
}

struct SyntheticView {
    Camera camera;
    ImageD train_image;   // with the object, 8-bit quantized values
    ImageD truth_image;   // object-free render, 8-bit quantized values
    ImageD truth_depth;   // object-free rendered depth (float32 quantized)
    Mask inpaint_mask;    // object silhouette dilated for generous coverage
    Mask object_silhouette;  // object alpha > threshold, before dilation
    Image<std::uint8_t> segments;  // 0 = unlabeled, k >= 1 = background cluster k
};

struct SyntheticDataset {
    SceneSpec spec;
    std::vector<SyntheticView> views;
    int segment_count = 0;

    std::vector<Mask> segment_masks(int view) const {
        const auto& seg = views[view].segments;
        std::vector<Mask> masks(segment_count,
                                Mask(seg.height(), seg.width(), 1, 0));
        for (int y = 0; y < seg.height(); ++y)
            for (int x = 0; x < seg.width(); ++x) {
                const int label = seg.at(y, x);
                if (label >= 1 && label <= segment_count) masks[label - 1].at(y, x) = 1;
            }
        return masks;
    }
};

namespace detail {

inline double quantize8_value(double v) {
    return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

inline ImageD quantize8_image(const ImageD& img) {
    ImageD out = img;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = quantize8_value(out.data()[i]);
    return out;
}

inline ImageD quantize_float32(const ImageD& img) {
    ImageD out = img;
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = static_cast<double>(static_cast<float>(out.data()[i]));
    return out;
}

}  // namespace detail

/// Renders both scene variants for every camera and derives the per-view
/// ground-truth maps: oracle depth, the object's inpaint mask, and segment
/// labels by blended-feature majority over covered pixels.
inline SyntheticDataset generate_dataset(const ScenePair& pair, const SceneSpec& spec,
                                         const RasterConfig& raster,
                                         const Vec3d& background_color = Vec3d(0.05, 0.06,
                                                                               0.08),
                                         double background_depth = 0.0) {
    SyntheticDataset ds;
    ds.spec = spec;
    ds.segment_count = spec.background_clusters + 1;  // ground plane + clusters
    const double bg_depth =
        background_depth > 0.0 ? background_depth : 2.5 * spec.arc_radius;

    Scene object_only;
    object_only.splats.assign(pair.with_object.splats.begin() +
                                  static_cast<std::ptrdiff_t>(pair.object_start),
                              pair.with_object.splats.end());

    for (const Camera& cam : camera_arc(spec)) {
        SyntheticView view;
        view.camera = cam;

        const RenderedView with_obj =
            render(pair.with_object, cam, raster, background_color, bg_depth, false);
        const RenderedView without_obj =
            render(pair.without_object, cam, raster, background_color, bg_depth, true);
        view.train_image = detail::quantize8_image(with_obj.color);
        view.truth_image = detail::quantize8_image(without_obj.color);
        view.truth_depth = detail::quantize_float32(without_obj.depth);

        // Inpaint mask: where the object alone renders visible alpha.
        const RenderedView obj_alpha =
            render(object_only, cam, raster, Vec3d::Zero(), bg_depth, false);
        Mask silhouette(cam.height, cam.width, 1, 0);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x)
                silhouette.at(y, x) =
                    obj_alpha.alpha.at(y, x) > spec.mask_alpha_threshold ? 1 : 0;
        view.object_silhouette = silhouette;
        view.inpaint_mask = spec.mask_dilate_px > 0
                                ? dilate(silhouette, disc_element(spec.mask_dilate_px))
                                : silhouette;

        // Segment labels: argmax of the blended feature over covered pixels.
        view.segments = Image<std::uint8_t>(cam.height, cam.width, 1, 0);
        for (int y = 0; y < cam.height; ++y)
            for (int x = 0; x < cam.width; ++x) {
                if (without_obj.alpha.at(y, x) <= 0.5) continue;
                int best = 0;
                double best_v = -1.0;
                for (int k = 0; k < ds.segment_count; ++k) {
                    const double v = without_obj.feature.at(y, x, k);
                    if (v > best_v) {
                        best_v = v;
                        best = k;
                    }
                }
                view.segments.at(y, x) = static_cast<std::uint8_t>(best + 1);
            }

        ds.views.push_back(std::move(view));
    }
    return ds;
}

/// Camera at the origin looking down +z, used by gradient checking.
inline Camera probe_camera(int size = 48, double focal = 60.0) {
    Camera cam;
    cam.width = cam.height = size;
    cam.fx = cam.fy = focal;
    cam.cx = cam.cy = (size - 1) / 2.0;
    return cam;
}

/// Random splats inside the camera frustum for gradient verification.
/// Parameter ranges keep blending away from the alpha and color clamps so
/// finite differences stay comparable to the analytic gradients.
inline Scene random_probe_scene(std::uint64_t seed, std::size_t count, const Camera& cam,
                                std::uint8_t sh_degree = 0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Scene scene;
    scene.sh_degree = sh_degree;
    scene.splats.resize(count);
    const double span = 0.35 * cam.width / cam.fx;
    for (auto& g : scene.splats) {
        const double z = 2.0 + 4.0 * unif(rng);
        g.position = Eigen::Vector3f(static_cast<float>(span * z * (2.0 * unif(rng) - 1.0)),
                                     static_cast<float>(span * z * (2.0 * unif(rng) - 1.0)),
                                     static_cast<float>(z));
        for (int k = 0; k < 3; ++k)
            g.log_scale[k] = static_cast<float>(std::log(0.05 + 0.10 * unif(rng)));
        Eigen::Vector4f q(static_cast<float>(0.5 + unif(rng)),
                          static_cast<float>(unif(rng) - 0.5),
                          static_cast<float>(unif(rng) - 0.5),
                          static_cast<float>(unif(rng) - 0.5));
        g.rotation = q.normalized();
        for (int k = 0; k < 3; ++k) g.color[k] = static_cast<float>(0.10 + 0.80 * unif(rng));
        g.opacity_logit = static_cast<float>(-1.5 + 3.0 * unif(rng));
        for (int k = 0; k < kFeatureDim; ++k)
            g.feature[k] = static_cast<float>(2.0 * unif(rng) - 1.0);
        if (sh_degree == 1)
            for (int k = 0; k < kSh1Coeffs; ++k)
                g.sh[k] = static_cast<float>(0.08 * (2.0 * unif(rng) - 1.0));
    }
    return scene;
}

/// Object-free ground-truth pixels for the region, with optional zero-mean
/// uniform noise (amplitude in color units) to emulate an imperfect model.
inline ImageD oracle_inpaint(const SyntheticDataset& ds, int view_id, const Mask& region,
                             double noise_amplitude = 0.0, std::mt19937_64* rng = nullptr) {
    if (view_id < 0 || static_cast<std::size_t>(view_id) >= ds.views.size())
        throw std::invalid_argument("oracle_inpaint: unknown view id");
    const SyntheticView& view = ds.views[view_id];
    ImageD out = view.train_image;
    std::uniform_real_distribution<double> unif(-noise_amplitude, noise_amplitude);
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) {
            if (!region.at(y, x)) continue;
            for (int c = 0; c < out.channels(); ++c) {
                double v = view.truth_image.at(y, x, c);
                if (noise_amplitude > 0.0 && rng) v = std::clamp(v + unif(*rng), 0.0, 1.0);
                out.at(y, x, c) = v;
            }
        }
    return out;
}

}  // namespace splatpaint
