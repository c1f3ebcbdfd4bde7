#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "splatpaint/image.hpp"
#include "splatpaint/scene.hpp"

namespace splatpaint {

struct RasterConfig {
    int tile_size = 16;
    double near_plane = kDefaultNearPlane;
    double cov2d_eps = kDefaultCov2dEps;
    // Per-pixel support cutoff in sigmas. 3 is the usual splatting choice;
    // gradient checking widens it so truncation jumps stay below the finite
    // difference resolution.
    double support_sigma = kDefaultSupportSigma;
    double alpha_clamp = 0.999;
    double min_alpha = 1e-12;          // contributions below this are skipped
    double min_transmittance = 1e-4;   // front-to-back early out; 0 disables
    int threads = 0;                   // 0 = hardware concurrency
};

struct RenderedView {
    ImageD color;    // H x W x 3, in [0,1]
    ImageD depth;    // H x W, world units
    ImageD alpha;    // H x W, accumulated alpha in [0,1]
    ImageD feature;  // H x W x 16; empty when feature rendering was skipped
    ImageI contrib;  // H x W, blended fragment count per pixel
    Vec3d background_color = Vec3d::Zero();
    double background_depth = 0.0;
};

/// Loss derivatives with respect to every splat parameter, double precision.
struct RenderGradients {
    std::vector<Vec3d> position;
    std::vector<Vec3d> log_scale;
    std::vector<Vec4d> rotation;
    std::vector<Vec3d> color;
    std::vector<Eigen::Matrix<double, kSh1Coeffs, 1>> sh;  // empty for sh_degree 0
    std::vector<double> opacity_logit;
    std::vector<Eigen::Matrix<double, kFeatureDim, 1>> feature;

    void resize_zero(std::size_t n, bool with_sh) {
        position.assign(n, Vec3d::Zero());
        log_scale.assign(n, Vec3d::Zero());
        rotation.assign(n, Vec4d::Zero());
        color.assign(n, Vec3d::Zero());
        sh.assign(with_sh ? n : 0, Eigen::Matrix<double, kSh1Coeffs, 1>::Zero());
        opacity_logit.assign(n, 0.0);
        feature.assign(n, Eigen::Matrix<double, kFeatureDim, 1>::Zero());
    }

    bool all_finite() const {
        auto ok = [](double v) { return std::isfinite(v); };
        for (std::size_t i = 0; i < position.size(); ++i) {
            if (!position[i].allFinite() || !log_scale[i].allFinite() ||
                !rotation[i].allFinite() || !color[i].allFinite() || !ok(opacity_logit[i]) ||
                !feature[i].allFinite())
                return false;
            if (!sh.empty() && !sh[i].allFinite()) return false;
        }
        return true;
    }
};

/// Per-channel loss derivatives w.r.t. the rendered maps. Empty images mean
/// "zero everywhere" for that channel.
struct ChannelGradients {
    ImageD d_color;
    ImageD d_depth;
    ImageD d_alpha;
    ImageD d_feature;
};

namespace detail {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Static round-robin partition: job i runs on thread i % threads, so the
/// work-to-thread mapping (and any per-thread accumulation order) is fixed.
template <typename Fn>
void parallel_for(int jobs, int threads, Fn&& fn) {
    threads = std::min(threads, jobs);
    if (threads <= 1) {
        for (int i = 0; i < jobs; ++i) fn(i, 0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t]() {
            for (int i = t; i < jobs; i += threads) fn(i, t);
        });
    for (auto& th : pool) th.join();
}

inline constexpr double kShC1 = 0.48860251190291992;

/// View-dependent splat color: base RGB plus optional degree-1 terms,
/// clamped to [0,1]. `dir` is the unit vector camera-center -> splat.
inline Vec3d evaluate_splat_color(const GaussianSplat& g, std::uint8_t sh_degree,
                                  const Vec3d& dir) {
    Vec3d raw = g.color.cast<double>();
    if (sh_degree == 1) {
        for (int k = 0; k < 3; ++k)
            raw[k] += kShC1 * (-dir.y() * g.sh[k] + dir.z() * g.sh[3 + k] - dir.x() * g.sh[6 + k]);
    }
    return raw.cwiseMax(0.0).cwiseMin(1.0);
}

struct FragmentSoA {
    std::vector<double> mx, my;        // 2D mean, pixel units
    std::vector<double> ia, ib, ic;    // inverse regularized cov2d [a b; b c]
    std::vector<double> z;             // camera depth
    std::vector<double> alpha_base;    // sigmoid(opacity_logit)
    std::vector<double> rx, ry;        // support half extents, pixels
    std::vector<double> color;         // 3 per fragment
    std::vector<double> feat;          // 16 per fragment
    std::vector<std::uint32_t> gauss;  // source splat index

    std::size_t size() const { return mx.size(); }
};

inline FragmentSoA build_fragments(const Scene& scene, const Camera& cam,
                                   const RasterConfig& cfg, bool with_features) {
    FragmentSoA f;
    const Vec3d cam_center = cam.center();
    for (std::uint32_t i = 0; i < scene.size(); ++i) {
        const GaussianSplat& g = scene.splats[i];
        const auto frag = project_gaussian(g, cam, cfg.near_plane, cfg.cov2d_eps,
                                           cfg.support_sigma, i);
        if (!frag) continue;
        const double a = frag->cov2d(0, 0), b = frag->cov2d(0, 1), c = frag->cov2d(1, 1);
        const double det = a * c - b * b;
        if (!(det > 0.0) || !std::isfinite(det)) continue;  // degenerate, skip
        f.mx.push_back(frag->mean2d.x());
        f.my.push_back(frag->mean2d.y());
        f.ia.push_back(c / det);
        f.ib.push_back(-b / det);
        f.ic.push_back(a / det);
        f.z.push_back(frag->camera_depth);
        f.alpha_base.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(g.opacity_logit))));
        f.rx.push_back(cfg.support_sigma * std::sqrt(a));
        f.ry.push_back(cfg.support_sigma * std::sqrt(c));
        Vec3d dir = Vec3d::Zero();
        if (scene.sh_degree == 1) {
            dir = g.position.cast<double>() - cam_center;
            const double n = dir.norm();
            if (n > 0.0) dir /= n;
        }
        const Vec3d col = evaluate_splat_color(g, scene.sh_degree, dir);
        for (int k = 0; k < 3; ++k) f.color.push_back(col[k]);
        if (with_features)
            for (int k = 0; k < kFeatureDim; ++k)
                f.feat.push_back(static_cast<double>(g.feature[k]));
        f.gauss.push_back(i);
    }
    return f;
}

struct TileGrid {
    int tiles_x = 0, tiles_y = 0;
    // Fragment indices per tile, sorted front-to-back (depth, source index).
    std::vector<std::vector<std::uint32_t>> lists;
};

// Fragments overlapping one tile row, with the conservative column span of
// the support ellipse on that row. The span only prefilters; the per-pixel
// maha test remains the authoritative gate, so results are identical to the
// brute-force sweep.
struct RowActiveList {
    std::vector<std::uint32_t> idx;
    std::vector<int> x_lo, x_hi;

    void rebuild(const FragmentSoA& f, const std::vector<std::uint32_t>& tile_list, int py,
                 double s2) {
        idx.clear();
        x_lo.clear();
        x_hi.clear();
        for (const std::uint32_t i : tile_list) {
            const double dy = py - f.my[i];
            // Row span: a*dx^2 + 2*b*dy*dx + c*dy^2 <= s^2, quadratic in dx.
            const double a = f.ia[i], b = f.ib[i], c = f.ic[i];
            const double disc = a * s2 - (a * c - b * b) * dy * dy;
            if (disc <= 0.0) continue;
            const double root = std::sqrt(disc) / a;
            const double center = f.mx[i] - b * dy / a;
            idx.push_back(i);
            x_lo.push_back(static_cast<int>(std::floor(center - root)));
            x_hi.push_back(static_cast<int>(std::ceil(center + root)));
        }
    }
};

inline TileGrid bin_fragments(const FragmentSoA& f, const Camera& cam, int tile_size) {
    TileGrid grid;
    grid.tiles_x = (cam.width + tile_size - 1) / tile_size;
    grid.tiles_y = (cam.height + tile_size - 1) / tile_size;
    grid.lists.assign(static_cast<std::size_t>(grid.tiles_x) * grid.tiles_y, {});

    // Global front-to-back order; per-tile lists inherit it.
    std::vector<std::uint32_t> order(f.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t l, std::uint32_t r) {
        if (f.z[l] != f.z[r]) return f.z[l] < f.z[r];
        return f.gauss[l] < f.gauss[r];
    });

    for (const std::uint32_t idx : order) {
        const int x0 = std::max(0, static_cast<int>(std::floor(f.mx[idx] - f.rx[idx])));
        const int x1 = std::min(cam.width - 1, static_cast<int>(std::ceil(f.mx[idx] + f.rx[idx])));
        const int y0 = std::max(0, static_cast<int>(std::floor(f.my[idx] - f.ry[idx])));
        const int y1 = std::min(cam.height - 1, static_cast<int>(std::ceil(f.my[idx] + f.ry[idx])));
        if (x1 < x0 || y1 < y0) continue;
        for (int ty = y0 / tile_size; ty <= y1 / tile_size; ++ty)
            for (int tx = x0 / tile_size; tx <= x1 / tile_size; ++tx)
                grid.lists[static_cast<std::size_t>(ty) * grid.tiles_x + tx].push_back(idx);
    }
    return grid;
}

}  // namespace detail

/// Front-to-back alpha blending of color, expected depth, accumulated alpha
/// and (optionally) the 16-d feature channel.
inline RenderedView render(const Scene& scene, const Camera& cam, const RasterConfig& cfg,
                           const Vec3d& background_color, double background_depth,
                           bool with_features = true) {
    cam.validate();
    RenderedView view;
    view.color = ImageD(cam.height, cam.width, 3);
    view.depth = ImageD(cam.height, cam.width, 1);
    view.alpha = ImageD(cam.height, cam.width, 1);
    view.contrib = ImageI(cam.height, cam.width, 1, 0);
    if (with_features) view.feature = ImageD(cam.height, cam.width, kFeatureDim);
    view.background_color = background_color;
    view.background_depth = background_depth;

    const detail::FragmentSoA frags = detail::build_fragments(scene, cam, cfg, with_features);
    const detail::TileGrid grid = detail::bin_fragments(frags, cam, cfg.tile_size);
    const double s2 = cfg.support_sigma * cfg.support_sigma;
    const int threads = detail::resolve_threads(cfg.threads);
    const int n_tiles = grid.tiles_x * grid.tiles_y;

    detail::parallel_for(n_tiles, threads, [&](int tile, int) {
        detail::RowActiveList active;
        const auto& list = grid.lists[tile];
        const int tx = tile % grid.tiles_x, ty = tile / grid.tiles_x;
        const int px0 = tx * cfg.tile_size, px1 = std::min(cam.width, px0 + cfg.tile_size);
        const int py0 = ty * cfg.tile_size, py1 = std::min(cam.height, py0 + cfg.tile_size);
        for (int py = py0; py < py1; ++py) {
            active.rebuild(frags, list, py, s2);
            for (int px = px0; px < px1; ++px) {
                double trans = 1.0;
                double acc_c[3] = {0, 0, 0};
                double acc_d = 0.0;
                double acc_f[kFeatureDim] = {0};
                int n_blend = 0;
                for (std::size_t a = 0; a < active.idx.size(); ++a) {
                    if (px < active.x_lo[a] || px > active.x_hi[a]) continue;
                    const std::uint32_t idx = active.idx[a];
                    const double dx = px - frags.mx[idx];
                    const double dy = py - frags.my[idx];
                    const double maha = frags.ia[idx] * dx * dx +
                                        2.0 * frags.ib[idx] * dx * dy +
                                        frags.ic[idx] * dy * dy;
                    if (maha > s2) continue;
                    double alpha = frags.alpha_base[idx] * std::exp(-0.5 * maha);
                    if (alpha > cfg.alpha_clamp) alpha = cfg.alpha_clamp;
                    if (alpha < cfg.min_alpha) continue;
                    const double w = alpha * trans;
                    const double* col = &frags.color[3 * idx];
                    acc_c[0] += w * col[0];
                    acc_c[1] += w * col[1];
                    acc_c[2] += w * col[2];
                    acc_d += w * frags.z[idx];
                    if (with_features) {
                        const double* ft = &frags.feat[kFeatureDim * idx];
                        for (int k = 0; k < kFeatureDim; ++k) acc_f[k] += w * ft[k];
                    }
                    ++n_blend;
                    trans *= 1.0 - alpha;
                    if (cfg.min_transmittance > 0.0 && trans < cfg.min_transmittance) break;
                }
                for (int k = 0; k < 3; ++k)
                    view.color.at(py, px, k) = acc_c[k] + background_color[k] * trans;
                view.depth.at(py, px) = acc_d + background_depth * trans;
                view.alpha.at(py, px) = 1.0 - trans;
                view.contrib.at(py, px) = n_blend;
                if (with_features)
                    for (int k = 0; k < kFeatureDim; ++k) view.feature.at(py, px, k) = acc_f[k];
            }
        }
    });
    return view;
}

namespace detail {

// Per-fragment gradient slots accumulated during the pixel sweeps.
struct FragGrad {
    double color[3] = {0, 0, 0};
    double feat[kFeatureDim] = {0};
    double z = 0.0;
    double alpha_base = 0.0;
    double mx = 0.0, my = 0.0;
    double ia = 0.0, ib = 0.0, ic = 0.0;  // w.r.t. inverse-cov entries a, b, c
};

inline const double* channel_ptr(const ImageD& img, int y, int x) {
    return img.empty() ? nullptr : &img.at(y, x, 0);
}

}  // namespace detail

/// Analytic gradients of a scalar loss through the blending of Eq.-style
/// front-to-back compositing, for every splat parameter. `view` must come
/// from render() on the same scene snapshot and config.
inline RenderGradients render_backward(const Scene& scene, const Camera& cam,
                                       const RasterConfig& cfg, const RenderedView& view,
                                       const ChannelGradients& grad_in) {
    cam.validate();
    auto check_shape = [&](const ImageD& img, int ch, const char* name) {
        if (img.empty()) return;
        if (img.height() != cam.height || img.width() != cam.width || img.channels() != ch)
            throw std::invalid_argument(std::string("render_backward: shape mismatch for ") +
                                        name);
    };
    check_shape(grad_in.d_color, 3, "d_color");
    check_shape(grad_in.d_depth, 1, "d_depth");
    check_shape(grad_in.d_alpha, 1, "d_alpha");
    check_shape(grad_in.d_feature, kFeatureDim, "d_feature");
    if (view.color.height() != cam.height || view.color.width() != cam.width)
        throw std::invalid_argument("render_backward: view does not match camera");

    const bool with_features = !grad_in.d_feature.empty();
    const detail::FragmentSoA frags = detail::build_fragments(scene, cam, cfg, with_features);
    const detail::TileGrid grid = detail::bin_fragments(frags, cam, cfg.tile_size);
    const double s2 = cfg.support_sigma * cfg.support_sigma;
    const int threads = detail::resolve_threads(cfg.threads);
    const int n_tiles = grid.tiles_x * grid.tiles_y;
    const Vec3d bg_c = view.background_color;
    const double bg_d = view.background_depth;

    std::vector<std::vector<detail::FragGrad>> partials(
        std::min(threads, std::max(n_tiles, 1)),
        std::vector<detail::FragGrad>(frags.size()));

    struct Hit {
        std::uint32_t idx;
        double alpha;
        double trans_before;
    };

    detail::parallel_for(n_tiles, threads, [&](int tile, int thread_id) {
        auto& fg = partials[thread_id];
        std::vector<Hit> hits;
        detail::RowActiveList active;
        const auto& list = grid.lists[tile];
        const int tx = tile % grid.tiles_x, ty = tile / grid.tiles_x;
        const int px0 = tx * cfg.tile_size, px1 = std::min(cam.width, px0 + cfg.tile_size);
        const int py0 = ty * cfg.tile_size, py1 = std::min(cam.height, py0 + cfg.tile_size);
        for (int py = py0; py < py1; ++py) {
            active.rebuild(frags, list, py, s2);
            for (int px = px0; px < px1; ++px) {
                const double* g_c = detail::channel_ptr(grad_in.d_color, py, px);
                const double g_d = grad_in.d_depth.empty() ? 0.0 : grad_in.d_depth.at(py, px);
                const double g_a = grad_in.d_alpha.empty() ? 0.0 : grad_in.d_alpha.at(py, px);
                const double* g_f = detail::channel_ptr(grad_in.d_feature, py, px);

                // Replay the forward sweep to recover per-contributor state.
                hits.clear();
                double trans = 1.0;
                for (std::size_t a = 0; a < active.idx.size(); ++a) {
                    if (px < active.x_lo[a] || px > active.x_hi[a]) continue;
                    const std::uint32_t idx = active.idx[a];
                    const double dx = px - frags.mx[idx];
                    const double dy = py - frags.my[idx];
                    const double maha = frags.ia[idx] * dx * dx +
                                        2.0 * frags.ib[idx] * dx * dy +
                                        frags.ic[idx] * dy * dy;
                    if (maha > s2) continue;
                    double alpha = frags.alpha_base[idx] * std::exp(-0.5 * maha);
                    if (alpha > cfg.alpha_clamp) alpha = cfg.alpha_clamp;
                    if (alpha < cfg.min_alpha) continue;
                    hits.push_back({idx, alpha, trans});
                    trans *= 1.0 - alpha;
                    if (cfg.min_transmittance > 0.0 && trans < cfg.min_transmittance) break;
                }
                const double trans_end = trans;
                const double bg_rate = (g_c ? g_c[0] * bg_c[0] + g_c[1] * bg_c[1] +
                                                  g_c[2] * bg_c[2]
                                            : 0.0) +
                                       g_d * bg_d;

                // Back-to-front: suffix holds sum_{k>i} w_k * rate_k.
                double suffix = 0.0;
                for (std::size_t h = hits.size(); h-- > 0;) {
                    const std::uint32_t idx = hits[h].idx;
                    const double alpha = hits[h].alpha;
                    const double tb = hits[h].trans_before;
                    const double w = alpha * tb;
                    const double* col = &frags.color[3 * idx];
                    double rate = g_d * frags.z[idx];
                    if (g_c) rate += g_c[0] * col[0] + g_c[1] * col[1] + g_c[2] * col[2];
                    detail::FragGrad& slot = fg[idx];
                    if (g_c)
                        for (int k = 0; k < 3; ++k) slot.color[k] += w * g_c[k];
                    if (g_f) {
                        const double* ft = &frags.feat[kFeatureDim * idx];
                        for (int k = 0; k < kFeatureDim; ++k) {
                            rate += g_f[k] * ft[k];
                            slot.feat[k] += w * g_f[k];
                        }
                    }
                    slot.z += w * g_d;

                    const double d_alpha =
                        tb * rate -
                        (suffix + trans_end * bg_rate - trans_end * g_a) / (1.0 - alpha);
                    suffix += w * rate;

                    if (alpha < cfg.alpha_clamp) {  // clamp gates the geometry chain
                        const double gauss_val = alpha / frags.alpha_base[idx];
                        slot.alpha_base += d_alpha * gauss_val;
                        const double d_maha = d_alpha * (-0.5 * alpha);
                        const double dx = px - frags.mx[idx];
                        const double dy = py - frags.my[idx];
                        const double qx = frags.ia[idx] * dx + frags.ib[idx] * dy;
                        const double qy = frags.ib[idx] * dx + frags.ic[idx] * dy;
                        slot.mx += d_maha * (-2.0 * qx);
                        slot.my += d_maha * (-2.0 * qy);
                        slot.ia += d_maha * dx * dx;
                        slot.ib += d_maha * 2.0 * dx * dy;
                        slot.ic += d_maha * dy * dy;
                    }
                }
            }
        }
    });

    // Ordered reduction over thread partials keeps the sum deterministic.
    std::vector<detail::FragGrad>& total = partials[0];
    for (std::size_t t = 1; t < partials.size(); ++t) {
        for (std::size_t i = 0; i < total.size(); ++i) {
            detail::FragGrad& a = total[i];
            const detail::FragGrad& b = partials[t][i];
            for (int k = 0; k < 3; ++k) a.color[k] += b.color[k];
            for (int k = 0; k < kFeatureDim; ++k) a.feat[k] += b.feat[k];
            a.z += b.z;
            a.alpha_base += b.alpha_base;
            a.mx += b.mx;
            a.my += b.my;
            a.ia += b.ia;
            a.ib += b.ib;
            a.ic += b.ic;
        }
    }

    RenderGradients grads;
    grads.resize_zero(scene.size(), scene.sh_degree == 1);
    const Vec3d cam_center = cam.center();

    detail::parallel_for(static_cast<int>(frags.size()), threads, [&](int fi, int) {
        const detail::FragGrad& fg = total[fi];
        const std::uint32_t gi = frags.gauss[fi];
        const GaussianSplat& g = scene.splats[gi];

        // Feature and base-alpha chains are direct.
        for (int k = 0; k < kFeatureDim; ++k) grads.feature[gi][k] = fg.feat[k];
        const double ab = frags.alpha_base[fi];
        grads.opacity_logit[gi] = fg.alpha_base * ab * (1.0 - ab);

        // Color: clamp gate, then optional SH-1 direction terms.
        Vec3d dir = Vec3d::Zero();
        double dist = 1.0;
        Vec3d raw = g.color.cast<double>();
        if (scene.sh_degree == 1) {
            Vec3d u = g.position.cast<double>() - cam_center;
            dist = u.norm();
            if (dist > 0.0) dir = u / dist;
            for (int k = 0; k < 3; ++k)
                raw[k] += detail::kShC1 *
                          (-dir.y() * g.sh[k] + dir.z() * g.sh[3 + k] - dir.x() * g.sh[6 + k]);
        }
        Vec3d g_raw = Vec3d::Zero();
        for (int k = 0; k < 3; ++k)
            g_raw[k] = (raw[k] > 0.0 && raw[k] < 1.0) ? fg.color[k] : 0.0;
        grads.color[gi] = g_raw;
        Vec3d g_pos_extra = Vec3d::Zero();
        if (scene.sh_degree == 1) {
            auto& gsh = grads.sh[gi];
            Vec3d g_dir = Vec3d::Zero();
            for (int k = 0; k < 3; ++k) {
                gsh[k] = -detail::kShC1 * dir.y() * g_raw[k];
                gsh[3 + k] = detail::kShC1 * dir.z() * g_raw[k];
                gsh[6 + k] = -detail::kShC1 * dir.x() * g_raw[k];
                g_dir.x() += -detail::kShC1 * g.sh[6 + k] * g_raw[k];
                g_dir.y() += -detail::kShC1 * g.sh[k] * g_raw[k];
                g_dir.z() += detail::kShC1 * g.sh[3 + k] * g_raw[k];
            }
            if (dist > 0.0)
                g_pos_extra = (g_dir - dir * dir.dot(g_dir)) / dist;
        }

        // Inverse-cov -> regularized cov2d.
        const Mat2d inv_cov = (Mat2d() << frags.ia[fi], frags.ib[fi], frags.ib[fi],
                               frags.ic[fi])
                                  .finished();
        const Mat2d g_inv = (Mat2d() << fg.ia, fg.ib / 2.0, fg.ib / 2.0, fg.ic).finished();
        const Mat2d g_cov2d = -inv_cov * g_inv * inv_cov;

        // cov2d = J * M * J^T with M = W Sigma W^T; J is the projection Jacobian.
        const Vec3d pc = cam.world_to_camera(g.position.cast<double>());
        const double x = pc.x(), y = pc.y(), z = pc.z();
        Eigen::Matrix<double, 2, 3> jac;
        jac << cam.fx / z, 0.0, -cam.fx * x / (z * z),
            0.0, cam.fy / z, -cam.fy * y / (z * z);
        const Mat3d sigma =
            covariance_from_params(g.log_scale.cast<double>(), g.rotation.cast<double>());
        const Mat3d m_cam = cam.rot * sigma * cam.rot.transpose();
        const Eigen::Matrix<double, 2, 3> jw = jac;  // J in camera frame
        const Mat3d g_m = jw.transpose() * g_cov2d * jw;
        const Mat3d g_sigma = cam.rot.transpose() * g_m * cam.rot;
        const Eigen::Matrix<double, 2, 3> g_jac = 2.0 * g_cov2d * jw * m_cam;

        Vec3d g_pc = Vec3d::Zero();
        const double z2 = z * z, z3 = z2 * z;
        g_pc.x() += g_jac(0, 2) * (-cam.fx / z2);
        g_pc.y() += g_jac(1, 2) * (-cam.fy / z2);
        g_pc.z() += g_jac(0, 0) * (-cam.fx / z2) + g_jac(0, 2) * (2.0 * cam.fx * x / z3) +
                    g_jac(1, 1) * (-cam.fy / z2) + g_jac(1, 2) * (2.0 * cam.fy * y / z3);

        // mean2d = (fx x / z + cx, fy y / z + cy), plus the depth channel.
        g_pc.x() += fg.mx * cam.fx / z;
        g_pc.y() += fg.my * cam.fy / z;
        g_pc.z() += fg.mx * (-cam.fx * x / z2) + fg.my * (-cam.fy * y / z2) + fg.z;

        grads.position[gi] = cam.rot.transpose() * g_pc + g_pos_extra;

        // Sigma = V V^T, V = R diag(exp(ls)).
        const Vec4d q = g.rotation.cast<double>();
        const double qn = q.norm();
        const Vec4d qh = q / qn;
        const Mat3d rot = rotation_from_unit_quaternion(qh);
        const Vec3d s = g.log_scale.cast<double>().array().exp();
        const Mat3d v = rot * s.asDiagonal();
        const Mat3d g_v = 2.0 * g_sigma * v;
        for (int j = 0; j < 3; ++j)
            grads.log_scale[gi][j] = s[j] * rot.col(j).dot(g_v.col(j));
        const Mat3d g_rot = g_v * s.asDiagonal();

        const double w = qh[0], qx = qh[1], qy = qh[2], qz = qh[3];
        Mat3d dr[4];
        dr[0] << 0, -2 * qz, 2 * qy, 2 * qz, 0, -2 * qx, -2 * qy, 2 * qx, 0;
        dr[1] << 0, 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * w, 2 * qz, 2 * w, -4 * qx;
        dr[2] << -4 * qy, 2 * qx, 2 * w, 2 * qx, 0, 2 * qz, -2 * w, 2 * qz, -4 * qy;
        dr[3] << -4 * qz, -2 * w, 2 * qx, 2 * w, -4 * qz, 2 * qy, 2 * qx, 2 * qy, 0;
        Vec4d g_qh;
        for (int k = 0; k < 4; ++k) g_qh[k] = (g_rot.cwiseProduct(dr[k])).sum();
        grads.rotation[gi] = (g_qh - qh * qh.dot(g_qh)) / qn;
    });

    return grads;
}

struct GradCheckReport {
    struct ClassResult {
        std::string param_class;
        double max_rel_err = 0.0;
    };
    std::vector<ClassResult> classes;
    double tolerance = 1e-3;
    bool passed = false;
    double seconds = 0.0;

    double worst() const {
        double w = 0.0;
        for (const auto& c : classes) w = std::max(w, c.max_rel_err);
        return w;
    }
};

/// Central finite-difference verification of render_backward over every
/// parameter of every splat. Runs the rasterizer with a widened support
/// radius and no early termination so the blended function is smooth at the
/// finite-difference scale.
inline GradCheckReport check_gradients(const Scene& scene, const Camera& cam,
                                       std::uint64_t seed, double tolerance = 1e-3,
                                       int threads = 0) {
    if (scene.size() > 100)
        throw std::invalid_argument("check_gradients: scene too large (max 100 splats)");
    const auto t_start = std::chrono::steady_clock::now();

    RasterConfig cfg;
    cfg.support_sigma = 7.5;
    cfg.min_transmittance = 0.0;
    cfg.min_alpha = 1e-14;
    cfg.threads = threads;

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    ChannelGradients weights;
    weights.d_color = ImageD(cam.height, cam.width, 3);
    weights.d_depth = ImageD(cam.height, cam.width, 1);
    weights.d_alpha = ImageD(cam.height, cam.width, 1);
    weights.d_feature = ImageD(cam.height, cam.width, kFeatureDim);
    for (std::size_t i = 0; i < weights.d_color.size(); ++i)
        weights.d_color.data()[i] = unif(rng);
    for (std::size_t i = 0; i < weights.d_depth.size(); ++i)
        weights.d_depth.data()[i] = unif(rng);
    for (std::size_t i = 0; i < weights.d_alpha.size(); ++i)
        weights.d_alpha.data()[i] = unif(rng);
    for (std::size_t i = 0; i < weights.d_feature.size(); ++i)
        weights.d_feature.data()[i] = 0.25 * unif(rng);
    const Vec3d bg_color(0.25, 0.45, 0.65);
    const double bg_depth = 6.0;

    auto loss_of = [&](const Scene& s) {
        const RenderedView v = render(s, cam, cfg, bg_color, bg_depth, true);
        double loss = 0.0;
        for (std::size_t i = 0; i < v.color.size(); ++i)
            loss += v.color.data()[i] * weights.d_color.data()[i];
        for (std::size_t i = 0; i < v.depth.size(); ++i)
            loss += v.depth.data()[i] * weights.d_depth.data()[i];
        for (std::size_t i = 0; i < v.alpha.size(); ++i)
            loss += v.alpha.data()[i] * weights.d_alpha.data()[i];
        for (std::size_t i = 0; i < v.feature.size(); ++i)
            loss += v.feature.data()[i] * weights.d_feature.data()[i];
        return loss;
    };

    const RenderedView view = render(scene, cam, cfg, bg_color, bg_depth, true);
    const RenderGradients grads = render_backward(scene, cam, cfg, view, weights);

    Scene probe = scene;  // mutated one float at a time
    const double h = 1e-4;
    auto fd_of = [&](float* slot) {
        const float saved = *slot;
        // Snap the step to the float grid and divide by the realized interval.
        const float hi = static_cast<float>(static_cast<double>(saved) + h);
        const float lo = static_cast<float>(static_cast<double>(saved) - h);
        *slot = hi;
        const double f_hi = loss_of(probe);
        *slot = lo;
        const double f_lo = loss_of(probe);
        *slot = saved;
        return (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
    };
    auto rel_err = [](double analytic, double fd) {
        return std::abs(analytic - fd) /
               std::max({1e-6, std::abs(analytic), std::abs(fd)});
    };

    GradCheckReport report;
    report.tolerance = tolerance;
    auto run_class = [&](const std::string& name, auto slot_of, auto grad_of, int dims) {
        double worst = 0.0;
        for (std::size_t gi = 0; gi < probe.size(); ++gi)
            for (int d = 0; d < dims; ++d)
                worst = std::max(worst, rel_err(grad_of(gi, d), fd_of(slot_of(gi, d))));
        report.classes.push_back({name, worst});
    };

    run_class(
        "position", [&](std::size_t g, int d) { return &probe.splats[g].position[d]; },
        [&](std::size_t g, int d) { return grads.position[g][d]; }, 3);
    run_class(
        "log_scale", [&](std::size_t g, int d) { return &probe.splats[g].log_scale[d]; },
        [&](std::size_t g, int d) { return grads.log_scale[g][d]; }, 3);
    run_class(
        "rotation", [&](std::size_t g, int d) { return &probe.splats[g].rotation[d]; },
        [&](std::size_t g, int d) { return grads.rotation[g][d]; }, 4);
    run_class(
        "color", [&](std::size_t g, int d) { return &probe.splats[g].color[d]; },
        [&](std::size_t g, int d) { return grads.color[g][d]; }, 3);
    if (scene.sh_degree == 1)
        run_class(
            "sh", [&](std::size_t g, int d) { return &probe.splats[g].sh[d]; },
            [&](std::size_t g, int d) { return grads.sh[g][d]; }, kSh1Coeffs);
    run_class(
        "opacity", [&](std::size_t g, int) { return &probe.splats[g].opacity_logit; },
        [&](std::size_t g, int) { return grads.opacity_logit[g]; }, 1);
    run_class(
        "feature", [&](std::size_t g, int d) { return &probe.splats[g].feature[d]; },
        [&](std::size_t g, int d) { return grads.feature[g][d]; }, kFeatureDim);

    report.passed = report.worst() < tolerance;
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace splatpaint
