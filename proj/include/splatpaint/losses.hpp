#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "splatpaint/image.hpp"
#include "splatpaint/scene.hpp"

namespace splatpaint {

enum class BinWeightScheme { kInverseCenter, kUniform, kExpDecay };

struct LossConfig {
    double kappa = 25.0;  // weight of the crop-focused term in the combined depth loss
    int bins = 16;        // depth bin count K
    int sdcl_period = 59;
    int cfdl_period = 9;
    double phi_min = 0.01;        // temperature floor for the contrastive loss
    double oacl_epsilon = 100.0;  // stabilizer inside log(N_p + eps)
    double crop_expand_min = 0.1;
    double crop_expand_max = 0.5;
    double center_sigma_frac = 0.5;  // sigma as a fraction of the crop half-diagonal
    BinWeightScheme weight_scheme = BinWeightScheme::kInverseCenter;

    // Mixing weights between the supervision terms.
    double photometric_weight = 1.0;
    double depth_weight = 1.0;
    double oacl_weight = 0.1;

    void validate() const {
        if (!(kappa > 0.0)) throw std::invalid_argument("LossConfig: kappa must be > 0");
        if (bins < 2) throw std::invalid_argument("LossConfig: bins must be >= 2");
        if (sdcl_period < 1 || cfdl_period < 1)
            throw std::invalid_argument("LossConfig: periods must be >= 1");
        if (!(phi_min > 0.0)) throw std::invalid_argument("LossConfig: phi_min must be > 0");
        if (!(crop_expand_min >= 0.0) || !(crop_expand_max >= crop_expand_min))
            throw std::invalid_argument("LossConfig: bad crop expansion range");
        if (!(center_sigma_frac > 0.0))
            throw std::invalid_argument("LossConfig: center_sigma_frac must be > 0");
    }
};

/// Scalar loss plus its gradient w.r.t. the map it was computed from.
struct LossValue {
    double value = 0.0;
    ImageD grad;
};

/// Mean absolute color error over the supervised pixels; gradient is zero
/// elsewhere. An empty supervision mask yields zero loss, not an error.
inline LossValue photometric_loss(const ImageD& rendered, const ImageD& target,
                                  const Mask& supervision) {
    if (!rendered.same_shape(target))
        throw std::invalid_argument("photometric_loss: rendered/target shape mismatch");
    if (supervision.height() != rendered.height() || supervision.width() != rendered.width())
        throw std::invalid_argument("photometric_loss: mask shape mismatch");
    LossValue out;
    out.grad = ImageD(rendered.height(), rendered.width(), rendered.channels(), 0.0);
    const std::size_t n_pix = count_true(supervision);
    if (n_pix == 0) return out;
    const double denom = static_cast<double>(n_pix) * rendered.channels();
    double sum = 0.0;
    for (int y = 0; y < rendered.height(); ++y)
        for (int x = 0; x < rendered.width(); ++x) {
            if (!supervision.at(y, x)) continue;
            for (int c = 0; c < rendered.channels(); ++c) {
                const double d = rendered.at(y, x, c) - target.at(y, x, c);
                sum += std::abs(d);
                out.grad.at(y, x, c) = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / denom;
            }
        }
    out.value = sum / denom;
    return out;
}

/// Evenly spaced ground-truth depth bins over a region, with the mean
/// *rendered* depth and a reliability weight per bin.
struct DepthBinPartition {
    int bin_count = 0;
    std::vector<double> bin_edges;    // bin_count + 1, ascending
    std::vector<Mask> masks;          // disjoint, union covers the region
    std::vector<std::size_t> sizes;   // |M_k|
    std::vector<double> bin_means;    // mean rendered depth; 0 when the bin is empty
    std::vector<double> weights;      // w_k
};

namespace detail {

inline double bin_weight(double normalized_center, BinWeightScheme scheme) {
    switch (scheme) {
        case BinWeightScheme::kInverseCenter: return 1.0 / (1.0 + normalized_center);
        case BinWeightScheme::kUniform: return 1.0;
        case BinWeightScheme::kExpDecay: return std::exp(-normalized_center);
    }
    return 1.0;
}

}  // namespace detail

inline DepthBinPartition partition_depth_bins(const ImageD& gt_depth,
                                              const ImageD& rendered_depth, const Mask& region,
                                              int bin_count, BinWeightScheme scheme) {
    if (!gt_depth.same_shape(rendered_depth))
        throw std::invalid_argument("partition_depth_bins: depth map shape mismatch");
    if (region.height() != gt_depth.height() || region.width() != gt_depth.width())
        throw std::invalid_argument("partition_depth_bins: region shape mismatch");
    if (bin_count < 1) throw std::invalid_argument("partition_depth_bins: bin_count < 1");
    if (!any_true(region)) throw std::invalid_argument("partition_depth_bins: empty region");

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int y = 0; y < region.height(); ++y)
        for (int x = 0; x < region.width(); ++x)
            if (region.at(y, x)) {
                const double v = gt_depth.at(y, x);
                if (!std::isfinite(v))
                    throw std::invalid_argument(
                        "partition_depth_bins: non-finite ground-truth depth in region");
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }

    DepthBinPartition part;
    if (hi <= lo) {  // single ground-truth value: one bin covers the region
        part.bin_count = 1;
        part.bin_edges = {lo, hi};
        part.masks.push_back(region);
        part.weights.push_back(1.0);
    } else {
        part.bin_count = bin_count;
        part.bin_edges.resize(bin_count + 1);
        for (int k = 0; k <= bin_count; ++k)
            part.bin_edges[k] = lo + (hi - lo) * k / bin_count;
        part.masks.assign(bin_count, Mask(region.height(), region.width(), 1, 0));
        for (int y = 0; y < region.height(); ++y)
            for (int x = 0; x < region.width(); ++x) {
                if (!region.at(y, x)) continue;
                const double v = gt_depth.at(y, x);
                int k = static_cast<int>((v - lo) / (hi - lo) * bin_count);
                k = std::clamp(k, 0, bin_count - 1);  // last bin right-inclusive
                part.masks[k].at(y, x) = 1;
            }
        // Normalized bin centers in [0,1]; farther bins get lower weight.
        const double c0 = 0.5 * (part.bin_edges[0] + part.bin_edges[1]);
        const double c1 = 0.5 * (part.bin_edges[bin_count - 1] + part.bin_edges[bin_count]);
        for (int k = 0; k < bin_count; ++k) {
            const double c = 0.5 * (part.bin_edges[k] + part.bin_edges[k + 1]);
            const double t = c1 > c0 ? (c - c0) / (c1 - c0) : 0.0;
            part.weights.push_back(detail::bin_weight(t, scheme));
        }
    }

    part.sizes.resize(part.bin_count);
    part.bin_means.assign(part.bin_count, 0.0);
    for (int k = 0; k < part.bin_count; ++k) {
        double sum = 0.0;
        std::size_t n = 0;
        for (int y = 0; y < region.height(); ++y)
            for (int x = 0; x < region.width(); ++x)
                if (part.masks[k].at(y, x)) {
                    sum += rendered_depth.at(y, x);
                    ++n;
                }
        part.sizes[k] = n;
        if (n > 0) part.bin_means[k] = sum / static_cast<double>(n);
    }
    return part;
}

/// Weighted soft depth clustering: per-bin mean absolute deviation of the
/// rendered depth from the bin's mean rendered depth, aggregated with the
/// bin weights over populated bins. The bin mean is treated as a function of
/// the rendered depth, so its gradient contribution is included.
inline LossValue depth_clustering_loss(const DepthBinPartition& part,
                                       const ImageD& rendered_depth) {
    LossValue out;
    out.grad = ImageD(rendered_depth.height(), rendered_depth.width(), 1, 0.0);
    double weight_total = 0.0;
    for (int k = 0; k < part.bin_count; ++k)
        if (part.sizes[k] > 0) weight_total += part.weights[k];
    if (weight_total <= 0.0) return out;  // no populated bins

    double acc = 0.0;
    for (int k = 0; k < part.bin_count; ++k) {
        const std::size_t n = part.sizes[k];
        if (n == 0) continue;
        const double mu = part.bin_means[k];
        const double inv_n = 1.0 / static_cast<double>(n);
        double loss_k = 0.0;
        double sign_sum = 0.0;
        const Mask& m = part.masks[k];
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x) {
                if (!m.at(y, x)) continue;
                const double d = rendered_depth.at(y, x) - mu;
                loss_k += std::abs(d);
                sign_sum += d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            }
        loss_k *= inv_n;
        acc += part.weights[k] * loss_k;
        const double scale = part.weights[k] / weight_total * inv_n;
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x) {
                if (!m.at(y, x)) continue;
                const double d = rendered_depth.at(y, x) - mu;
                const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                out.grad.at(y, x) += scale * (sign - inv_n * sign_sum);
            }
    }
    out.value = acc / weight_total;
    return out;
}

/// Crop-focused variant: the same binning inside a randomly expanded crop of
/// the inpaint-mask bounding box, with a Gaussian center weighting applied to
/// each pixel's residual.
inline LossValue crop_focused_depth_loss(const ImageD& gt_depth, const ImageD& rendered_depth,
                                         const Mask& inpaint_mask, std::mt19937_64& rng,
                                         const LossConfig& cfg) {
    if (!gt_depth.same_shape(rendered_depth))
        throw std::invalid_argument("crop_focused_depth_loss: depth shape mismatch");
    if (!any_true(inpaint_mask))
        throw std::invalid_argument("crop_focused_depth_loss: empty inpaint mask");

    LossValue out;
    out.grad = ImageD(rendered_depth.height(), rendered_depth.width(), 1, 0.0);

    const PixelRect box = mask_bounding_box(inpaint_mask);
    std::uniform_real_distribution<double> expand(cfg.crop_expand_min, cfg.crop_expand_max);
    const double ex_l = expand(rng), ex_r = expand(rng);
    const double ex_t = expand(rng), ex_b = expand(rng);
    PixelRect crop;
    crop.x0 = std::max(0, static_cast<int>(std::floor(box.x0 - ex_l * box.width())));
    crop.x1 = std::min(gt_depth.width(), static_cast<int>(std::ceil(box.x1 + ex_r * box.width())));
    crop.y0 = std::max(0, static_cast<int>(std::floor(box.y0 - ex_t * box.height())));
    crop.y1 =
        std::min(gt_depth.height(), static_cast<int>(std::ceil(box.y1 + ex_b * box.height())));
    if (crop.empty()) return out;

    Mask crop_mask(gt_depth.height(), gt_depth.width(), 1, 0);
    for (int y = crop.y0; y < crop.y1; ++y)
        for (int x = crop.x0; x < crop.x1; ++x) crop_mask.at(y, x) = 1;

    const DepthBinPartition part =
        partition_depth_bins(gt_depth, rendered_depth, crop_mask, cfg.bins, cfg.weight_scheme);

    const double ctr_x = 0.5 * (crop.x0 + crop.x1 - 1);
    const double ctr_y = 0.5 * (crop.y0 + crop.y1 - 1);
    const double half_diag = 0.5 * std::hypot(static_cast<double>(crop.width()),
                                              static_cast<double>(crop.height()));
    const double sigma = std::max(cfg.center_sigma_frac * half_diag, 1e-9);
    auto center_weight = [&](int y, int x) {
        const double dx = x - ctr_x, dy = y - ctr_y;
        return std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
    };

    double weight_total = 0.0;
    for (int k = 0; k < part.bin_count; ++k)
        if (part.sizes[k] > 0) weight_total += part.weights[k];
    if (weight_total <= 0.0) return out;

    double acc = 0.0;
    for (int k = 0; k < part.bin_count; ++k) {
        const std::size_t n = part.sizes[k];
        if (n == 0) continue;
        const double mu = part.bin_means[k];
        const double inv_n = 1.0 / static_cast<double>(n);
        const Mask& m = part.masks[k];
        double loss_k = 0.0;
        double weighted_sign_sum = 0.0;
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x) {
                if (!m.at(y, x)) continue;
                const double d = rendered_depth.at(y, x) - mu;
                const double g = center_weight(y, x);
                loss_k += g * std::abs(d);
                weighted_sign_sum += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        loss_k *= inv_n;
        acc += part.weights[k] * loss_k;
        const double scale = part.weights[k] / weight_total * inv_n;
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x) {
                if (!m.at(y, x)) continue;
                const double d = rendered_depth.at(y, x) - mu;
                const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                out.grad.at(y, x) += scale * (center_weight(y, x) * sign - inv_n * weighted_sign_sum);
            }
    }
    out.value = acc / weight_total;
    return out;
}

/// Combined depth supervision.
inline double depth_loss(double sdcl_value, double cfdl_value, double kappa) {
    if (sdcl_value < 0.0 || cfdl_value < 0.0)
        throw std::invalid_argument("depth_loss: loss terms must be non-negative");
    return sdcl_value + kappa * cfdl_value;
}

using FeatureVec = Eigen::Matrix<double, kFeatureDim, 1>;

/// Dispersion-scaled temperature of one cluster of (normalized) features.
inline double cluster_temperature(const std::vector<FeatureVec>& features, double epsilon,
                                  double phi_min) {
    if (features.empty()) throw std::invalid_argument("cluster_temperature: empty cluster");
    FeatureVec centroid = FeatureVec::Zero();
    for (const auto& f : features) centroid += f;
    centroid /= static_cast<double>(features.size());
    double dispersion = 0.0;
    for (const auto& f : features) dispersion += (f - centroid).norm();
    dispersion /= static_cast<double>(features.size());
    const double phi = dispersion * std::log(static_cast<double>(features.size()) + epsilon);
    return std::max(phi_min, phi);
}

/// Per-segment clusters of normalized rendered features, their centroids and
/// temperatures, plus bookkeeping for the gradient pass.
struct FeatureClusterSet {
    struct Cluster {
        std::vector<int> pixel;           // flat y*W+x of members
        std::vector<FeatureVec> members;  // normalized features
        FeatureVec centroid = FeatureVec::Zero();
        double temperature = 0.0;
        bool floored = false;  // temperature hit phi_min
        double dispersion = 0.0;
    };
    std::vector<Cluster> clusters;
};

inline constexpr double kFeatureNormEps = 1e-8;

inline FeatureClusterSet build_feature_clusters(const ImageD& feature_map,
                                                const std::vector<Mask>& segments,
                                                double epsilon, double phi_min) {
    if (feature_map.channels() != kFeatureDim)
        throw std::invalid_argument("build_feature_clusters: expected a 16-channel map");
    FeatureClusterSet set;
    for (const auto& seg : segments) {
        if (seg.height() != feature_map.height() || seg.width() != feature_map.width())
            throw std::invalid_argument("build_feature_clusters: segment shape mismatch");
        FeatureClusterSet::Cluster cl;
        for (int y = 0; y < seg.height(); ++y)
            for (int x = 0; x < seg.width(); ++x) {
                if (!seg.at(y, x)) continue;
                FeatureVec f;
                for (int k = 0; k < kFeatureDim; ++k) f[k] = feature_map.at(y, x, k);
                const double n = f.norm();
                f /= std::max(n, kFeatureNormEps);
                cl.pixel.push_back(y * seg.width() + x);
                cl.members.push_back(f);
            }
        if (cl.members.empty()) continue;
        for (const auto& f : cl.members) cl.centroid += f;
        cl.centroid /= static_cast<double>(cl.members.size());
        for (const auto& f : cl.members) cl.dispersion += (f - cl.centroid).norm();
        cl.dispersion /= static_cast<double>(cl.members.size());
        const double phi =
            cl.dispersion * std::log(static_cast<double>(cl.members.size()) + epsilon);
        cl.floored = phi <= phi_min;
        cl.temperature = std::max(phi_min, phi);
        set.clusters.push_back(std::move(cl));
    }
    return set;
}

/// Contrastive clustering of the rendered feature map against segment masks:
/// pulls each pixel's feature toward its own segment centroid and away from
/// the others, with per-cluster temperatures. Segments must be disjoint;
/// fewer than two populated segments yields zero loss. The gradient
/// propagates through normalization, centroids and temperatures, matching
/// finite differences of the loss value.
inline LossValue object_contrastive_loss(const ImageD& feature_map,
                                         const std::vector<Mask>& segments, double epsilon,
                                         double phi_min) {
    LossValue out;
    out.grad = ImageD(feature_map.height(), feature_map.width(), kFeatureDim, 0.0);

    {
        Mask seen(feature_map.height(), feature_map.width(), 1, 0);
        for (const auto& seg : segments) {
            for (int y = 0; y < seg.height(); ++y)
                for (int x = 0; x < seg.width(); ++x)
                    if (seg.at(y, x)) {
                        if (seen.at(y, x))
                            throw std::invalid_argument(
                                "object_contrastive_loss: segments overlap");
                        seen.at(y, x) = 1;
                    }
        }
    }

    FeatureClusterSet set = build_feature_clusters(feature_map, segments, epsilon, phi_min);
    const std::size_t n_clusters = set.clusters.size();
    if (n_clusters < 2) return out;

    const double inv_clusters = 1.0 / static_cast<double>(n_clusters);
    std::vector<FeatureVec> g_centroid(n_clusters, FeatureVec::Zero());
    std::vector<double> g_phi(n_clusters, 0.0);
    // Per-member normalized-feature gradients, filled per cluster.
    std::vector<std::vector<FeatureVec>> g_member(n_clusters);

    double loss = 0.0;
    std::vector<double> z(n_clusters);
    for (std::size_t p = 0; p < n_clusters; ++p) {
        auto& cl = set.clusters[p];
        g_member[p].assign(cl.members.size(), FeatureVec::Zero());
        const double inv_np = 1.0 / static_cast<double>(cl.members.size());
        for (std::size_t q = 0; q < cl.members.size(); ++q) {
            const FeatureVec& f = cl.members[q];
            double z_max = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s < n_clusters; ++s) {
                z[s] = f.dot(set.clusters[s].centroid) / set.clusters[s].temperature;
                z_max = std::max(z_max, z[s]);
            }
            double denom = 0.0;
            for (std::size_t s = 0; s < n_clusters; ++s) denom += std::exp(z[s] - z_max);
            const double lse = z_max + std::log(denom);
            loss += -(z[p] - lse) * inv_clusters * inv_np;

            for (std::size_t s = 0; s < n_clusters; ++s) {
                const double prob = std::exp(z[s] - z_max) / denom;
                const double gz =
                    -inv_clusters * inv_np * ((s == p ? 1.0 : 0.0) - prob);
                const auto& cs = set.clusters[s];
                g_member[p][q] += gz / cs.temperature * cs.centroid;
                g_centroid[s] += gz / cs.temperature * f;
                g_phi[s] += gz * (-z[s] / cs.temperature);
            }
        }
    }

    // Temperature and centroid chains back to member features.
    for (std::size_t s = 0; s < n_clusters; ++s) {
        auto& cl = set.clusters[s];
        const double inv_ns = 1.0 / static_cast<double>(cl.members.size());
        if (!cl.floored) {
            const double g_disp =
                g_phi[s] * std::log(static_cast<double>(cl.members.size()) + epsilon);
            FeatureVec unit_sum = FeatureVec::Zero();
            for (std::size_t q = 0; q < cl.members.size(); ++q) {
                const FeatureVec diff = cl.members[q] - cl.centroid;
                const double n = diff.norm();
                if (n > 0.0) {
                    const FeatureVec u = diff / n;
                    g_member[s][q] += g_disp * inv_ns * u;
                    unit_sum += u;
                }
            }
            g_centroid[s] -= g_disp * inv_ns * unit_sum;
        }
        for (std::size_t q = 0; q < cl.members.size(); ++q)
            g_member[s][q] += inv_ns * g_centroid[s];
    }

    // Normalization chain back to the raw feature map.
    for (std::size_t s = 0; s < n_clusters; ++s) {
        const auto& cl = set.clusters[s];
        for (std::size_t q = 0; q < cl.members.size(); ++q) {
            const int pix = cl.pixel[q];
            const int y = pix / feature_map.width(), x = pix % feature_map.width();
            FeatureVec raw;
            for (int k = 0; k < kFeatureDim; ++k) raw[k] = feature_map.at(y, x, k);
            const double n = raw.norm();
            const FeatureVec& gf = g_member[s][q];
            FeatureVec gx;
            if (n > kFeatureNormEps) {
                const FeatureVec f = raw / n;
                gx = (gf - f * f.dot(gf)) / n;
            } else {
                gx = gf / kFeatureNormEps;
            }
            for (int k = 0; k < kFeatureDim; ++k) out.grad.at(y, x, k) += gx[k];
        }
    }

    out.value = loss;
    return out;
}

}  // namespace splatpaint
