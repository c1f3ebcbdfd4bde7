#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "splatpaint/losses.hpp"

using namespace splatpaint;

namespace {

ImageD random_map(std::mt19937_64& rng, int h, int w, int c, double lo, double hi) {
    std::uniform_real_distribution<double> unif(lo, hi);
    ImageD img(h, w, c);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = unif(rng);
    return img;
}

Mask full_mask(int h, int w) { return Mask(h, w, 1, 1); }

/// Central-difference check of a loss gradient over every map entry.
template <typename LossFn>
double max_grad_rel_err(const ImageD& map, const LossFn& loss_fn) {
    ImageD probe = map;
    const LossValue base = loss_fn(probe);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe.data()[i];
        probe.data()[i] = saved + h;
        const double up = loss_fn(probe).value;
        probe.data()[i] = saved - h;
        const double dn = loss_fn(probe).value;
        probe.data()[i] = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double an = base.grad.data()[i];
        worst = std::max(worst, std::abs(an - fd) /
                                    std::max({1e-6, std::abs(an), std::abs(fd)}));
    }
    return worst;
}

}  // namespace

TEST_CASE("photometric loss basics") {
    ImageD a(2, 1, 3, 0.5), b(2, 1, 3, 0.5);
    SECTION("identical images give zero") {
        const LossValue lv = photometric_loss(a, b, full_mask(2, 1));
        REQUIRE(lv.value == 0.0);
    }
    SECTION("all-false mask gives zero loss and zero gradient") {
        b.fill(0.9);
        const LossValue lv = photometric_loss(a, b, Mask(2, 1, 1, 0));
        REQUIRE(lv.value == 0.0);
        for (std::size_t i = 0; i < lv.grad.size(); ++i) REQUIRE(lv.grad.data()[i] == 0.0);
    }
    SECTION("2x1 map with per-pixel diffs 0.2 and 0.4 averages to 0.3") {
        for (int c = 0; c < 3; ++c) {
            b.at(0, 0, c) = a.at(0, 0, c) - 0.2;
            b.at(1, 0, c) = a.at(1, 0, c) + 0.4;
        }
        const LossValue lv = photometric_loss(a, b, full_mask(2, 1));
        REQUIRE(lv.value == Catch::Approx(0.3).margin(1e-12));
    }
}

TEST_CASE("photometric gradient matches finite differences") {
    std::mt19937_64 rng(21);
    const ImageD target = random_map(rng, 16, 16, 3, 0.0, 1.0);
    const ImageD rendered = random_map(rng, 16, 16, 3, 0.0, 1.0);
    Mask mask(16, 16, 1, 0);
    std::uniform_int_distribution<int> coin(0, 1);
    for (std::size_t i = 0; i < mask.size(); ++i) mask.data()[i] = coin(rng);
    const double err = max_grad_rel_err(rendered, [&](const ImageD& m) {
        return photometric_loss(m, target, mask);
    });
    REQUIRE(err < 1e-3);
}

TEST_CASE("partition splits a two-level map cleanly") {
    ImageD gt(4, 4, 1), rendered(4, 4, 1, 0.0);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) gt.at(y, x) = y < 2 ? 1.0 : 3.0;
    const auto part =
        partition_depth_bins(gt, rendered, full_mask(4, 4), 2, BinWeightScheme::kInverseCenter);
    REQUIRE(part.bin_count == 2);
    REQUIRE(part.sizes[0] == 8);
    REQUIRE(part.sizes[1] == 8);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            REQUIRE(static_cast<bool>(part.masks[0].at(y, x)) == (y < 2));
            REQUIRE(static_cast<bool>(part.masks[1].at(y, x)) == (y >= 2));
        }
}

TEST_CASE("constant ground truth collapses to one populated bin") {
    ImageD gt(4, 4, 1, 2.5), rendered(4, 4, 1, 1.0);
    const auto part =
        partition_depth_bins(gt, rendered, full_mask(4, 4), 8, BinWeightScheme::kInverseCenter);
    REQUIRE(part.bin_count == 1);
    REQUIRE(part.sizes[0] == 16);
    REQUIRE(part.bin_means[0] == Catch::Approx(1.0));
}

TEST_CASE("default bin weights follow 1/(1+normalized_center)") {
    // gt uniform over [0,4), K=4: centers 0.5,1.5,2.5,3.5 -> normalized
    // 0,1/3,2/3,1 -> weights 1, 3/4, 3/5, 1/2.
    ImageD gt(1, 16, 1), rendered(1, 16, 1, 0.0);
    for (int x = 0; x < 16; ++x) gt.at(0, x) = 4.0 * x / 16.0;
    const auto part =
        partition_depth_bins(gt, rendered, full_mask(1, 16), 4, BinWeightScheme::kInverseCenter);
    REQUIRE(part.weights[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(part.weights[1] == Catch::Approx(0.75).margin(1e-12));
    REQUIRE(part.weights[2] == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(part.weights[3] == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("depth clustering loss hand cases") {
    SECTION("rendered constant within every bin gives zero") {
        ImageD gt(2, 2, 1), rendered(2, 2, 1);
        gt.at(0, 0) = gt.at(0, 1) = 1.0;
        gt.at(1, 0) = gt.at(1, 1) = 3.0;
        rendered.at(0, 0) = rendered.at(0, 1) = 5.0;
        rendered.at(1, 0) = rendered.at(1, 1) = 7.5;
        const auto part = partition_depth_bins(gt, rendered, full_mask(2, 2), 2,
                                               BinWeightScheme::kInverseCenter);
        REQUIRE(depth_clustering_loss(part, rendered).value == Catch::Approx(0.0).margin(1e-15));
    }
    SECTION("one bin with rendered values 1 and 3 gives loss 1") {
        ImageD gt(1, 2, 1, 2.0), rendered(1, 2, 1);
        rendered.at(0, 0) = 1.0;
        rendered.at(0, 1) = 3.0;
        const auto part = partition_depth_bins(gt, rendered, full_mask(1, 2), 4,
                                               BinWeightScheme::kInverseCenter);
        REQUIRE(depth_clustering_loss(part, rendered).value == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("two weighted bins aggregate to 5/6") {
        // Per-bin losses (1.0, 0.5) with weights (1.0, 0.5):
        // (1*1 + 0.5*0.5) / 1.5 = 5/6.
        ImageD gt(2, 2, 1), rendered(2, 2, 1);
        gt.at(0, 0) = gt.at(0, 1) = 0.0;  // bin 1 (center 0 -> weight 1)
        gt.at(1, 0) = gt.at(1, 1) = 4.0;  // bin 2 (center 1 -> weight 1/2)... see below
        // With K=2 over [0,4]: centers 1 and 3, normalized 0 and 1, weights 1 and 0.5.
        rendered.at(0, 0) = 0.0;
        rendered.at(0, 1) = 2.0;  // mean 1, L = 1.0
        rendered.at(1, 0) = 0.0;
        rendered.at(1, 1) = 1.0;  // mean 0.5, L = 0.5
        const auto part = partition_depth_bins(gt, rendered, full_mask(2, 2), 2,
                                               BinWeightScheme::kInverseCenter);
        REQUIRE(part.weights[0] == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(part.weights[1] == Catch::Approx(0.5).margin(1e-12));
        REQUIRE(depth_clustering_loss(part, rendered).value ==
                Catch::Approx(5.0 / 6.0).margin(1e-12));
    }
}

TEST_CASE("depth clustering algebra: shift invariance, homogeneity, lower bound") {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 100; ++trial) {
        const ImageD gt = random_map(rng, 32, 32, 1, 1.0, 6.0);
        const ImageD rendered = random_map(rng, 32, 32, 1, 0.5, 8.0);
        const auto part = partition_depth_bins(gt, rendered, full_mask(32, 32), 8,
                                               BinWeightScheme::kInverseCenter);
        const double base = depth_clustering_loss(part, rendered).value;
        REQUIRE(base >= 0.0);

        ImageD shifted = rendered;
        const double shift = 3.7;
        for (std::size_t i = 0; i < shifted.size(); ++i) shifted.data()[i] += shift;
        const auto part_shift = partition_depth_bins(gt, shifted, full_mask(32, 32), 8,
                                                     BinWeightScheme::kInverseCenter);
        REQUIRE(std::abs(depth_clustering_loss(part_shift, shifted).value - base) < 1e-9);

        ImageD scaled = rendered;
        const double s = 2.5;
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled.data()[i] *= s;
        const auto part_scale = partition_depth_bins(gt, scaled, full_mask(32, 32), 8,
                                                     BinWeightScheme::kInverseCenter);
        REQUIRE(depth_clustering_loss(part_scale, scaled).value ==
                Catch::Approx(s * base).epsilon(1e-12));
    }
}

TEST_CASE("depth clustering gradient matches finite differences") {
    std::mt19937_64 rng(23);
    const ImageD gt = random_map(rng, 16, 16, 1, 1.0, 5.0);
    const ImageD rendered = random_map(rng, 16, 16, 1, 1.0, 5.0);
    const double err = max_grad_rel_err(rendered, [&](const ImageD& m) {
        const auto part =
            partition_depth_bins(gt, m, full_mask(16, 16), 4, BinWeightScheme::kInverseCenter);
        return depth_clustering_loss(part, m);
    });
    REQUIRE(err < 1e-3);
}

TEST_CASE("crop-focused loss equals explicitly weighted clustering on a full-image crop") {
    std::mt19937_64 rng(24);
    const ImageD gt = random_map(rng, 24, 24, 1, 1.0, 5.0);
    const ImageD rendered = random_map(rng, 24, 24, 1, 1.0, 5.0);
    LossConfig cfg;
    cfg.crop_expand_min = cfg.crop_expand_max = 0.0;
    cfg.bins = 4;

    std::mt19937_64 rng_loss(1);
    const LossValue actual =
        crop_focused_depth_loss(gt, rendered, full_mask(24, 24), rng_loss, cfg);

    // Oracle: clustering with explicit per-pixel Gaussian weights on the
    // residuals, aggregated with the same bin weights.
    const auto part =
        partition_depth_bins(gt, rendered, full_mask(24, 24), 4, cfg.weight_scheme);
    const double ctr = 0.5 * 23.0;
    const double sigma = cfg.center_sigma_frac * 0.5 * std::hypot(24.0, 24.0);
    double weight_total = 0.0, acc = 0.0;
    for (int k = 0; k < part.bin_count; ++k) {
        if (part.sizes[k] == 0) continue;
        weight_total += part.weights[k];
        double lk = 0.0;
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                if (!part.masks[k].at(y, x)) continue;
                const double g =
                    std::exp(-((x - ctr) * (x - ctr) + (y - ctr) * (y - ctr)) /
                             (2.0 * sigma * sigma));
                lk += g * std::abs(rendered.at(y, x) - part.bin_means[k]);
            }
        acc += part.weights[k] * lk / static_cast<double>(part.sizes[k]);
    }
    REQUIRE(actual.value == Catch::Approx(acc / weight_total).margin(1e-12));
}

TEST_CASE("crop-focused loss is zero for piecewise-constant rendered depth") {
    ImageD gt(8, 8, 1), rendered(8, 8, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            gt.at(y, x) = y < 4 ? 1.0 : 3.0;
            rendered.at(y, x) = y < 4 ? 2.0 : 5.0;
        }
    Mask mask(8, 8, 1, 0);
    for (int y = 2; y < 6; ++y)
        for (int x = 2; x < 6; ++x) mask.at(y, x) = 1;
    LossConfig cfg;
    cfg.bins = 2;
    std::mt19937_64 rng(7);
    REQUIRE(crop_focused_depth_loss(gt, rendered, mask, rng, cfg).value ==
            Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("center pixel of the crop has unit weight") {
    // 1x1 mask at the crop center with zero expansion: the single residual is
    // multiplied by exp(0) = 1, so the loss equals |d - mu| = 0 for one pixel;
    // use two pixels sharing a bin instead and compare against the unweighted
    // computation at the exact center.
    ImageD gt(9, 9, 1, 2.0), rendered(9, 9, 1, 0.0);
    rendered.at(4, 4) = 1.0;
    Mask mask(9, 9, 1, 1);
    LossConfig cfg;
    cfg.crop_expand_min = cfg.crop_expand_max = 0.0;
    std::mt19937_64 rng(8);
    const LossValue lv = crop_focused_depth_loss(gt, rendered, mask, rng, cfg);
    // Center residual weight is exactly 1: recompute the single-bin loss.
    const double mu = 1.0 / 81.0;
    double acc = 0.0;
    const double sigma = cfg.center_sigma_frac * 0.5 * std::hypot(9.0, 9.0);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) {
            const double g =
                std::exp(-((x - 4.0) * (x - 4.0) + (y - 4.0) * (y - 4.0)) /
                         (2.0 * sigma * sigma));
            const double w = (y == 4 && x == 4) ? 1.0 : g;  // center must be exp(0)=1
            acc += w * std::abs(rendered.at(y, x) - mu);
        }
    REQUIRE(lv.value == Catch::Approx(acc / 81.0).margin(1e-12));
}

TEST_CASE("crop-focused gradient matches finite differences") {
    std::mt19937_64 rng(25);
    const ImageD gt = random_map(rng, 16, 16, 1, 1.0, 5.0);
    const ImageD rendered = random_map(rng, 16, 16, 1, 1.0, 5.0);
    Mask mask(16, 16, 1, 0);
    for (int y = 5; y < 11; ++y)
        for (int x = 4; x < 12; ++x) mask.at(y, x) = 1;
    LossConfig cfg;
    cfg.bins = 4;
    const double err = max_grad_rel_err(rendered, [&](const ImageD& m) {
        std::mt19937_64 crop_rng(99);  // fixed crop across evaluations
        return crop_focused_depth_loss(gt, m, mask, crop_rng, cfg);
    });
    REQUIRE(err < 1e-3);
}

TEST_CASE("combined depth loss") {
    REQUIRE(depth_loss(0.0, 0.0, 25.0) == 0.0);
    REQUIRE(depth_loss(1.0, 0.1, 25.0) == Catch::Approx(3.5).margin(1e-12));
    REQUIRE(depth_loss(0.2, 0.0, 25.0) == Catch::Approx(0.2).margin(1e-15));
    // Linear in each argument with slopes 1 and kappa.
    std::mt19937_64 rng(26);
    std::uniform_real_distribution<double> unif(0.0, 2.0);
    for (int i = 0; i < 20; ++i) {
        const double a = unif(rng), b = unif(rng), da = unif(rng), db = unif(rng);
        REQUIRE(depth_loss(a + da, b, 25.0) - depth_loss(a, b, 25.0) ==
                Catch::Approx(da).margin(1e-12));
        REQUIRE(depth_loss(a, b + db, 25.0) - depth_loss(a, b, 25.0) ==
                Catch::Approx(25.0 * db).margin(1e-12));
    }
}

TEST_CASE("cluster temperature") {
    FeatureVec e0 = FeatureVec::Zero(), e1 = FeatureVec::Zero();
    e0[0] = 1.0;
    e1[0] = -1.0;
    SECTION("identical features floor at phi_min") {
        REQUIRE(cluster_temperature({e0, e0, e0}, 100.0, 0.01) == 0.01);
    }
    SECTION("two antipodal unit vectors give log(102)") {
        // centroid 0, each distance 1, dispersion 1 -> phi = log(2+100).
        REQUIRE(cluster_temperature({e0, e1}, 100.0, 0.01) ==
                Catch::Approx(std::log(102.0)).margin(1e-12));
    }
    SECTION("single feature floors at phi_min") {
        REQUIRE(cluster_temperature({e0}, 100.0, 0.01) == 0.01);
    }
}

namespace {

ImageD one_pixel_feature_map(const std::vector<FeatureVec>& features) {
    ImageD map(1, static_cast<int>(features.size()), kFeatureDim, 0.0);
    for (int x = 0; x < map.width(); ++x)
        for (int k = 0; k < kFeatureDim; ++k) map.at(0, x, k) = features[x][k];
    return map;
}

std::vector<Mask> one_pixel_segments(int n) {
    std::vector<Mask> segs;
    for (int i = 0; i < n; ++i) {
        Mask m(1, n, 1, 0);
        m.at(0, i) = 1;
        segs.push_back(m);
    }
    return segs;
}

}  // namespace

TEST_CASE("contrastive loss analytic cases") {
    FeatureVec e0 = FeatureVec::Zero(), e1 = FeatureVec::Zero();
    e0[0] = 1.0;
    e1[1] = 1.0;
    SECTION("orthogonal one-pixel clusters with floored temperature: loss ~ 0") {
        const ImageD map = one_pixel_feature_map({e0, e1});
        const LossValue lv = object_contrastive_loss(map, one_pixel_segments(2), 100.0, 0.01);
        REQUIRE(lv.value >= 0.0);
        REQUIRE(lv.value < 1e-6);
    }
    SECTION("both clusters sharing one feature vector: loss = log 2") {
        const ImageD map = one_pixel_feature_map({e0, e0});
        const LossValue lv = object_contrastive_loss(map, one_pixel_segments(2), 100.0, 0.01);
        REQUIRE(lv.value == Catch::Approx(std::log(2.0)).margin(1e-9));
    }
}

TEST_CASE("contrastive loss is invariant to segment relabeling and non-negative") {
    std::mt19937_64 rng(27);
    for (int trial = 0; trial < 10; ++trial) {
        const ImageD map = random_map(rng, 12, 12, kFeatureDim, -1.0, 1.0);
        std::vector<Mask> segs(3, Mask(12, 12, 1, 0));
        std::uniform_int_distribution<int> pick(0, 2);
        for (int y = 0; y < 12; ++y)
            for (int x = 0; x < 12; ++x) segs[pick(rng)].at(y, x) = 1;
        if (!any_true(segs[0]) || !any_true(segs[1]) || !any_true(segs[2])) continue;
        const double base = object_contrastive_loss(map, segs, 100.0, 0.01).value;
        REQUIRE(base >= 0.0);
        const double permuted =
            object_contrastive_loss(map, {segs[2], segs[0], segs[1]}, 100.0, 0.01).value;
        REQUIRE(permuted == Catch::Approx(base).epsilon(1e-12));
    }
}

TEST_CASE("raising a member's own-centroid similarity never raises its term") {
    // The per-member term is -z_own + logsumexp(z); with the cross-cluster
    // similarities held fixed it is non-increasing in z_own.
    std::mt19937_64 rng(28);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 4;
        std::vector<double> z(n);
        for (auto& v : z) v = 5.0 * unif(rng);
        const int own = trial % n;
        auto term = [&](double z_own) {
            double m = z_own;
            for (int s = 0; s < n; ++s)
                if (s != own) m = std::max(m, z[s]);
            double denom = std::exp(z_own - m);
            for (int s = 0; s < n; ++s)
                if (s != own) denom += std::exp(z[s] - m);
            return -(z_own - (m + std::log(denom)));
        };
        const double before = term(z[own]);
        const double after = term(z[own] + 2.0 * std::abs(unif(rng)));
        REQUIRE(after <= before + 1e-12);
    }
}

TEST_CASE("contrastive gradient matches finite differences") {
    std::mt19937_64 rng(29);
    const ImageD map = random_map(rng, 8, 8, kFeatureDim, -1.0, 1.0);
    std::vector<Mask> segs(3, Mask(8, 8, 1, 0));
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) segs[(y * 8 + x) % 3].at(y, x) = 1;
    const double err = max_grad_rel_err(map, [&](const ImageD& m) {
        return object_contrastive_loss(m, segs, 100.0, 0.01);
    });
    REQUIRE(err < 1e-3);
}

TEST_CASE("contrastive loss degenerate inputs") {
    std::mt19937_64 rng(30);
    const ImageD map = random_map(rng, 4, 4, kFeatureDim, -1.0, 1.0);
    SECTION("fewer than two populated segments gives zero") {
        std::vector<Mask> segs = {full_mask(4, 4), Mask(4, 4, 1, 0)};
        const LossValue lv = object_contrastive_loss(map, segs, 100.0, 0.01);
        REQUIRE(lv.value == 0.0);
    }
    SECTION("overlapping segments are rejected") {
        std::vector<Mask> segs = {full_mask(4, 4), full_mask(4, 4)};
        REQUIRE_THROWS_AS(object_contrastive_loss(map, segs, 100.0, 0.01),
                          std::invalid_argument);
    }
}
