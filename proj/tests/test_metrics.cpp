#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "splatpaint/metrics.hpp"

using namespace splatpaint;

namespace {

ImageD random_image(std::mt19937_64& rng, int h, int w, int c) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    ImageD img(h, w, c);
    for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = unif(rng);
    return img;
}

// Independent SSIM oracle: direct 11x11 windowed statistics per pixel, no
// separable shortcut, same replicate-border definition.
double ssim_naive(const ImageD& a, const ImageD& b, const Mask* mask = nullptr) {
    const int radius = kSsimRadius;
    std::vector<double> w(2 * radius + 1);
    double wsum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        w[i + radius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
        wsum += w[i + radius];
    }
    for (auto& v : w) v /= wsum;
    const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;

    double total = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (mask && !mask->at(y, x)) continue;
            double pixel_ssim = 0.0;
            for (int ch = 0; ch < a.channels(); ++ch) {
                double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int yy = std::clamp(y + dy, 0, a.height() - 1);
                        const int xx = std::clamp(x + dx, 0, a.width() - 1);
                        const double wt = w[dy + radius] * w[dx + radius];
                        const double va = a.at(yy, xx, ch), vb = b.at(yy, xx, ch);
                        ma += wt * va;
                        mb += wt * vb;
                        maa += wt * va * va;
                        mbb += wt * vb * vb;
                        mab += wt * va * vb;
                    }
                const double var_a = maa - ma * ma, var_b = mbb - mb * mb;
                const double cov = mab - ma * mb;
                pixel_ssim += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                              ((ma * ma + mb * mb + c1) * (var_a + var_b + c2)) /
                              a.channels();
            }
            total += pixel_ssim;
            ++count;
        }
    return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("psnr basics") {
    std::mt19937_64 rng(41);
    const ImageD a = random_image(rng, 8, 8, 3);

    SECTION("identical images cap at 100 dB") { REQUIRE(psnr(a, a) == 100.0); }

    SECTION("constant difference of 0.1 gives 20 dB") {
        ImageD b = a;
        for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] += 0.1;
        REQUIRE(std::abs(psnr(a, b) - 20.0) < 1e-9);
    }

    SECTION("mask restricted to equal pixels of different images gives 100 dB") {
        ImageD b = a;
        for (int x = 0; x < 8; ++x)
            for (int c = 0; c < 3; ++c) b.at(0, x, c) = a.at(0, x, c) + 0.5;
        Mask mask(8, 8, 1, 1);
        for (int x = 0; x < 8; ++x) mask.at(0, x) = 0;
        REQUIRE(psnr(a, b, &mask) == 100.0);
        REQUIRE(psnr(a, b) < 100.0);
    }

    SECTION("empty mask is an error") {
        Mask empty(8, 8, 1, 0);
        REQUIRE_THROWS_AS(psnr(a, a, &empty), std::invalid_argument);
    }
}

TEST_CASE("psnr and ssim are symmetric") {
    std::mt19937_64 rng(42);
    const ImageD a = random_image(rng, 16, 16, 3);
    const ImageD b = random_image(rng, 16, 16, 3);
    REQUIRE(psnr(a, b) == psnr(b, a));
    REQUIRE(ssim(a, b) == Catch::Approx(ssim(b, a)).margin(1e-12));
}

TEST_CASE("ssim basics") {
    std::mt19937_64 rng(43);
    const ImageD a = random_image(rng, 16, 16, 3);

    SECTION("self similarity is 1") { REQUIRE(std::abs(ssim(a, a) - 1.0) < 1e-9); }

    SECTION("inverted non-constant image scores below 1") {
        ImageD b = a;
        for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] = 1.0 - b.data()[i];
        REQUIRE(ssim(a, b) < 1.0);
    }

    SECTION("window larger than the image is an error") {
        const ImageD tiny = random_image(rng, 8, 8, 1);
        REQUIRE_THROWS_AS(ssim(tiny, tiny), std::invalid_argument);
    }
}

TEST_CASE("ssim matches an independent direct implementation") {
    std::mt19937_64 rng(44);
    for (int trial = 0; trial < 100; ++trial) {
        const ImageD a = random_image(rng, 32, 32, 1);
        const ImageD b = random_image(rng, 32, 32, 1);
        REQUIRE(std::abs(ssim(a, b) - ssim_naive(a, b)) < 1e-6);
    }
}

TEST_CASE("masked ssim matches the oracle and all-true mask equals unmasked") {
    std::mt19937_64 rng(45);
    const ImageD a = random_image(rng, 24, 24, 3);
    const ImageD b = random_image(rng, 24, 24, 3);
    Mask mask(24, 24, 1, 0);
    for (int y = 6; y < 18; ++y)
        for (int x = 4; x < 16; ++x) mask.at(y, x) = 1;
    REQUIRE(std::abs(ssim(a, b, &mask) - ssim_naive(a, b, &mask)) < 1e-6);

    Mask all(24, 24, 1, 1);
    REQUIRE(ssim(a, b, &all) == Catch::Approx(ssim(a, b)).margin(1e-12));
    REQUIRE(psnr(a, b, &all) == Catch::Approx(psnr(a, b)).margin(1e-12));
}

TEST_CASE("evaluation report means recompute from per-view entries") {
    EvalReport report;
    for (int i = 0; i < 5; ++i) {
        ViewEval v;
        v.view_id = i;
        v.psnr_full = 20.0 + i;
        v.ssim_full = 0.5 + 0.05 * i;
        v.has_mask = i % 2 == 0;
        v.psnr_masked = 15.0 + i;
        v.ssim_masked = 0.4 + 0.05 * i;
        report.views.push_back(v);
    }
    report.finalize_means();
    double pf = 0, sf = 0, pm = 0, sm = 0;
    int nm = 0;
    for (const auto& v : report.views) {
        pf += v.psnr_full;
        sf += v.ssim_full;
        if (v.has_mask) {
            pm += v.psnr_masked;
            sm += v.ssim_masked;
            ++nm;
        }
    }
    REQUIRE(std::abs(report.mean_psnr_full - pf / 5) < 1e-12);
    REQUIRE(std::abs(report.mean_ssim_full - sf / 5) < 1e-12);
    REQUIRE(std::abs(report.mean_psnr_masked - pm / nm) < 1e-12);
    REQUIRE(std::abs(report.mean_ssim_masked - sm / nm) < 1e-12);
}
