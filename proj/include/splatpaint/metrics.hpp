#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatpaint/image.hpp"
#include "splatpaint/rasterizer.hpp"
#include "splatpaint/scene.hpp"

namespace splatpaint {

inline constexpr double kPsnrCap = 100.0;  // identical images report 100 dB

/// PSNR in dB over the mask (all pixels when the mask is empty/omitted),
/// assuming a [0,1] dynamic range. Capped at 100 dB.
inline double psnr(const ImageD& a, const ImageD& b, const Mask* mask = nullptr) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
    if (mask && (mask->height() != a.height() || mask->width() != a.width()))
        throw std::invalid_argument("psnr: mask shape mismatch");
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) {
            if (mask && !mask->at(y, x)) continue;
            for (int c = 0; c < a.channels(); ++c) {
                const double d = a.at(y, x, c) - b.at(y, x, c);
                sum += d * d;
                ++n;
            }
        }
    if (n == 0) throw std::invalid_argument("psnr: empty mask");
    const double mse = sum / static_cast<double>(n);
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int radius, double sigma) {
    std::vector<double> w(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        w[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += w[i + radius];
    }
    for (auto& v : w) v /= sum;
    return w;
}

/// Separable convolution with replicate borders, one channel.
inline ImageD blur_replicate(const ImageD& img, const std::vector<double>& window) {
    const int radius = static_cast<int>(window.size() / 2);
    ImageD tmp(img.height(), img.width(), 1), out(img.height(), img.width(), 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, img.width() - 1);
                acc += window[i + radius] * img.at(y, xx);
            }
            tmp.at(y, x) = acc;
        }
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, img.height() - 1);
                acc += window[i + radius] * tmp.at(yy, x);
            }
            out.at(y, x) = acc;
        }
    return out;
}

inline ImageD extract_channel(const ImageD& img, int c) {
    ImageD out(img.height(), img.width(), 1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) out.at(y, x) = img.at(y, x, c);
    return out;
}

}  // namespace detail

inline constexpr int kSsimRadius = 5;      // 11x11 window
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Per-pixel SSIM map (channel mean), 11x11 Gaussian window, sigma 1.5,
/// replicate borders, dynamic range 1.
inline ImageD ssim_map(const ImageD& a, const ImageD& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    if (a.height() < 2 * kSsimRadius + 1 || a.width() < 2 * kSsimRadius + 1)
        throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    const auto window = detail::gaussian_window(kSsimRadius, kSsimSigma);
    const double c1 = kSsimK1 * kSsimK1;
    const double c2 = kSsimK2 * kSsimK2;

    ImageD map(a.height(), a.width(), 1, 0.0);
    for (int ch = 0; ch < a.channels(); ++ch) {
        const ImageD ca = detail::extract_channel(a, ch);
        const ImageD cb = detail::extract_channel(b, ch);
        ImageD ca2(a.height(), a.width(), 1), cb2(a.height(), a.width(), 1),
            cab(a.height(), a.width(), 1);
        for (std::size_t i = 0; i < ca.size(); ++i) {
            ca2.data()[i] = ca.data()[i] * ca.data()[i];
            cb2.data()[i] = cb.data()[i] * cb.data()[i];
            cab.data()[i] = ca.data()[i] * cb.data()[i];
        }
        const ImageD mu_a = detail::blur_replicate(ca, window);
        const ImageD mu_b = detail::blur_replicate(cb, window);
        const ImageD m_a2 = detail::blur_replicate(ca2, window);
        const ImageD m_b2 = detail::blur_replicate(cb2, window);
        const ImageD m_ab = detail::blur_replicate(cab, window);
        for (std::size_t i = 0; i < map.size(); ++i) {
            const double ma = mu_a.data()[i], mb = mu_b.data()[i];
            const double va = m_a2.data()[i] - ma * ma;
            const double vb = m_b2.data()[i] - mb * mb;
            const double cov = m_ab.data()[i] - ma * mb;
            const double s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                             ((ma * ma + mb * mb + c1) * (va + vb + c2));
            map.data()[i] += s / a.channels();
        }
    }
    return map;
}

/// Mean SSIM over the mask (all pixels when omitted/empty mask is an error).
inline double ssim(const ImageD& a, const ImageD& b, const Mask* mask = nullptr) {
    const ImageD map = ssim_map(a, b);
    double sum = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < map.height(); ++y)
        for (int x = 0; x < map.width(); ++x) {
            if (mask && !mask->at(y, x)) continue;
            sum += map.at(y, x);
            ++n;
        }
    if (n == 0) throw std::invalid_argument("ssim: empty mask");
    return sum / static_cast<double>(n);
}

struct ViewEval {
    int view_id = 0;
    double psnr_full = 0.0;
    double ssim_full = 0.0;
    bool has_mask = false;  // masked metrics valid only when true
    double psnr_masked = 0.0;
    double ssim_masked = 0.0;
};

struct EvalReport {
    int round = 0;
    double seconds = 0.0;
    std::vector<ViewEval> views;
    double mean_psnr_full = 0.0;
    double mean_ssim_full = 0.0;
    double mean_psnr_masked = 0.0;  // over views with a mask
    double mean_ssim_masked = 0.0;
    int masked_view_count = 0;

    void finalize_means() {
        mean_psnr_full = mean_ssim_full = mean_psnr_masked = mean_ssim_masked = 0.0;
        masked_view_count = 0;
        if (views.empty()) return;
        for (const auto& v : views) {
            mean_psnr_full += v.psnr_full;
            mean_ssim_full += v.ssim_full;
            if (v.has_mask) {
                mean_psnr_masked += v.psnr_masked;
                mean_ssim_masked += v.ssim_masked;
                ++masked_view_count;
            }
        }
        mean_psnr_full /= views.size();
        mean_ssim_full /= views.size();
        if (masked_view_count > 0) {
            mean_psnr_masked /= masked_view_count;
            mean_ssim_masked /= masked_view_count;
        }
    }
};

/// Renders each held-out camera and scores it against the ground truth, full
/// image and masked region.
inline EvalReport evaluate_scene(const Scene& scene, const RasterConfig& cfg,
                                 const std::vector<Camera>& cameras,
                                 const std::vector<ImageD>& truth,
                                 const std::vector<Mask>& masks, const Vec3d& background_color,
                                 double background_depth, int round = 0) {
    if (cameras.size() != truth.size() || cameras.size() != masks.size())
        throw std::invalid_argument("evaluate_scene: view count mismatch");
    const auto t0 = std::chrono::steady_clock::now();
    EvalReport report;
    report.round = round;
    for (std::size_t i = 0; i < cameras.size(); ++i) {
        const RenderedView view =
            render(scene, cameras[i], cfg, background_color, background_depth, false);
        ViewEval ev;
        ev.view_id = static_cast<int>(i);
        ev.psnr_full = psnr(view.color, truth[i]);
        ev.ssim_full = ssim(view.color, truth[i]);
        if (any_true(masks[i])) {
            ev.has_mask = true;
            ev.psnr_masked = psnr(view.color, truth[i], &masks[i]);
            ev.ssim_masked = ssim(view.color, truth[i], &masks[i]);
        }
        report.views.push_back(ev);
    }
    report.finalize_means();
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// CSV schema (one row per view plus a "mean" row). The lpips and fid columns
// are reserved for external tooling and left empty; runtime is deliberately
// not a CSV column so reports from identical runs compare byte-for-byte.
inline constexpr const char* kEvalCsvHeader =
    "round,view,psnr_full,ssim_full,psnr_masked,ssim_masked,lpips_full,lpips_masked,fid";

inline void append_eval_csv(const EvalReport& report, std::ostream& os,
                            bool write_header = true) {
    if (write_header) os << kEvalCsvHeader << "\n";
    os << std::setprecision(12);
    auto masked = [](bool has, double v) {
        return has ? std::to_string(v) : std::string();
    };
    for (const auto& v : report.views) {
        os << report.round << "," << v.view_id << "," << v.psnr_full << "," << v.ssim_full
           << "," << masked(v.has_mask, v.psnr_masked) << ","
           << masked(v.has_mask, v.ssim_masked) << ",,,\n";
    }
    os << report.round << ",mean," << report.mean_psnr_full << "," << report.mean_ssim_full
       << "," << masked(report.masked_view_count > 0, report.mean_psnr_masked) << ","
       << masked(report.masked_view_count > 0, report.mean_ssim_masked) << ",,,\n";
}

inline void write_eval_csv(const EvalReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_eval_csv: cannot open " + path);
    append_eval_csv(report, f);
}

inline std::string format_eval_table(const EvalReport& report) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3);
    os << "view      psnr_full  ssim_full  psnr_masked  ssim_masked\n";
    for (const auto& v : report.views) {
        os << std::setw(4) << v.view_id << "      " << std::setw(9) << v.psnr_full << "  "
           << std::setw(9) << v.ssim_full << "  ";
        if (v.has_mask)
            os << std::setw(11) << v.psnr_masked << "  " << std::setw(11) << v.ssim_masked;
        else
            os << std::setw(11) << "-" << "  " << std::setw(11) << "-";
        os << "\n";
    }
    os << "mean      " << std::setw(9) << report.mean_psnr_full << "  " << std::setw(9)
       << report.mean_ssim_full << "  ";
    if (report.masked_view_count > 0)
        os << std::setw(11) << report.mean_psnr_masked << "  " << std::setw(11)
           << report.mean_ssim_masked;
    else
        os << std::setw(11) << "-" << "  " << std::setw(11) << "-";
    os << "\n(round " << report.round << ", " << std::setprecision(2) << report.seconds
       << " s)\n";
    return os.str();
}

}  // namespace splatpaint
