#pragma once

#include <sys/stat.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "splatpaint/image.hpp"
#include "splatpaint/png_io.hpp"

namespace splatpaint {

struct AlignmentError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DepthAlignment {
    ImageD aligned;  // a * mono + b over the whole map
    double scale = 1.0;
    double shift = 0.0;
    bool fallback = false;  // degenerate or non-positive fit
};

/// Least-squares fit rendered ~ a * mono + b over the unmasked region,
/// constrained to a > 0 (falls back to a shift-only alignment otherwise).
/// Needs at least 16 finite sample pixels.
inline DepthAlignment align_depth(const ImageD& mono_depth, const ImageD& rendered_depth,
                                  const Mask& unmasked_region) {
    if (!mono_depth.same_shape(rendered_depth))
        throw std::invalid_argument("align_depth: depth shape mismatch");
    double sum_m = 0, sum_r = 0;
    std::size_t n = 0;
    for (int y = 0; y < mono_depth.height(); ++y)
        for (int x = 0; x < mono_depth.width(); ++x) {
            if (!unmasked_region.at(y, x)) continue;
            const double m = mono_depth.at(y, x), r = rendered_depth.at(y, x);
            if (!std::isfinite(m) || !std::isfinite(r)) continue;
            sum_m += m;
            sum_r += r;
            ++n;
        }
    if (n < 16) throw AlignmentError("align_depth: fewer than 16 valid pixels");
    const double mean_m = sum_m / n, mean_r = sum_r / n;
    double var_m = 0, cov = 0;
    for (int y = 0; y < mono_depth.height(); ++y)
        for (int x = 0; x < mono_depth.width(); ++x) {
            if (!unmasked_region.at(y, x)) continue;
            const double m = mono_depth.at(y, x), r = rendered_depth.at(y, x);
            if (!std::isfinite(m) || !std::isfinite(r)) continue;
            var_m += (m - mean_m) * (m - mean_m);
            cov += (m - mean_m) * (r - mean_r);
        }

    DepthAlignment out;
    if (var_m <= 1e-12 || cov / var_m <= 0.0) {
        out.fallback = true;
        out.scale = 1.0;
        out.shift = mean_r - mean_m;
    } else {
        out.scale = cov / var_m;
        out.shift = mean_r - out.scale * mean_m;
    }
    out.aligned = ImageD(mono_depth.height(), mono_depth.width(), 1);
    for (std::size_t i = 0; i < out.aligned.size(); ++i)
        out.aligned.data()[i] = out.scale * mono_depth.data()[i] + out.shift;
    return out;
}

/// Absolute depth discrepancy, restricted to the view's inpaint mask.
struct DepthErrorMap {
    ImageD error;  // zero outside the valid mask
    Mask valid;
    double cumulative = 0.0;
};

inline DepthErrorMap depth_error_map(const ImageD& rendered_depth, const ImageD& aligned_mono,
                                     const Mask& inpaint_mask) {
    if (!rendered_depth.same_shape(aligned_mono))
        throw std::invalid_argument("depth_error_map: shape mismatch");
    DepthErrorMap out;
    out.error = ImageD(rendered_depth.height(), rendered_depth.width(), 1, 0.0);
    out.valid = inpaint_mask;
    for (int y = 0; y < rendered_depth.height(); ++y)
        for (int x = 0; x < rendered_depth.width(); ++x) {
            if (!inpaint_mask.at(y, x)) continue;
            const double e = std::abs(rendered_depth.at(y, x) - aligned_mono.at(y, x));
            out.error.at(y, x) = e;
            out.cumulative += e;
        }
    return out;
}

/// Largest cumulative error among (view id, cumulative) candidates; ties go
/// to the lowest view id. No candidates means the refinement has converged.
inline std::optional<int> select_worst_view(
    const std::vector<std::pair<int, double>>& candidates) {
    std::optional<int> best;
    double best_err = -1.0;
    for (const auto& [id, err] : candidates) {
        if (err > best_err || (err == best_err && best && id < *best)) {
            best = id;
            best_err = err;
        }
    }
    return best;
}

/// Gradient magnitude with the standard (unnormalized) 3x3 Sobel kernels and
/// replicated borders.
inline ImageD sobel_gradient_magnitude(const ImageD& e) {
    if (e.channels() != 1)
        throw std::invalid_argument("sobel_gradient_magnitude: expected 1 channel");
    ImageD g(e.height(), e.width(), 1);
    auto sample = [&](int y, int x) {
        return e.at(std::clamp(y, 0, e.height() - 1), std::clamp(x, 0, e.width() - 1));
    };
    for (int y = 0; y < e.height(); ++y)
        for (int x = 0; x < e.width(); ++x) {
            const double right =
                sample(y - 1, x + 1) + 2.0 * sample(y, x + 1) + sample(y + 1, x + 1);
            const double left =
                sample(y - 1, x - 1) + 2.0 * sample(y, x - 1) + sample(y + 1, x - 1);
            const double bottom =
                sample(y + 1, x - 1) + 2.0 * sample(y + 1, x) + sample(y + 1, x + 1);
            const double top =
                sample(y - 1, x - 1) + 2.0 * sample(y - 1, x) + sample(y - 1, x + 1);
            g.at(y, x) = std::hypot(right - left, bottom - top);
        }
    return g;
}

enum class SgiThresholdMode { kPercentile, kAbsolute };
enum class InpaintBackendKind { kOracle, kExternal };

struct SgiConfig {
    double percentile = 85.0;      // of G over the eroded mask
    double tau_abs = 1e-3;         // absolute floor for the threshold
    SgiThresholdMode threshold_mode = SgiThresholdMode::kPercentile;
    int max_rounds = 8;
    double convergence_ratio = 0.05;  // of the initial worst cumulative error
    InpaintBackendKind backend = InpaintBackendKind::kOracle;
    std::string command;           // external template: {input} {mask} {output}
    double timeout_sec = 60.0;
    bool enabled = true;           // false = reference-only training

    void validate() const {
        if (!(percentile >= 0.0 && percentile <= 100.0))
            throw std::invalid_argument("SgiConfig: percentile out of range");
        if (!(tau_abs > 0.0)) throw std::invalid_argument("SgiConfig: tau_abs must be > 0");
        if (max_rounds < 0) throw std::invalid_argument("SgiConfig: max_rounds < 0");
        if (!(convergence_ratio >= 0.0))
            throw std::invalid_argument("SgiConfig: convergence_ratio < 0");
        if (!(timeout_sec > 0.0)) throw std::invalid_argument("SgiConfig: timeout <= 0");
    }
};

struct RefinementMask {
    Mask mask;
    int view_id = -1;
    int iteration = 0;
    double threshold = 0.0;
};

/// Erode the base mask (3x3 square), threshold G over the eroded interior,
/// then dilate with a 5x5 disc clipped back to the base mask. Returns nothing
/// when thresholding selects no pixel (no refinement needed for this view).
inline std::optional<RefinementMask> build_refinement_mask(const ImageD& gradient_map,
                                                           const Mask& base_mask,
                                                           const SgiConfig& cfg) {
    if (!any_true(base_mask))
        throw std::invalid_argument("build_refinement_mask: empty base mask");
    if (gradient_map.height() != base_mask.height() ||
        gradient_map.width() != base_mask.width())
        throw std::invalid_argument("build_refinement_mask: shape mismatch");

    const Mask eroded = erode(base_mask, square_element(1));
    std::vector<double> values;
    for (int y = 0; y < eroded.height(); ++y)
        for (int x = 0; x < eroded.width(); ++x)
            if (eroded.at(y, x)) values.push_back(gradient_map.at(y, x));
    if (values.empty()) return std::nullopt;

    double threshold = cfg.tau_abs;
    if (cfg.threshold_mode == SgiThresholdMode::kPercentile) {
        // Nearest-rank percentile.
        std::sort(values.begin(), values.end());
        const std::size_t rank = std::max<std::size_t>(
            1, static_cast<std::size_t>(
                   std::ceil(cfg.percentile / 100.0 * static_cast<double>(values.size()))));
        threshold = std::max(values[rank - 1], cfg.tau_abs);
    }

    Mask selected(base_mask.height(), base_mask.width(), 1, 0);
    bool any = false;
    for (int y = 0; y < eroded.height(); ++y)
        for (int x = 0; x < eroded.width(); ++x)
            if (eroded.at(y, x) && gradient_map.at(y, x) >= threshold) {
                selected.at(y, x) = 1;
                any = true;
            }
    if (!any) return std::nullopt;

    RefinementMask out;
    out.mask = mask_and(dilate(selected, disc_element(2)), base_mask);
    out.threshold = threshold;
    return out;
}

struct InpaintError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InpaintExitError : InpaintError {
    using InpaintError::InpaintError;
};
struct InpaintTimeoutError : InpaintError {
    using InpaintError::InpaintError;
};
struct InpaintOutputError : InpaintError {
    using InpaintError::InpaintError;
};

class InpaintBackend {
public:
    virtual ~InpaintBackend() = default;
    /// Produces replacement content for the masked region of `image`.
    virtual ImageD inpaint(const ImageD& image, const Mask& region, int view_id) = 0;
};

/// Answers inpainting queries from held-out ground-truth images, optionally
/// corrupted with zero-mean uniform noise to emulate an imperfect model.
class OracleInpaintBackend : public InpaintBackend {
public:
    OracleInpaintBackend(std::vector<ImageD> truth_images, double noise_amplitude = 0.0,
                         std::uint64_t seed = 0)
        : truth_(std::move(truth_images)), noise_(noise_amplitude), rng_(seed) {}

    ImageD inpaint(const ImageD& image, const Mask& region, int view_id) override {
        if (view_id < 0 || static_cast<std::size_t>(view_id) >= truth_.size())
            throw InpaintError("oracle inpaint: unknown view id " + std::to_string(view_id));
        const ImageD& truth = truth_[view_id];
        if (!truth.same_shape(image))
            throw InpaintOutputError("oracle inpaint: truth/image shape mismatch");
        ImageD out = truth;
        if (noise_ > 0.0) {
            std::uniform_real_distribution<double> unif(-noise_, noise_);
            for (int y = 0; y < out.height(); ++y)
                for (int x = 0; x < out.width(); ++x) {
                    if (!region.at(y, x)) continue;
                    for (int c = 0; c < out.channels(); ++c)
                        out.at(y, x, c) = std::clamp(out.at(y, x, c) + unif(rng_), 0.0, 1.0);
                }
        }
        return out;
    }

private:
    std::vector<ImageD> truth_;
    double noise_;
    std::mt19937_64 rng_;
};

namespace detail {

struct CommandResult {
    int exit_code = -1;
    bool timed_out = false;
};

inline CommandResult run_with_timeout(const std::string& command, double timeout_sec) {
    const pid_t pid = fork();
    if (pid < 0) throw std::runtime_error("run_with_timeout: fork failed");
    if (pid == 0) {
        execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    const auto deadline =
        std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_sec);
    int status = 0;
    for (;;) {
        const pid_t r = waitpid(pid, &status, WNOHANG);
        if (r == pid) break;
        if (r < 0) throw std::runtime_error("run_with_timeout: waitpid failed");
        if (std::chrono::steady_clock::now() >= deadline) {
            kill(pid, SIGKILL);
            waitpid(pid, &status, 0);
            return {.exit_code = -1, .timed_out = true};
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    const int exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return {.exit_code = exit_code, .timed_out = false};
}

inline void replace_all(std::string& s, const std::string& key, const std::string& value) {
    for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos)) {
        s.replace(pos, key.size(), value);
        pos += value.size();
    }
}

}  // namespace detail

/// Runs an external command with {input}, {mask}, {output} PNG placeholders.
/// Nonzero exit, timeout, a missing output file, or a wrong-size output each
/// raise a distinct error.
class ExternalInpaintBackend : public InpaintBackend {
public:
    ExternalInpaintBackend(std::string command_template, double timeout_sec)
        : command_(std::move(command_template)), timeout_(timeout_sec) {}

    ImageD inpaint(const ImageD& image, const Mask& region, int view_id) override {
        namespace fs = std::filesystem;
        const fs::path dir =
            fs::temp_directory_path() /
            ("splatpaint_inpaint_" + std::to_string(::getpid()) + "_" +
             std::to_string(view_id) + "_" + std::to_string(counter_++));
        fs::create_directories(dir);
        const std::string input = (dir / "input.png").string();
        const std::string mask_path = (dir / "mask.png").string();
        const std::string output = (dir / "output.png").string();
        write_png(input, image);
        write_png_mask(mask_path, region);

        std::string cmd = command_;
        detail::replace_all(cmd, "{input}", input);
        detail::replace_all(cmd, "{mask}", mask_path);
        detail::replace_all(cmd, "{output}", output);

        const auto result = detail::run_with_timeout(cmd, timeout_);
        auto cleanup = [&]() {
            std::error_code ec;
            fs::remove_all(dir, ec);
        };
        if (result.timed_out) {
            cleanup();
            throw InpaintTimeoutError("external inpaint: timed out: " + cmd);
        }
        if (result.exit_code != 0) {
            cleanup();
            throw InpaintExitError("external inpaint: exit " +
                                   std::to_string(result.exit_code) + ": " + cmd);
        }
        if (!fs::exists(output)) {
            cleanup();
            throw InpaintOutputError("external inpaint: missing output file");
        }
        ImageD out;
        try {
            out = read_png(output);
        } catch (const PngError& e) {
            cleanup();
            throw InpaintOutputError(std::string("external inpaint: unreadable output: ") +
                                     e.what());
        }
        cleanup();
        if (out.height() != image.height() || out.width() != image.width() ||
            out.channels() != image.channels())
            throw InpaintOutputError("external inpaint: output size mismatch");
        return out;
    }

private:
    std::string command_;
    double timeout_;
    int counter_ = 0;
};

/// Replaces only the pixels inside the region with backend output; everything
/// outside is bit-identical to the input. An empty region skips the backend.
inline ImageD invoke_inpainter(const ImageD& image, const Mask& region,
                               InpaintBackend& backend, int view_id) {
    if (region.height() != image.height() || region.width() != image.width())
        throw std::invalid_argument("invoke_inpainter: mask shape mismatch");
    if (!any_true(region)) return image;
    const ImageD patch = backend.inpaint(image, region, view_id);
    ImageD out = image;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) {
            if (!region.at(y, x)) continue;
            for (int c = 0; c < image.channels(); ++c) out.at(y, x, c) = patch.at(y, x, c);
        }
    return out;
}

/// External monocular-depth protocol: same command scheme with {input} and
/// {output}; the output is a 16-bit grayscale PNG read back as relative depth
/// in [0,1] (scale/shift are recovered later by align_depth).
inline ImageD external_mono_depth(const ImageD& image, const std::string& command_template,
                                  double timeout_sec) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() /
                         ("splatpaint_depth_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    const std::string input = (dir / "input.png").string();
    const std::string output = (dir / "output.png").string();
    write_png(input, image);
    std::string cmd = command_template;
    detail::replace_all(cmd, "{input}", input);
    detail::replace_all(cmd, "{output}", output);
    const auto result = detail::run_with_timeout(cmd, timeout_sec);
    auto cleanup = [&]() {
        std::error_code ec;
        fs::remove_all(dir, ec);
    };
    if (result.timed_out) {
        cleanup();
        throw InpaintTimeoutError("external depth: timed out: " + cmd);
    }
    if (result.exit_code != 0) {
        cleanup();
        throw InpaintExitError("external depth: exit " + std::to_string(result.exit_code));
    }
    if (!fs::exists(output)) {
        cleanup();
        throw InpaintOutputError("external depth: missing output file");
    }
    ImageD depth = read_png(output);
    cleanup();
    if (depth.channels() != 1 || depth.height() != image.height() ||
        depth.width() != image.width())
        throw InpaintOutputError("external depth: output size mismatch");
    return depth;
}

}  // namespace splatpaint
