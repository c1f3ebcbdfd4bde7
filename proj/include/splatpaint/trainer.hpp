#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "splatpaint/dataset.hpp"
#include "splatpaint/losses.hpp"
#include "splatpaint/metrics.hpp"
#include "splatpaint/rasterizer.hpp"
#include "splatpaint/scene.hpp"
#include "splatpaint/scene_io.hpp"
#include "splatpaint/sgi.hpp"
#include "splatpaint/synthetic.hpp"

namespace splatpaint {

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& what, int view_id)
        : std::runtime_error(what + " (view " + std::to_string(view_id) + ")"),
          view(view_id) {}
    int view;
};

struct TrainConfig {
    int baseline_steps = 8000;
    int gaussian_budget = 20000;  // background initialization budget
    int seed_stride = 2;          // masked-region seeding samples every Nth pixel
    double lr_position = 2e-4;    // scaled by the scene extent at init
    double lr_color = 2.5e-3;
    double lr_opacity = 5e-2;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_feature = 2.5e-3;
    double lr_sh = 1.25e-4;
    int steps_per_round = 2000;  // fine-tune block after each refinement round
    int checkpoint_every = 0;    // 0 disables checkpoints
    double prune_opacity = 0.005;
    int prune_patience = 500;
    int reference_view = -1;  // -1 = view with the largest masked-pixel count

    void validate() const {
        if (baseline_steps < 0) throw std::invalid_argument("TrainConfig: baseline_steps < 0");
        if (gaussian_budget < 1) throw std::invalid_argument("TrainConfig: empty budget");
        if (seed_stride < 1) throw std::invalid_argument("TrainConfig: seed_stride < 1");
        if (steps_per_round < 0) throw std::invalid_argument("TrainConfig: steps_per_round < 0");
        for (double lr : {lr_position, lr_color, lr_opacity, lr_scale, lr_rotation, lr_feature,
                          lr_sh})
            if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: learning rates must be > 0");
        if (prune_patience < 1) throw std::invalid_argument("TrainConfig: prune_patience < 1");
    }
};

/// Knobs simulating imperfect external models on top of the synthetic oracle
/// ground truth.
struct OracleSimConfig {
    double depth_bias_scale = 1.0;  // mono depth = scale * truth + shift
    double depth_bias_shift = 0.0;
    double inpaint_noise = 0.0;  // uniform noise amplitude on oracle inpainting
    InpaintBackendKind depth_backend = InpaintBackendKind::kOracle;
    std::string depth_command;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    RasterConfig raster;
    LossConfig loss;
    TrainConfig train;
    SgiConfig sgi;
    OracleSimConfig oracle;
    Vec3d background_color = Vec3d(0.05, 0.06, 0.08);
    double background_depth = 15.0;

    void validate() const {
        loss.validate();
        train.validate();
        sgi.validate();
        if (!(background_depth > 0.0))
            throw std::invalid_argument("PipelineConfig: background_depth must be > 0");
    }
};

struct TrainingView {
    Camera camera;
    ImageD image;  // training image (object present in the masked region)
    Mask inpaint_mask;
    ImageD mono_depth;
    std::vector<Mask> segments;
};

struct TrainDataset {
    std::vector<TrainingView> views;
    // Held out: only oracle backends and evaluation may read these.
    std::vector<ImageD> truth_images;
    std::vector<ImageD> truth_depths;
    bool has_truth = false;
};

inline TrainDataset make_train_dataset(const SyntheticDataset& ds,
                                       const OracleSimConfig& oracle,
                                       double external_timeout_sec = 60.0) {
    TrainDataset out;
    out.has_truth = true;
    for (std::size_t i = 0; i < ds.views.size(); ++i) {
        const SyntheticView& sv = ds.views[i];
        TrainingView tv;
        tv.camera = sv.camera;
        tv.image = sv.train_image;
        tv.inpaint_mask = sv.inpaint_mask;
        if (count_true(tv.inpaint_mask) * 10 >=
            static_cast<std::size_t>(tv.image.height()) * tv.image.width() * 9)
            throw DatasetError("make_train_dataset: inpaint mask covers >= 90% of view " +
                               std::to_string(i));
        if (oracle.depth_backend == InpaintBackendKind::kExternal) {
            tv.mono_depth =
                external_mono_depth(sv.train_image, oracle.depth_command, external_timeout_sec);
        } else {
            tv.mono_depth = sv.truth_depth;
            for (std::size_t k = 0; k < tv.mono_depth.size(); ++k)
                tv.mono_depth.data()[k] =
                    oracle.depth_bias_scale * tv.mono_depth.data()[k] +
                    oracle.depth_bias_shift;
        }
        tv.segments = ds.segment_masks(static_cast<int>(i));
        out.views.push_back(std::move(tv));
        out.truth_images.push_back(sv.truth_image);
        out.truth_depths.push_back(sv.truth_depth);
    }
    return out;
}

/// One Gaussian per sampled masked pixel: unprojected at the aligned depth,
/// colored from the reference image, half opacity, footprint-sized, zero
/// feature.
inline std::vector<GaussianSplat> seed_masked_gaussians(const Camera& cam,
                                                        const ImageD& reference_image,
                                                        const ImageD& aligned_depth,
                                                        const Mask& mask, int stride) {
    if (stride < 1) throw std::invalid_argument("seed_masked_gaussians: stride < 1");
    std::vector<GaussianSplat> seeds;
    const double focal = 0.5 * (cam.fx + cam.fy);
    for (int y = 0; y < mask.height(); y += stride)
        for (int x = 0; x < mask.width(); x += stride) {
            if (!mask.at(y, x)) continue;
            const double z = aligned_depth.at(y, x);
            if (!std::isfinite(z) || z <= 0.0)
                throw std::invalid_argument(
                    "seed_masked_gaussians: non-finite or non-positive depth on mask");
            GaussianSplat g;
            g.position = cam.unproject(x, y, z).cast<float>();
            const float s = static_cast<float>(std::log(z / focal * stride));
            g.log_scale = Eigen::Vector3f(s, s, s);
            g.opacity_logit = 0.f;  // sigmoid(0) = 0.5
            for (int c = 0; c < 3; ++c)
                g.color[c] = static_cast<float>(reference_image.at(y, x, c));
            g.feature.setZero();
            seeds.push_back(g);
        }
    return seeds;
}

struct ReferenceEntry {
    int view_id = -1;
    ImageD image;      // inpainted guidance image
    Mask supervision;  // pixels of this view supervised by the image
};

struct ReferenceSet {
    std::vector<ReferenceEntry> entries;
    std::size_t size() const { return entries.size(); }
};

struct StepRecord {
    std::int64_t iteration = 0;
    int view_id = -1;
    double photometric = 0.0;
    double sdcl = 0.0;
    double cfdl = 0.0;
    double oacl = 0.0;
    double total = 0.0;
};

inline constexpr const char* kTrainingCsvHeader = "iteration,photometric,sdcl,cfdl,oacl,total";

inline void write_training_log_csv(const std::vector<StepRecord>& history,
                                   const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_training_log_csv: cannot open " + path);
    f << kTrainingCsvHeader << "\n";
    f << std::setprecision(12);
    for (const auto& r : history)
        f << r.iteration << "," << r.photometric << "," << r.sdcl << "," << r.cfdl << ","
          << r.oacl << "," << r.total << "\n";
}

// Adam moments mirror the gradient layout.
struct AdamState {
    RenderGradients m;
    RenderGradients v;
    std::int64_t t = 0;

    void resize_zero(std::size_t n, bool with_sh) {
        m.resize_zero(n, with_sh);
        v.resize_zero(n, with_sh);
        t = 0;
    }
    void reset_slot(std::size_t i) {
        m.position[i].setZero();
        m.log_scale[i].setZero();
        m.rotation[i].setZero();
        m.color[i].setZero();
        if (!m.sh.empty()) m.sh[i].setZero();
        m.opacity_logit[i] = 0.0;
        m.feature[i].setZero();
        v.position[i].setZero();
        v.log_scale[i].setZero();
        v.rotation[i].setZero();
        v.color[i].setZero();
        if (!v.sh.empty()) v.sh[i].setZero();
        v.opacity_logit[i] = 0.0;
        v.feature[i].setZero();
    }
};

struct SgiStepOutcome {
    bool converged = false;
    int selected_view = -1;
    double worst_cumulative = 0.0;
    Mask refinement_mask;  // empty when converged
    ImageD error_map;      // of the selected view; empty when converged
};

enum class RunMode { kBaseline, kFull };

struct RunReport {
    std::vector<EvalReport> rounds;  // entry 0 = after baseline training
    int sgi_rounds = 0;
    bool converged = false;
    double seconds = 0.0;
};

class Trainer {
public:
    Trainer(TrainDataset dataset, PipelineConfig config)
        : dataset_(std::move(dataset)), cfg_(std::move(config)), rng_(cfg_.seed) {
        cfg_.validate();
        if (dataset_.views.size() < 2)
            throw std::invalid_argument("Trainer: need at least 2 views");
        if (cfg_.sgi.backend == InpaintBackendKind::kExternal) {
            backend_ = std::make_unique<ExternalInpaintBackend>(cfg_.sgi.command,
                                                                cfg_.sgi.timeout_sec);
        } else {
            backend_ = std::make_unique<OracleInpaintBackend>(
                dataset_.truth_images, cfg_.oracle.inpaint_noise, cfg_.seed ^ 0x9e3779b9ull);
        }
    }

    /// Builds the initial model: reference-view inpainting, stratified
    /// unprojection of unmasked pixels, and masked-region seeding.
    void init() {
        const int r0 = resolve_reference_view();
        const TrainingView& ref = dataset_.views[r0];

        // Reference inpainting over its full mask.
        const ImageD inpainted =
            invoke_inpainter(ref.image, ref.inpaint_mask, *backend_, r0);
        references_.entries.clear();
        references_.entries.push_back({r0, inpainted, ref.inpaint_mask});

        scene_ = Scene{};
        scene_.sh_degree = 0;
        init_background_splats();
        const std::size_t background_count = scene_.size();

        if (any_true(ref.inpaint_mask)) {
            const auto seeds =
                seed_masked_gaussians(ref.camera, inpainted, ref.mono_depth,
                                      ref.inpaint_mask, cfg_.train.seed_stride);
            scene_.splats.insert(scene_.splats.end(), seeds.begin(), seeds.end());
        }
        background_count_ = background_count;

        opt_.resize_zero(scene_.size(), scene_.sh_degree == 1);
        low_opacity_streak_.assign(scene_.size(), 0);
        iteration_ = 0;
        history_.clear();
        sgi_initial_worst_ = -1.0;
        lr_position_scaled_ = cfg_.train.lr_position * scene_extent(scene_);
        rebuild_reference_caches();
    }

    StepRecord train_step() {
        const int view_id = schedule_[schedule_pos_];
        schedule_pos_ = (schedule_pos_ + 1) % schedule_.size();
        const TrainingView& tv = dataset_.views[view_id];

        const RenderedView view =
            render(scene_, tv.camera, cfg_.raster, cfg_.background_color,
                   cfg_.background_depth, true);

        StepRecord rec;
        rec.iteration = iteration_;
        rec.view_id = view_id;

        ChannelGradients grads_in;
        const LossValue photo =
            photometric_loss(view.color, target_images_[view_id], supervision_[view_id]);
        rec.photometric = photo.value;
        grads_in.d_color = photo.grad;
        for (std::size_t i = 0; i < grads_in.d_color.size(); ++i)
            grads_in.d_color.data()[i] *= cfg_.loss.photometric_weight;

        const bool is_reference = is_reference_view(view_id);
        const bool want_sdcl = iteration_ % cfg_.loss.sdcl_period == 0;
        const bool want_cfdl = is_reference && iteration_ % cfg_.loss.cfdl_period == 0 &&
                               any_true(tv.inpaint_mask);
        if (want_sdcl || want_cfdl) {
            const Mask covered = alpha_mask(view);
            const Mask align_region = mask_and(mask_not(tv.inpaint_mask), covered);
            std::optional<DepthAlignment> aligned;
            try {
                aligned = align_depth(tv.mono_depth, view.depth, align_region);
            } catch (const AlignmentError&) {
                // Too little overlap this early; skip depth supervision.
            }
            if (aligned) {
                ImageD d_depth(view.depth.height(), view.depth.width(), 1, 0.0);
                if (want_sdcl) {
                    const Mask region = mask_and(supervision_[view_id], covered);
                    if (any_true(region)) {
                        const auto part =
                            partition_depth_bins(aligned->aligned, view.depth, region,
                                                 cfg_.loss.bins, cfg_.loss.weight_scheme);
                        const LossValue sdcl = depth_clustering_loss(part, view.depth);
                        rec.sdcl = sdcl.value;
                        for (std::size_t i = 0; i < d_depth.size(); ++i)
                            d_depth.data()[i] += sdcl.grad.data()[i];
                    }
                }
                if (want_cfdl) {
                    const LossValue cfdl = crop_focused_depth_loss(
                        aligned->aligned, view.depth, tv.inpaint_mask, rng_, cfg_.loss);
                    rec.cfdl = cfdl.value;
                    for (std::size_t i = 0; i < d_depth.size(); ++i)
                        d_depth.data()[i] += cfg_.loss.kappa * cfdl.grad.data()[i];
                }
                for (std::size_t i = 0; i < d_depth.size(); ++i)
                    d_depth.data()[i] *= cfg_.loss.depth_weight;
                grads_in.d_depth = std::move(d_depth);
            }
        }

        // Object-aware term over segments restricted to supervised, covered
        // pixels (keeps masked pixels of non-reference views gradient-free).
        {
            const Mask allowed = mask_and(supervision_[view_id], alpha_mask(view));
            std::vector<Mask> segs;
            for (const Mask& s : tv.segments) {
                Mask m = mask_and(s, allowed);
                if (any_true(m)) segs.push_back(std::move(m));
            }
            if (segs.size() >= 2) {
                const LossValue oacl = object_contrastive_loss(
                    view.feature, segs, cfg_.loss.oacl_epsilon, cfg_.loss.phi_min);
                rec.oacl = oacl.value;
                grads_in.d_feature = oacl.grad;
                for (std::size_t i = 0; i < grads_in.d_feature.size(); ++i)
                    grads_in.d_feature.data()[i] *= cfg_.loss.oacl_weight;
            }
        }

        rec.total = cfg_.loss.photometric_weight * rec.photometric +
                    cfg_.loss.depth_weight * depth_loss(rec.sdcl, rec.cfdl, cfg_.loss.kappa) +
                    cfg_.loss.oacl_weight * rec.oacl;
        if (!std::isfinite(rec.total))
            throw TrainingError("train_step: non-finite loss", view_id);

        const RenderGradients grads =
            render_backward(scene_, tv.camera, cfg_.raster, view, grads_in);
        apply_adam(grads, view_id);
        prune_and_respawn();

        ++iteration_;
        history_.push_back(rec);
        return rec;
    }

    /// One refinement round: find the most depth-inconsistent view, localize
    /// the error, re-inpaint just that region and add it to the references.
    /// Backend failures propagate without touching any state.
    SgiStepOutcome sgi_step() {
        struct Candidate {
            int view;
            double cumulative;
            ImageD error;
            Mask remaining;
            RenderedView rendered;
        };
        std::vector<Candidate> cands;
        for (std::size_t v = 0; v < dataset_.views.size(); ++v) {
            const TrainingView& tv = dataset_.views[v];
            if (!any_true(tv.inpaint_mask)) continue;
            Mask remaining = tv.inpaint_mask;
            for (const auto& e : references_.entries)
                if (e.view_id == static_cast<int>(v))
                    remaining = mask_minus(remaining, e.supervision);
            if (!any_true(remaining)) continue;  // fully reference-supervised

            RenderedView view = render(scene_, tv.camera, cfg_.raster,
                                       cfg_.background_color, cfg_.background_depth, false);
            std::optional<DepthAlignment> aligned;
            try {
                aligned = align_depth(tv.mono_depth, view.depth,
                                      mask_and(mask_not(tv.inpaint_mask), alpha_mask(view)));
            } catch (const AlignmentError&) {
                continue;
            }
            DepthErrorMap em = depth_error_map(view.depth, aligned->aligned, remaining);
            cands.push_back({static_cast<int>(v), em.cumulative, std::move(em.error),
                             std::move(remaining), std::move(view)});
        }

        SgiStepOutcome outcome;
        if (cands.empty()) {
            outcome.converged = true;
            return outcome;
        }
        double worst = 0.0;
        for (const auto& c : cands) worst = std::max(worst, c.cumulative);
        outcome.worst_cumulative = worst;
        if (sgi_initial_worst_ < 0.0) sgi_initial_worst_ = worst;
        if (worst <= cfg_.sgi.convergence_ratio * sgi_initial_worst_) {
            outcome.converged = true;
            return outcome;
        }

        // Worst view first; fall through to the next-worst when thresholding
        // finds nothing to refine in it.
        std::vector<std::pair<int, double>> ranked;
        for (const auto& c : cands) ranked.push_back({c.view, c.cumulative});
        std::optional<RefinementMask> refinement;
        const Candidate* chosen = nullptr;
        while (!ranked.empty()) {
            const int pick = select_worst_view(ranked).value();
            const Candidate& c = *std::find_if(cands.begin(), cands.end(),
                                               [&](const Candidate& x) { return x.view == pick; });
            const ImageD grad_mag = sobel_gradient_magnitude(c.error);
            refinement = build_refinement_mask(grad_mag, c.remaining, cfg_.sgi);
            if (refinement) {
                chosen = &c;
                break;
            }
            ranked.erase(std::find_if(ranked.begin(), ranked.end(),
                                      [&](const auto& p) { return p.first == pick; }));
        }
        if (!chosen) {
            outcome.converged = true;  // errors left, but nothing localizable
            return outcome;
        }

        const ImageD inpainted =
            invoke_inpainter(chosen->rendered.color, refinement->mask, *backend_,
                             chosen->view);

        // All state mutation happens after the backend call succeeded.
        references_.entries.push_back({chosen->view, inpainted, refinement->mask});
        rebuild_reference_caches();
        outcome.selected_view = chosen->view;
        outcome.refinement_mask = refinement->mask;
        outcome.error_map = chosen->error;
        return outcome;
    }

    RunReport run(RunMode mode, const std::string& checkpoint_dir = "") {
        const auto t0 = std::chrono::steady_clock::now();
        RunReport report;
        for (int s = 0; s < cfg_.train.baseline_steps; ++s) {
            train_step();
            maybe_checkpoint(checkpoint_dir);
        }
        if (dataset_.has_truth) report.rounds.push_back(evaluate(0));

        if (mode == RunMode::kFull) {
            for (int round = 1; round <= cfg_.sgi.max_rounds; ++round) {
                if (cfg_.sgi.enabled) {
                    const SgiStepOutcome outcome = sgi_step();
                    if (outcome.converged) {
                        report.converged = true;
                        break;
                    }
                    ++report.sgi_rounds;
                    export_sgi_maps(checkpoint_dir, round, outcome);
                }
                for (int s = 0; s < cfg_.train.steps_per_round; ++s) {
                    train_step();
                    maybe_checkpoint(checkpoint_dir);
                }
                if (dataset_.has_truth) report.rounds.push_back(evaluate(round));
                if (!cfg_.sgi.enabled && round >= cfg_.sgi.max_rounds) break;
            }
        }
        report.seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return report;
    }

    EvalReport evaluate(int round) const {
        if (!dataset_.has_truth)
            throw std::logic_error("evaluate: dataset has no held-out ground truth");
        std::vector<Camera> cams;
        std::vector<Mask> masks;
        for (const auto& v : dataset_.views) {
            cams.push_back(v.camera);
            masks.push_back(v.inpaint_mask);
        }
        return evaluate_scene(scene_, cfg_.raster, cams, dataset_.truth_images, masks,
                              cfg_.background_color, cfg_.background_depth, round);
    }

    const Scene& scene() const { return scene_; }
    Scene& mutable_scene() { return scene_; }
    const ReferenceSet& references() const { return references_; }
    const std::vector<StepRecord>& history() const { return history_; }
    std::int64_t iteration() const { return iteration_; }
    const PipelineConfig& config() const { return cfg_; }
    const TrainDataset& dataset() const { return dataset_; }
    const Mask& supervision_mask(int view) const { return supervision_[view]; }
    const ImageD& target_image(int view) const { return target_images_[view]; }
    std::size_t background_splat_count() const { return background_count_; }

    bool is_reference_view(int view_id) const {
        for (const auto& e : references_.entries)
            if (e.view_id == view_id) return true;
        return false;
    }

private:
    int resolve_reference_view() const {
        if (cfg_.train.reference_view >= 0) {
            if (static_cast<std::size_t>(cfg_.train.reference_view) >= dataset_.views.size())
                throw std::invalid_argument("Trainer: reference view out of range");
            return cfg_.train.reference_view;
        }
        std::size_t best = 0, best_count = 0;
        for (std::size_t v = 0; v < dataset_.views.size(); ++v) {
            const std::size_t n = count_true(dataset_.views[v].inpaint_mask);
            if (n > best_count) {
                best = v;
                best_count = n;
            }
        }
        return static_cast<int>(best);
    }

    void init_background_splats() {
        // Stratified subsample of unmasked pixels across all views. Pixels on
        // depth discontinuities are skipped: the blended depth there mixes
        // surfaces and unprojects to floaters between them.
        struct Candidate {
            int view, x, y;
        };
        auto depth_edge = [](const ImageD& d, int y, int x) {
            const double z = d.at(y, x);
            for (const auto& [dy, dx] : {std::pair{-1, 0}, {1, 0}, {0, -1}, {0, 1}}) {
                const int ny = y + dy, nx = x + dx;
                if (!d.in_bounds(ny, nx)) continue;
                if (std::abs(d.at(ny, nx) - z) > 0.05 * z) return true;
            }
            return false;
        };
        // Pixels at the depth far plane have no surface behind them; oracle
        // depth marks them with the background completion value.
        double far_cut = std::numeric_limits<double>::infinity();
        if (cfg_.oracle.depth_backend == InpaintBackendKind::kOracle)
            far_cut = 0.85 * (cfg_.oracle.depth_bias_scale * cfg_.background_depth +
                              cfg_.oracle.depth_bias_shift);
        std::vector<Candidate> candidates;
        const std::size_t quota =
            std::max<std::size_t>(1, cfg_.train.gaussian_budget / dataset_.views.size());
        const int hw0 = dataset_.views[0].image.height() * dataset_.views[0].image.width();
        int step =
            std::max(1, static_cast<int>(std::sqrt(static_cast<double>(hw0) / quota)));
        for (;; --step) {  // densify when the filters eat into the budget
            candidates.clear();
            for (std::size_t v = 0; v < dataset_.views.size(); ++v) {
                const TrainingView& tv = dataset_.views[v];
                for (int y = 0; y < tv.image.height(); y += step)
                    for (int x = 0; x < tv.image.width(); x += step) {
                        if (tv.inpaint_mask.at(y, x)) continue;
                        if (tv.mono_depth.at(y, x) >= far_cut) continue;
                        if (depth_edge(tv.mono_depth, y, x)) continue;
                        candidates.push_back({static_cast<int>(v), x, y});
                    }
            }
            if (candidates.size() >= static_cast<std::size_t>(cfg_.train.gaussian_budget) ||
                step <= 1)
                break;
        }
        std::shuffle(candidates.begin(), candidates.end(), rng_);
        if (candidates.size() > static_cast<std::size_t>(cfg_.train.gaussian_budget))
            candidates.resize(cfg_.train.gaussian_budget);

        std::uniform_real_distribution<double> feat_init(-0.1, 0.1);
        for (const auto& c : candidates) {
            const TrainingView& tv = dataset_.views[c.view];
            const double z = tv.mono_depth.at(c.y, c.x);
            if (!std::isfinite(z) || z <= 0.0) continue;
            GaussianSplat g;
            g.position = tv.camera.unproject(c.x, c.y, z).cast<float>();
            const double focal = 0.5 * (tv.camera.fx + tv.camera.fy);
            const float s = static_cast<float>(std::log(0.75 * step * z / focal));
            g.log_scale = Eigen::Vector3f(s, s, s);
            g.opacity_logit = -2.1972246f;  // sigmoid^-1(0.1)
            for (int ch = 0; ch < 3; ++ch)
                g.color[ch] = static_cast<float>(tv.image.at(c.y, c.x, ch));
            for (int k = 0; k < kFeatureDim; ++k)
                g.feature[k] = static_cast<float>(feat_init(rng_));
            scene_.splats.push_back(g);
        }
        if (scene_.empty())
            throw TrainingError("init: no unmasked pixels to initialize from", -1);
    }

    Mask alpha_mask(const RenderedView& view) const {
        Mask m(view.alpha.height(), view.alpha.width(), 1, 0);
        for (int y = 0; y < m.height(); ++y)
            for (int x = 0; x < m.width(); ++x) m.at(y, x) = view.alpha.at(y, x) > 0.5 ? 1 : 0;
        return m;
    }

    void rebuild_reference_caches() {
        target_images_.clear();
        supervision_.clear();
        for (std::size_t v = 0; v < dataset_.views.size(); ++v) {
            const TrainingView& tv = dataset_.views[v];
            ImageD target = tv.image;
            Mask sup = mask_not(tv.inpaint_mask);
            for (const auto& e : references_.entries) {
                if (e.view_id != static_cast<int>(v)) continue;
                for (int y = 0; y < target.height(); ++y)
                    for (int x = 0; x < target.width(); ++x) {
                        if (!e.supervision.at(y, x)) continue;
                        for (int c = 0; c < 3; ++c) target.at(y, x, c) = e.image.at(y, x, c);
                        sup.at(y, x) = 1;
                    }
            }
            target_images_.push_back(std::move(target));
            supervision_.push_back(std::move(sup));
        }

        // Round robin over all views; reference views appear twice per cycle.
        schedule_.clear();
        for (std::size_t v = 0; v < dataset_.views.size(); ++v)
            schedule_.push_back(static_cast<int>(v));
        std::vector<int> refs;
        for (const auto& e : references_.entries)
            if (std::find(refs.begin(), refs.end(), e.view_id) == refs.end())
                refs.push_back(e.view_id);
        std::sort(refs.begin(), refs.end());
        for (int r : refs) schedule_.push_back(r);
        schedule_pos_ = 0;

        // Supervised-pixel lists per reference view for respawn sampling.
        respawn_sites_.clear();
        for (const auto& e : references_.entries) {
            const Mask& m = e.supervision;
            for (int y = 0; y < m.height(); ++y)
                for (int x = 0; x < m.width(); ++x)
                    if (m.at(y, x))
                        respawn_sites_.push_back(
                            {e.view_id, x, y, static_cast<int>(&e - references_.entries.data())});
        }
    }

    void apply_adam(const RenderGradients& grads, int view_id) {
        constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
        opt_.t += 1;
        const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(opt_.t));
        const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(opt_.t));
        auto step_scalar = [&](float& param, double g, double& m, double& v, double lr) {
            m = kBeta1 * m + (1.0 - kBeta1) * g;
            v = kBeta2 * v + (1.0 - kBeta2) * g * g;
            const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + kEps);
            param = static_cast<float>(static_cast<double>(param) - update);
            if (!std::isfinite(param))
                throw TrainingError("apply_adam: non-finite parameter", view_id);
        };
        for (std::size_t i = 0; i < scene_.size(); ++i) {
            GaussianSplat& g = scene_.splats[i];
            for (int k = 0; k < 3; ++k) {
                step_scalar(g.position[k], grads.position[i][k], opt_.m.position[i][k],
                            opt_.v.position[i][k], lr_position_scaled_);
                step_scalar(g.log_scale[k], grads.log_scale[i][k], opt_.m.log_scale[i][k],
                            opt_.v.log_scale[i][k], cfg_.train.lr_scale);
                step_scalar(g.color[k], grads.color[i][k], opt_.m.color[i][k],
                            opt_.v.color[i][k], cfg_.train.lr_color);
            }
            for (int k = 0; k < 4; ++k)
                step_scalar(g.rotation[k], grads.rotation[i][k], opt_.m.rotation[i][k],
                            opt_.v.rotation[i][k], cfg_.train.lr_rotation);
            if (scene_.sh_degree == 1)
                for (int k = 0; k < kSh1Coeffs; ++k)
                    step_scalar(g.sh[k], grads.sh[i][k], opt_.m.sh[i][k], opt_.v.sh[i][k],
                                cfg_.train.lr_sh);
            step_scalar(g.opacity_logit, grads.opacity_logit[i], opt_.m.opacity_logit[i],
                        opt_.v.opacity_logit[i], cfg_.train.lr_opacity);
            for (int k = 0; k < kFeatureDim; ++k)
                step_scalar(g.feature[k], grads.feature[i][k], opt_.m.feature[i][k],
                            opt_.v.feature[i][k], cfg_.train.lr_feature);

            const float norm = g.rotation.norm();
            if (norm > 0.f && std::isfinite(norm))
                g.rotation /= norm;
            else
                g.rotation = Eigen::Vector4f(1.f, 0.f, 0.f, 0.f);
        }
    }

    /// Splats stuck below the opacity floor are re-seeded at a random
    /// reference-supervised unprojection (keeps capacity alive without any
    /// densification machinery).
    void prune_and_respawn() {
        if (respawn_sites_.empty()) return;
        for (std::size_t i = 0; i < scene_.size(); ++i) {
            GaussianSplat& g = scene_.splats[i];
            if (g.opacity() < cfg_.train.prune_opacity) {
                if (++low_opacity_streak_[i] < cfg_.train.prune_patience) continue;
                std::uniform_int_distribution<std::size_t> pick(0, respawn_sites_.size() - 1);
                const RespawnSite site = respawn_sites_[pick(rng_)];
                const TrainingView& tv = dataset_.views[site.view];
                const ReferenceEntry& entry = references_.entries[site.entry];
                const double z = tv.mono_depth.at(site.y, site.x);
                if (!(z > 0.0) || !std::isfinite(z)) {
                    low_opacity_streak_[i] = 0;
                    continue;
                }
                g.position = tv.camera.unproject(site.x, site.y, z).cast<float>();
                const double focal = 0.5 * (tv.camera.fx + tv.camera.fy);
                const float s = static_cast<float>(
                    std::log(z / focal * cfg_.train.seed_stride));
                g.log_scale = Eigen::Vector3f(s, s, s);
                g.rotation = Eigen::Vector4f(1.f, 0.f, 0.f, 0.f);
                g.opacity_logit = 0.f;
                for (int c = 0; c < 3; ++c)
                    g.color[c] = static_cast<float>(entry.image.at(site.y, site.x, c));
                g.feature.setZero();
                opt_.reset_slot(i);
                low_opacity_streak_[i] = 0;
            } else {
                low_opacity_streak_[i] = 0;
            }
        }
    }

    void export_sgi_maps(const std::string& dir, int round, const SgiStepOutcome& outcome) {
        if (dir.empty()) return;
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        char name[80];
        std::snprintf(name, sizeof(name), "sgi_round_%02d_view_%03d", round,
                      outcome.selected_view);
        const std::string stem = (fs::path(dir) / name).string();
        write_splr(stem + "_error.splr", outcome.error_map);
        write_png_heatmap(stem + "_error.png", outcome.error_map);
        write_png_mask(stem + "_mask.png", outcome.refinement_mask);
    }

    void maybe_checkpoint(const std::string& dir) {
        if (dir.empty() || cfg_.train.checkpoint_every <= 0) return;
        if (iteration_ == 0 || iteration_ % cfg_.train.checkpoint_every != 0) return;
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        char name[64];
        std::snprintf(name, sizeof(name), "scene_%08lld.splf",
                      static_cast<long long>(iteration_));
        save_scene(scene_, (fs::path(dir) / name).string());
        std::snprintf(name, sizeof(name), "optstate_%08lld.bin",
                      static_cast<long long>(iteration_));
        save_optimizer_state((fs::path(dir) / name).string());
    }

    void save_optimizer_state(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("save_optimizer_state: cannot open " + path);
        f.write("SPOP", 4);
        const std::uint32_t version = 1;
        const std::uint64_t count = scene_.size();
        const std::int64_t t = opt_.t;
        f.write(reinterpret_cast<const char*>(&version), 4);
        f.write(reinterpret_cast<const char*>(&count), 8);
        f.write(reinterpret_cast<const char*>(&t), 8);
        auto dump = [&](const RenderGradients& gr) {
            for (std::size_t i = 0; i < count; ++i) {
                f.write(reinterpret_cast<const char*>(gr.position[i].data()), 24);
                f.write(reinterpret_cast<const char*>(gr.log_scale[i].data()), 24);
                f.write(reinterpret_cast<const char*>(gr.rotation[i].data()), 32);
                f.write(reinterpret_cast<const char*>(gr.color[i].data()), 24);
                f.write(reinterpret_cast<const char*>(&gr.opacity_logit[i]), 8);
                f.write(reinterpret_cast<const char*>(gr.feature[i].data()), 128);
            }
        };
        dump(opt_.m);
        dump(opt_.v);
    }

    struct RespawnSite {
        int view, x, y, entry;
    };

    TrainDataset dataset_;
    PipelineConfig cfg_;
    std::unique_ptr<InpaintBackend> backend_;
    std::mt19937_64 rng_;

    Scene scene_;
    AdamState opt_;
    std::int64_t iteration_ = 0;
    ReferenceSet references_;
    std::vector<StepRecord> history_;
    std::vector<ImageD> target_images_;
    std::vector<Mask> supervision_;
    std::vector<int> schedule_;
    std::size_t schedule_pos_ = 0;
    std::vector<int> low_opacity_streak_;
    std::vector<RespawnSite> respawn_sites_;
    double sgi_initial_worst_ = -1.0;
    double lr_position_scaled_ = 0.0;
    std::size_t background_count_ = 0;
};

}  // namespace splatpaint
