#pragma once

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatpaint/synthetic.hpp"
#include "splatpaint/trainer.hpp"

namespace splatpaint {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Everything a command needs: the pipeline knobs plus the synthetic-scene
/// spec. One seed drives all randomness.
struct AppConfig {
    PipelineConfig pipeline;
    SceneSpec scene;

    void sync_seed() { scene.seed = pipeline.seed; }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream in(trim(value));
    T out;
    in >> out;
    if (in.fail() || !in.eof())
        throw ConfigError("config: value '" + value + "' for key '" + key +
                          "' is not a valid number");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("config: value '" + value + "' for key '" + key + "' is not a boolean");
}

}  // namespace detail

/// Table of every configuration key: name, documented default, description,
/// and the setter/getter pair binding it to AppConfig.
class ConfigSchema {
public:
    using Setter = std::function<void(AppConfig&, const std::string&, const std::string&)>;
    using Getter = std::function<std::string(const AppConfig&)>;

    struct Entry {
        std::string key;
        std::string description;
        Setter set;
        Getter get;
    };

    ConfigSchema() { register_all(); }

    void set(AppConfig& cfg, const std::string& key, const std::string& value) const {
        for (const auto& e : entries_)
            if (e.key == key) {
                e.set(cfg, key, value);
                cfg.sync_seed();
                return;
            }
        throw ConfigError("config: unknown key '" + key + "'");
    }

    /// `key = value` lines; '#' starts a comment.
    void apply_file(AppConfig& cfg, const std::string& path) const {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open file " + path);
        std::string line;
        int line_no = 0;
        while (std::getline(f, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = detail::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: line " + std::to_string(line_no) + " of " + path +
                                  " is not 'key = value'");
            set(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
    }

    /// "key=value" command-line override.
    void apply_override(AppConfig& cfg, const std::string& assignment) const {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: override '" + assignment + "' is not key=value");
        set(cfg, detail::trim(assignment.substr(0, eq)),
            detail::trim(assignment.substr(eq + 1)));
    }

    /// Current values in config-file syntax (also serves as documentation of
    /// every key and its default).
    std::string dump(const AppConfig& cfg) const {
        std::ostringstream os;
        for (const auto& e : entries_)
            os << e.key << " = " << e.get(cfg) << "  # " << e.description << "\n";
        return os.str();
    }

    const std::vector<Entry>& entries() const { return entries_; }

private:
    template <typename T>
    void bind(const std::string& key, const std::string& description, T* (*field)(AppConfig&)) {
        Entry e;
        e.key = key;
        e.description = description;
        e.set = [field](AppConfig& cfg, const std::string& k, const std::string& v) {
            *field(cfg) = detail::parse_number<T>(k, v);
        };
        e.get = [field](const AppConfig& cfg) {
            std::ostringstream os;
            os << std::setprecision(17) << *field(const_cast<AppConfig&>(cfg));
            return os.str();
        };
        entries_.push_back(std::move(e));
    }

    void bind_bool(const std::string& key, const std::string& description,
                   bool* (*field)(AppConfig&)) {
        Entry e;
        e.key = key;
        e.description = description;
        e.set = [field](AppConfig& cfg, const std::string& k, const std::string& v) {
            *field(cfg) = detail::parse_bool(k, v);
        };
        e.get = [field](const AppConfig& cfg) {
            return *field(const_cast<AppConfig&>(cfg)) ? "true" : "false";
        };
        entries_.push_back(std::move(e));
    }

    void bind_string(const std::string& key, const std::string& description,
                     std::string* (*field)(AppConfig&)) {
        Entry e;
        e.key = key;
        e.description = description;
        e.set = [field](AppConfig& cfg, const std::string&, const std::string& v) {
            *field(cfg) = v;
        };
        e.get = [field](const AppConfig& cfg) {
            return *field(const_cast<AppConfig&>(cfg));
        };
        entries_.push_back(std::move(e));
    }

    template <typename E>
    void bind_enum(const std::string& key, const std::string& description,
                   std::vector<std::pair<std::string, E>> values, E* (*field)(AppConfig&)) {
        Entry e;
        e.key = key;
        e.description = description;
        e.set = [values, field](AppConfig& cfg, const std::string& k, const std::string& v) {
            for (const auto& [name, val] : values)
                if (name == detail::trim(v)) {
                    *field(cfg) = val;
                    return;
                }
            std::string allowed;
            for (const auto& [name, val] : values) allowed += name + " ";
            throw ConfigError("config: value '" + v + "' for key '" + k +
                              "' must be one of: " + allowed);
        };
        e.get = [values, field](const AppConfig& cfg) {
            const E cur = *field(const_cast<AppConfig&>(cfg));
            for (const auto& [name, val] : values)
                if (val == cur) return name;
            return std::string("?");
        };
        entries_.push_back(std::move(e));
    }

    void register_all();

    std::vector<Entry> entries_;
};

// Field accessors are plain functions so the binding table stays readable.
#define SPLATPAINT_FIELD(TYPE, EXPR) \
    +[](AppConfig& c) -> TYPE* { return &(EXPR); }

inline void ConfigSchema::register_all() {
    bind<std::uint64_t>("seed", "master seed for every random draw",
                        SPLATPAINT_FIELD(std::uint64_t, c.pipeline.seed));

    bind<int>("raster.tile_size", "rasterizer tile edge in pixels",
              SPLATPAINT_FIELD(int, c.pipeline.raster.tile_size));
    bind<int>("raster.threads", "worker threads; 0 = hardware concurrency",
              SPLATPAINT_FIELD(int, c.pipeline.raster.threads));
    bind<double>("raster.near_plane", "camera-space near plane",
                 SPLATPAINT_FIELD(double, c.pipeline.raster.near_plane));
    bind<double>("raster.support_sigma", "per-pixel splat support radius in sigmas",
                 SPLATPAINT_FIELD(double, c.pipeline.raster.support_sigma));
    bind<double>("raster.min_transmittance", "front-to-back early-out; 0 disables",
                 SPLATPAINT_FIELD(double, c.pipeline.raster.min_transmittance));
    bind<double>("raster.cov2d_eps", "px^2 added to the projected covariance diagonal",
                 SPLATPAINT_FIELD(double, c.pipeline.raster.cov2d_eps));

    bind<double>("loss.kappa", "crop-focused depth term weight",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.kappa));
    bind<int>("loss.bins", "depth bin count K",
              SPLATPAINT_FIELD(int, c.pipeline.loss.bins));
    bind<int>("loss.sdcl_period", "apply the clustering depth loss every N iterations",
              SPLATPAINT_FIELD(int, c.pipeline.loss.sdcl_period));
    bind<int>("loss.cfdl_period", "apply the crop depth loss every N iterations",
              SPLATPAINT_FIELD(int, c.pipeline.loss.cfdl_period));
    bind<double>("loss.phi_min", "temperature floor for the contrastive loss",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.phi_min));
    bind<double>("loss.epsilon", "stabilizer inside log(N + eps) of the temperature",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.oacl_epsilon));
    bind<double>("loss.crop_expand_min", "crop expansion fraction, lower bound",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.crop_expand_min));
    bind<double>("loss.crop_expand_max", "crop expansion fraction, upper bound",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.crop_expand_max));
    bind<double>("loss.center_sigma_frac", "center weighting sigma / crop half-diagonal",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.center_sigma_frac));
    bind_enum<BinWeightScheme>(
        "loss.weight_scheme", "depth bin weights: inverse_center | uniform | exp_decay",
        {{"inverse_center", BinWeightScheme::kInverseCenter},
         {"uniform", BinWeightScheme::kUniform},
         {"exp_decay", BinWeightScheme::kExpDecay}},
        SPLATPAINT_FIELD(BinWeightScheme, c.pipeline.loss.weight_scheme));
    bind<double>("loss.photometric_weight", "photometric term weight",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.photometric_weight));
    bind<double>("loss.depth_weight", "combined depth term weight",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.depth_weight));
    bind<double>("loss.oacl_weight", "contrastive feature term weight",
                 SPLATPAINT_FIELD(double, c.pipeline.loss.oacl_weight));

    bind<int>("train.baseline_steps", "initial optimization steps",
              SPLATPAINT_FIELD(int, c.pipeline.train.baseline_steps));
    bind<int>("train.gaussian_budget", "background splats created at init",
              SPLATPAINT_FIELD(int, c.pipeline.train.gaussian_budget));
    bind<int>("train.seed_stride", "masked seeding samples every Nth pixel",
              SPLATPAINT_FIELD(int, c.pipeline.train.seed_stride));
    bind<double>("train.lr_position", "position learning rate (x scene extent)",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_position));
    bind<double>("train.lr_color", "color learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_color));
    bind<double>("train.lr_opacity", "opacity learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_opacity));
    bind<double>("train.lr_scale", "log-scale learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_scale));
    bind<double>("train.lr_rotation", "rotation learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_rotation));
    bind<double>("train.lr_feature", "feature learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_feature));
    bind<double>("train.lr_sh", "degree-1 color coefficient learning rate",
                 SPLATPAINT_FIELD(double, c.pipeline.train.lr_sh));
    bind<int>("train.steps_per_round", "fine-tune steps after each refinement round",
              SPLATPAINT_FIELD(int, c.pipeline.train.steps_per_round));
    bind<int>("train.checkpoint_every", "checkpoint cadence in steps; 0 disables",
              SPLATPAINT_FIELD(int, c.pipeline.train.checkpoint_every));
    bind<double>("train.prune_opacity", "respawn splats stuck below this opacity",
                 SPLATPAINT_FIELD(double, c.pipeline.train.prune_opacity));
    bind<int>("train.prune_patience", "steps below the floor before a respawn",
              SPLATPAINT_FIELD(int, c.pipeline.train.prune_patience));
    bind<int>("train.reference_view", "reference view id; -1 = largest mask",
              SPLATPAINT_FIELD(int, c.pipeline.train.reference_view));

    bind<double>("sgi.percentile", "gradient-magnitude threshold percentile",
                 SPLATPAINT_FIELD(double, c.pipeline.sgi.percentile));
    bind<double>("sgi.tau_abs", "absolute gradient threshold floor",
                 SPLATPAINT_FIELD(double, c.pipeline.sgi.tau_abs));
    bind_enum<SgiThresholdMode>("sgi.threshold_mode", "percentile | absolute",
                                {{"percentile", SgiThresholdMode::kPercentile},
                                 {"absolute", SgiThresholdMode::kAbsolute}},
                                SPLATPAINT_FIELD(SgiThresholdMode, c.pipeline.sgi.threshold_mode));
    bind<int>("sgi.max_rounds", "refinement round cap",
              SPLATPAINT_FIELD(int, c.pipeline.sgi.max_rounds));
    bind<double>("sgi.convergence_ratio",
                 "stop when the worst error falls below this fraction of the initial worst",
                 SPLATPAINT_FIELD(double, c.pipeline.sgi.convergence_ratio));
    bind_enum<InpaintBackendKind>("sgi.backend", "inpainting backend: oracle | external",
                                  {{"oracle", InpaintBackendKind::kOracle},
                                   {"external", InpaintBackendKind::kExternal}},
                                  SPLATPAINT_FIELD(InpaintBackendKind, c.pipeline.sgi.backend));
    bind_string("sgi.command", "external inpaint command with {input} {mask} {output}",
                SPLATPAINT_FIELD(std::string, c.pipeline.sgi.command));
    bind<double>("sgi.timeout_sec", "external command timeout",
                 SPLATPAINT_FIELD(double, c.pipeline.sgi.timeout_sec));
    bind_bool("sgi.enabled", "false trains reference-only (ablation mode)",
              SPLATPAINT_FIELD(bool, c.pipeline.sgi.enabled));

    bind<double>("oracle.depth_bias_scale", "mono depth = scale * truth + shift",
                 SPLATPAINT_FIELD(double, c.pipeline.oracle.depth_bias_scale));
    bind<double>("oracle.depth_bias_shift", "mono depth = scale * truth + shift",
                 SPLATPAINT_FIELD(double, c.pipeline.oracle.depth_bias_shift));
    bind<double>("oracle.inpaint_noise", "uniform noise amplitude on oracle inpainting",
                 SPLATPAINT_FIELD(double, c.pipeline.oracle.inpaint_noise));
    bind_enum<InpaintBackendKind>(
        "oracle.depth_backend", "mono depth source: oracle | external",
        {{"oracle", InpaintBackendKind::kOracle}, {"external", InpaintBackendKind::kExternal}},
        SPLATPAINT_FIELD(InpaintBackendKind, c.pipeline.oracle.depth_backend));
    bind_string("oracle.depth_command", "external depth command with {input} {output}",
                SPLATPAINT_FIELD(std::string, c.pipeline.oracle.depth_command));

    bind<double>("background.r", "background color, red",
                 SPLATPAINT_FIELD(double, c.pipeline.background_color.x()));
    bind<double>("background.g", "background color, green",
                 SPLATPAINT_FIELD(double, c.pipeline.background_color.y()));
    bind<double>("background.b", "background color, blue",
                 SPLATPAINT_FIELD(double, c.pipeline.background_color.z()));
    bind<double>("background.depth", "depth completion value for uncovered pixels",
                 SPLATPAINT_FIELD(double, c.pipeline.background_depth));

    bind<int>("synthetic.views", "camera count on the arc",
              SPLATPAINT_FIELD(int, c.scene.camera_count));
    bind<int>("synthetic.image_size", "square image edge in pixels",
              SPLATPAINT_FIELD(int, c.scene.image_size));
    bind<int>("synthetic.clusters", "background slab/ellipsoid clusters (2..5)",
              SPLATPAINT_FIELD(int, c.scene.background_clusters));
    bind<int>("synthetic.ground_grid", "ground plane splat grid resolution",
              SPLATPAINT_FIELD(int, c.scene.ground_grid));
    bind<double>("synthetic.ground_extent", "ground plane half extent",
                 SPLATPAINT_FIELD(double, c.scene.ground_extent));
    bind<double>("synthetic.object_radius", "removable object radius",
                 SPLATPAINT_FIELD(double, c.scene.object_radius));
    bind<double>("synthetic.margin_radii", "object clearance in object radii",
                 SPLATPAINT_FIELD(double, c.scene.margin_radii));
    bind<double>("synthetic.arc_radius", "camera arc radius",
                 SPLATPAINT_FIELD(double, c.scene.arc_radius));
    bind<double>("synthetic.arc_span_deg", "camera arc span in degrees",
                 SPLATPAINT_FIELD(double, c.scene.arc_span_deg));
    bind<double>("synthetic.camera_height", "camera height above the look-at point",
                 SPLATPAINT_FIELD(double, c.scene.camera_height));
    bind<double>("synthetic.focal_scale", "focal length / image size",
                 SPLATPAINT_FIELD(double, c.scene.focal_scale));
    bind<double>("synthetic.mask_alpha", "object alpha threshold for the inpaint mask",
                 SPLATPAINT_FIELD(double, c.scene.mask_alpha_threshold));
    bind<int>("synthetic.mask_dilate", "inpaint mask dilation radius in pixels",
              SPLATPAINT_FIELD(int, c.scene.mask_dilate_px));
}

#undef SPLATPAINT_FIELD

/// defaults, then the optional file, then overrides, in that order.
inline AppConfig resolve_config(const std::string& config_file,
                                const std::vector<std::string>& overrides) {
    ConfigSchema schema;
    AppConfig cfg;
    cfg.sync_seed();
    if (!config_file.empty()) schema.apply_file(cfg, config_file);
    for (const auto& o : overrides) schema.apply_override(cfg, o);
    cfg.pipeline.validate();
    return cfg;
}

}  // namespace splatpaint
