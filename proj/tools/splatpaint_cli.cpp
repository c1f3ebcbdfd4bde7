// splatpaint: depth-guided Gaussian-splat scene inpainting toolkit.
//
// Subcommands: generate | train | sgi | render | eval | gradcheck.
// Exit codes:
//   0 success            5 malformed file (scene/raster/png)
//   2 usage error        6 inpaint/depth backend failure
//   3 config error       7 training or numeric failure
//   4 missing input      8 gradient check above tolerance
//   1 unexpected error

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "splatpaint/config.hpp"
#include "splatpaint/dataset.hpp"
#include "splatpaint/metrics.hpp"
#include "splatpaint/png_io.hpp"
#include "splatpaint/scene_io.hpp"
#include "splatpaint/splr_io.hpp"
#include "splatpaint/trainer.hpp"

namespace fs = std::filesystem;
using namespace splatpaint;

namespace {

enum ExitCode {
    kOk = 0,
    kUnexpected = 1,
    kUsage = 2,
    kConfig = 3,
    kMissingInput = 4,
    kMalformed = 5,
    kBackend = 6,
    kTraining = 7,
    kGradCheck = 8,
};

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::int64_t seed = -1;  // -1 = not given
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "config file (key = value lines)");
    cmd->add_option("--set", args.overrides, "override, e.g. --set loss.kappa=25")
        ->take_all();
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "master seed (shorthand for --set seed=N)");
}

AppConfig make_config(const CommonArgs& args) {
    std::vector<std::string> overrides = args.overrides;
    if (args.seed >= 0) overrides.push_back("seed=" + std::to_string(args.seed));
    return resolve_config(args.config_file, overrides);
}

/// Every output directory records the seed and the fully resolved config.
void record_run(const AppConfig& cfg, const std::string& out_dir) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    std::ofstream seed_file(fs::path(out_dir) / "seed.txt");
    seed_file << cfg.pipeline.seed << "\n";
    std::ofstream cfg_file(fs::path(out_dir) / "config_used.cfg");
    cfg_file << ConfigSchema().dump(cfg);
}

TrainDataset load_train_dataset(const AppConfig& cfg, const std::string& dataset_dir) {
    const SyntheticDataset ds = load_dataset(dataset_dir);
    return make_train_dataset(ds, cfg.pipeline.oracle, cfg.pipeline.sgi.timeout_sec);
}

int cmd_generate(const CommonArgs& args) {
    const AppConfig cfg = make_config(args);
    if (args.out_dir.empty()) {
        std::cerr << "generate: --out is required\n";
        return kUsage;
    }
    const ScenePair pair = generate_scene(cfg.scene);
    const SyntheticDataset ds = generate_dataset(pair, cfg.scene, cfg.pipeline.raster,
                                                 cfg.pipeline.background_color,
                                                 cfg.pipeline.background_depth);
    write_dataset(ds, args.out_dir);
    record_run(cfg, args.out_dir);
    std::cout << "generate: wrote " << ds.views.size() << " views to " << args.out_dir
              << "\n";
    return kOk;
}

int run_training(const CommonArgs& args, const std::string& dataset_dir, RunMode mode) {
    const AppConfig cfg = make_config(args);
    if (dataset_dir.empty() || args.out_dir.empty()) {
        std::cerr << "train/sgi: --dataset and --out are required\n";
        return kUsage;
    }
    Trainer trainer(load_train_dataset(cfg, dataset_dir), cfg.pipeline);
    trainer.init();
    record_run(cfg, args.out_dir);
    const RunReport report = trainer.run(mode, args.out_dir);

    save_scene(trainer.scene(), (fs::path(args.out_dir) / "scene.splf").string());
    write_training_log_csv(trainer.history(),
                           (fs::path(args.out_dir) / "training_log.csv").string());
    if (!report.rounds.empty()) {
        std::ofstream f(fs::path(args.out_dir) / "eval.csv");
        for (std::size_t i = 0; i < report.rounds.size(); ++i)
            append_eval_csv(report.rounds[i], f, i == 0);
        std::cout << format_eval_table(report.rounds.back());
    }
    std::cout << "steps: " << trainer.iteration() << ", references: "
              << trainer.references().size() << ", refinement rounds: " << report.sgi_rounds
              << (report.converged ? " (converged)" : "") << ", "
              << std::fixed << std::setprecision(1) << report.seconds << " s\n";
    return kOk;
}

int cmd_render(const CommonArgs& args, const std::string& scene_file,
               const std::string& dataset_dir, int view_id) {
    const AppConfig cfg = make_config(args);
    if (args.out_dir.empty()) {
        std::cerr << "render: --out is required\n";
        return kUsage;
    }
    const Scene scene = load_scene(scene_file);
    const SyntheticDataset ds = load_dataset(dataset_dir);
    record_run(cfg, args.out_dir);
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
        if (view_id >= 0 && static_cast<int>(v) != view_id) continue;
        const RenderedView view =
            render(scene, ds.views[v].camera, cfg.pipeline.raster,
                   cfg.pipeline.background_color, cfg.pipeline.background_depth, true);
        char name[64];
        std::snprintf(name, sizeof(name), "render_%03zu.png", v);
        write_png((fs::path(args.out_dir) / name).string(), view.color);
        std::snprintf(name, sizeof(name), "depth_%03zu.splr", v);
        write_splr((fs::path(args.out_dir) / name).string(), view.depth);
        std::snprintf(name, sizeof(name), "alpha_%03zu.splr", v);
        write_splr((fs::path(args.out_dir) / name).string(), view.alpha);
        std::snprintf(name, sizeof(name), "feature_%03zu.splr", v);
        write_splr((fs::path(args.out_dir) / name).string(), view.feature);
    }
    std::cout << "render: wrote maps to " << args.out_dir << "\n";
    return kOk;
}

int cmd_eval(const CommonArgs& args, const std::string& scene_file,
             const std::string& dataset_dir) {
    const AppConfig cfg = make_config(args);
    const Scene scene = load_scene(scene_file);
    const SyntheticDataset ds = load_dataset(dataset_dir);
    std::vector<Camera> cams;
    std::vector<ImageD> truth;
    std::vector<Mask> masks;
    for (const auto& v : ds.views) {
        cams.push_back(v.camera);
        truth.push_back(v.truth_image);
        masks.push_back(v.inpaint_mask);
    }
    const EvalReport report =
        evaluate_scene(scene, cfg.pipeline.raster, cams, truth, masks,
                       cfg.pipeline.background_color, cfg.pipeline.background_depth);
    std::cout << format_eval_table(report);
    if (!args.out_dir.empty()) {
        record_run(cfg, args.out_dir);
        write_eval_csv(report, (fs::path(args.out_dir) / "eval.csv").string());
    }
    return kOk;
}

int cmd_gradcheck(const CommonArgs& args, int splat_count, double tolerance) {
    const AppConfig cfg = make_config(args);
    const Camera cam = probe_camera();
    const Scene scene = random_probe_scene(cfg.pipeline.seed, splat_count, cam);
    const GradCheckReport report =
        check_gradients(scene, cam, cfg.pipeline.seed + 1, tolerance,
                        cfg.pipeline.raster.threads);
    std::ostringstream os;
    os << "gradient check: " << splat_count << " splats, tolerance " << tolerance << "\n";
    for (const auto& cls : report.classes)
        os << "  " << cls.param_class << ": max rel err " << std::scientific
           << cls.max_rel_err << "\n";
    os << (report.passed ? "PASS" : "FAIL") << " in " << std::fixed << std::setprecision(2)
       << report.seconds << " s\n";
    std::cout << os.str();
    if (!args.out_dir.empty()) {
        record_run(cfg, args.out_dir);
        std::ofstream f(fs::path(args.out_dir) / "gradcheck.txt");
        f << os.str();
    }
    return report.passed ? kOk : kGradCheck;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"depth-guided Gaussian-splat scene inpainting"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, sgi_args, render_args, eval_args, grad_args;
    std::string train_dataset, sgi_dataset, render_dataset, eval_dataset;
    std::string render_scene, eval_scene;
    int render_view = -1;
    int grad_splats = 50;
    double grad_tolerance = 1e-3;

    CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(generate, gen_args);

    CLI::App* train = app.add_subcommand("train", "baseline optimization");
    add_common(train, train_args);
    train->add_option("--dataset", train_dataset, "dataset directory")->required();

    CLI::App* sgi = app.add_subcommand("sgi", "full pipeline with selective refinement");
    add_common(sgi, sgi_args);
    sgi->add_option("--dataset", sgi_dataset, "dataset directory")->required();

    CLI::App* render_cmd = app.add_subcommand("render", "write PNG and raster maps");
    add_common(render_cmd, render_args);
    render_cmd->add_option("--scene", render_scene, "scene file")->required();
    render_cmd->add_option("--dataset", render_dataset, "dataset directory (cameras)")
        ->required();
    render_cmd->add_option("--view", render_view, "render one view only");

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a scene against ground truth");
    add_common(eval_cmd, eval_args);
    eval_cmd->add_option("--scene", eval_scene, "scene file")->required();
    eval_cmd->add_option("--dataset", eval_dataset, "dataset directory")->required();

    CLI::App* gradcheck = app.add_subcommand("gradcheck", "verify analytic gradients");
    add_common(gradcheck, grad_args);
    gradcheck->add_option("--splats", grad_splats, "random scene size (<= 100)");
    gradcheck->add_option("--tolerance", grad_tolerance, "max relative error");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (generate->parsed()) return cmd_generate(gen_args);
        if (train->parsed()) return run_training(train_args, train_dataset, RunMode::kBaseline);
        if (sgi->parsed()) return run_training(sgi_args, sgi_dataset, RunMode::kFull);
        if (render_cmd->parsed())
            return cmd_render(render_args, render_scene, render_dataset, render_view);
        if (eval_cmd->parsed()) return cmd_eval(eval_args, eval_scene, eval_dataset);
        if (gradcheck->parsed()) return cmd_gradcheck(grad_args, grad_splats, grad_tolerance);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    } catch (const DatasetError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kMissingInput;
    } catch (const SceneIoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        const std::string what = e.what();
        return what.find("cannot open") != std::string::npos ? kMissingInput : kMalformed;
    } catch (const SplrError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kMalformed;
    } catch (const PngError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kMalformed;
    } catch (const InpaintError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kBackend;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kTraining;
    } catch (const AlignmentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kTraining;
    } catch (const GenerationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kTraining;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kConfig;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kUnexpected;
    }
    return kUsage;
}
