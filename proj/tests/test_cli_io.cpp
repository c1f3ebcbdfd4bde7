#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "splatpaint/config.hpp"
#include "splatpaint/dataset.hpp"
#include "splatpaint/scene_io.hpp"
#include "splatpaint/splr_io.hpp"

using namespace splatpaint;
namespace fs = std::filesystem;

namespace {

const char* kCli = SPLATPAINT_CLI_PATH;

int run_cli(const std::string& args) {
    const std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("splatpaint_cli_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string tiny_overrides() {
    return "--set synthetic.image_size=48 --set synthetic.ground_grid=20 "
           "--set train.gaussian_budget=800 --set train.baseline_steps=40 "
           "--set train.steps_per_round=20 --set sgi.max_rounds=1 "
           "--set raster.threads=1";
}

std::string config_value(const fs::path& cfg_file, const std::string& key) {
    std::ifstream f(cfg_file);
    for (std::string line; std::getline(f, line);) {
        const auto eq = line.find(" = ");
        if (eq == std::string::npos) continue;
        if (line.substr(0, eq) == key) {
            const auto hash = line.find("  #");
            return line.substr(eq + 3, hash - eq - 3);
        }
    }
    return "";
}

}  // namespace

TEST_CASE("config schema resolves defaults, file and overrides in order") {
    const fs::path dir = fresh_dir("config");
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "test.cfg";
    {
        std::ofstream f(cfg_path);
        f << "# comment line\n";
        f << "train.baseline_steps = 10\n";
        f << "loss.kappa = 30\n";
    }
    const AppConfig cfg =
        resolve_config(cfg_path.string(), {"train.baseline_steps=20", "loss.kappa=25"});
    REQUIRE(cfg.pipeline.train.baseline_steps == 20);  // override beats the file
    REQUIRE(cfg.pipeline.loss.kappa == 25.0);
    REQUIRE(cfg.pipeline.train.gaussian_budget == 20000);  // untouched default
    fs::remove_all(dir);
}

TEST_CASE("unknown keys and bad values are rejected by name") {
    REQUIRE_THROWS_WITH(resolve_config("", {"loss.kapa=25"}),
                        Catch::Matchers::ContainsSubstring("loss.kapa"));
    REQUIRE_THROWS_WITH(resolve_config("", {"loss.kappa=fast"}),
                        Catch::Matchers::ContainsSubstring("loss.kappa"));
    REQUIRE_THROWS_AS(resolve_config("", {"no_equals_sign"}), ConfigError);
}

TEST_CASE("config dump covers every key and round-trips") {
    ConfigSchema schema;
    AppConfig cfg;
    const std::string dump = schema.dump(cfg);
    for (const auto& e : schema.entries())
        REQUIRE(dump.find(e.key + " = ") != std::string::npos);

    // A dumped config must parse back cleanly.
    const fs::path path = fs::temp_directory_path() / "splatpaint_cli_dump.cfg";
    {
        std::ofstream f(path);
        f << dump;
    }
    AppConfig back;
    schema.apply_file(back, path.string());
    REQUIRE(back.pipeline.loss.kappa == cfg.pipeline.loss.kappa);
    REQUIRE(back.pipeline.train.baseline_steps == cfg.pipeline.train.baseline_steps);
    fs::remove(path);
}

TEST_CASE("cli: generate records the seed and writes a loadable dataset") {
    const fs::path dir = fresh_dir("generate");
    REQUIRE(run_cli("generate --seed 7 --out " + dir.string() + " " + tiny_overrides() +
                    " --set synthetic.views=4") == 0);
    std::ifstream seed_file(dir / "seed.txt");
    std::uint64_t seed = 0;
    seed_file >> seed;
    REQUIRE(seed == 7);
    REQUIRE(config_value(dir / "config_used.cfg", "seed") == "7");
    const SyntheticDataset ds = load_dataset(dir.string());
    REQUIRE(ds.views.size() == 4);
    fs::remove_all(dir);
}

TEST_CASE("cli: unknown subcommand, unknown key, bad value") {
    REQUIRE(run_cli("frobnicate") == 2);
    REQUIRE(run_cli("generate --out /tmp/x --set loss.kapa=25") == 3);
    REQUIRE(run_cli("generate --out /tmp/x --set loss.kappa=banana") == 3);
}

TEST_CASE("cli: train on a missing dataset reports the missing-input code") {
    const fs::path dir = fresh_dir("missing");
    REQUIRE(run_cli("train --dataset /nonexistent/nowhere --out " + dir.string()) == 4);
    fs::remove_all(dir);
}

TEST_CASE("cli: generate -> train -> eval -> render round trip") {
    const fs::path data = fresh_dir("pipe_data");
    const fs::path train_out = fresh_dir("pipe_train");
    const fs::path eval_out = fresh_dir("pipe_eval");
    const fs::path render_out = fresh_dir("pipe_render");

    REQUIRE(run_cli("generate --seed 3 --out " + data.string() + " " + tiny_overrides()) == 0);
    REQUIRE(run_cli("train --seed 3 --dataset " + data.string() + " --out " +
                    train_out.string() + " " + tiny_overrides()) == 0);

    // Every artifact written must be re-readable by its loader.
    const Scene scene = load_scene((train_out / "scene.splf").string());
    REQUIRE(scene.size() > 0);
    {
        std::ifstream log(train_out / "training_log.csv");
        std::string header;
        std::getline(log, header);
        REQUIRE(header == "iteration,photometric,sdcl,cfdl,oacl,total");
        int rows = 0;
        for (std::string line; std::getline(log, line);) ++rows;
        REQUIRE(rows == 40);
    }
    {
        std::ifstream eval_csv(train_out / "eval.csv");
        REQUIRE(eval_csv.good());
        std::string header;
        std::getline(eval_csv, header);
        REQUIRE(header.find("psnr_full") != std::string::npos);
    }

    REQUIRE(run_cli("eval --scene " + (train_out / "scene.splf").string() + " --dataset " +
                    data.string() + " --out " + eval_out.string() + " " + tiny_overrides()) ==
            0);
    REQUIRE(fs::exists(eval_out / "eval.csv"));

    REQUIRE(run_cli("render --scene " + (train_out / "scene.splf").string() + " --dataset " +
                    data.string() + " --out " + render_out.string() + " --view 0 " +
                    tiny_overrides()) == 0);
    REQUIRE(fs::exists(render_out / "render_000.png"));
    const ImageD depth = read_splr((render_out / "depth_000.splr").string());
    REQUIRE(depth.height() == 48);
    const ImageD feature = read_splr((render_out / "feature_000.splr").string());
    REQUIRE(feature.channels() == 16);

    for (const auto& d : {data, train_out, eval_out, render_out}) fs::remove_all(d);
}

TEST_CASE("cli: rendering an untrained freshly seeded scene succeeds") {
    const fs::path data = fresh_dir("fresh_data");
    const fs::path out = fresh_dir("fresh_train");
    const fs::path render_out = fresh_dir("fresh_render");
    REQUIRE(run_cli("generate --seed 5 --out " + data.string() + " " + tiny_overrides()) == 0);
    REQUIRE(run_cli("train --seed 5 --dataset " + data.string() + " --out " + out.string() +
                    " " + tiny_overrides() + " --set train.baseline_steps=0") == 0);
    REQUIRE(run_cli("render --scene " + (out / "scene.splf").string() + " --dataset " +
                    data.string() + " --out " + render_out.string() + " " +
                    tiny_overrides()) == 0);
    REQUIRE(fs::exists(render_out / "render_003.png"));
    for (const auto& d : {data, out, render_out}) fs::remove_all(d);
}

TEST_CASE("cli: gradcheck passes and reports per-class errors") {
    const fs::path out = fresh_dir("gradcheck");
    REQUIRE(run_cli("gradcheck --seed 11 --splats 8 --out " + out.string()) == 0);
    std::ifstream report(out / "gradcheck.txt");
    std::stringstream ss;
    ss << report.rdbuf();
    REQUIRE(ss.str().find("position") != std::string::npos);
    REQUIRE(ss.str().find("PASS") != std::string::npos);
    fs::remove_all(out);
}
