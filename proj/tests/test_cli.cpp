#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "pcd/cli.hpp"

using namespace pcd;
using namespace pcd::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const char* name) {
    auto dir = fs::temp_directory_path() / "pcdk_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const char* kTinyIni = R"(
# tiny end-to-end configuration
[model]
preset = tiny
[train]
epochs = 2
batch_size = 2
lr = 0.001
[data]
train = 4
val = 2
test = 2
n_partial = 64
n_gt = 1024
width = 32
views = 2
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

int run_tool(const std::string& args) {
    const std::string cmd = std::string(PCDK_BINARY) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config text parsing") {
    const auto s = parse_ini("[model]\nd_model = 64 \n; comment\n# comment\n\n[train]\nlr=0.5\n");
    CHECK(s.at("model.d_model") == "64");
    CHECK(s.at("train.lr") == "0.5");
    CHECK_THROWS_AS(parse_ini("d_model = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_ini("[model\n"), ConfigError);
    CHECK_THROWS_AS(parse_ini("[model]\njust words\n"), ConfigError);
}

TEST_CASE("presets resolve before explicit keys") {
    // Key order in the file does not matter: the preset is applied first.
    const auto c = resolve(parse_ini("[model]\nd_model = 64\npreset = tiny\nheads = 4\n"));
    CHECK(c.model_preset == "tiny");
    CHECK(c.model.d_model == 64);
    CHECK(c.model.n_in == 64);
    CHECK(c.model.heads == 4);
    const auto d = resolve({});
    CHECK(d.model_preset == "small");
    CHECK(d.model.k_patches == 16);
    CHECK(d.train.epochs == 80);
    CHECK(d.data.train == 200);
    CHECK(d.data.val == 20);
    CHECK(d.data.test == 20);

    const auto severe = resolve(parse_ini("[data]\nprofile = severe\noutlier_rate = 0.2\n"));
    CHECK(severe.data.sample.profile.depth_noise_sigma == profile_preset("severe").depth_noise_sigma);
    CHECK(severe.data.sample.profile.outlier_rate == 0.2);

    CHECK_THROWS_AS(resolve(parse_ini("[model]\nwidth = 3\n")), ConfigError);
    CHECK_THROWS_AS(resolve(parse_ini("[train]\nlr = fast\n")), ConfigError);
    CHECK_THROWS_AS(resolve(parse_ini("[model]\nupsample_ratio = 3\n")), ConfigError);
    CHECK_THROWS_AS(resolve(parse_ini("[model]\nuse_views = maybe\n")), ConfigError);
    CHECK_THROWS_AS(resolve(parse_ini("[data]\nfamilies = chair_like, teapot\n")), ConfigError);

    const auto over = resolve(parse_ini("[train]\nepochs = 5\n"), {{"train.epochs", "7"}});
    CHECK(over.train.epochs == 7);
}

TEST_CASE("written config reproduces the run configuration") {
    auto c = resolve(parse_ini(kTinyIni));
    c.model.keep_fraction = 0.1 + 0.2;  // a value with no short decimal form
    c.data.families = {ShapeFamily::lamp_like, ShapeFamily::box_frame};
    c.data.sample.azimuths = {10.0, 190.5};
    const auto text = to_ini(c);
    const auto back = resolve(parse_ini(text));
    CHECK(to_ini(back) == text);
    CHECK(back.model.keep_fraction == c.model.keep_fraction);
    CHECK(back.data.families == c.data.families);
    CHECK(back.data.sample.azimuths == c.data.sample.azimuths);
    CHECK(back.model.conv_channels == c.model.conv_channels);
}

TEST_CASE("synth, train, infer and eval") {
    const auto root = scratch_dir("pipeline");
    const auto cfg = resolve(parse_ini(kTinyIni));
    std::ostringstream log;
    cmd_synth(cfg, root / "data", false, log);
    CHECK(log.str().find("4 train, 2 val, 2 test") != std::string::npos);
    CHECK(load_split(root / "data" / "train").size() == 4);
    CHECK(fs::exists(root / "data" / "config.ini"));
    CHECK_THROWS_AS(cmd_synth(cfg, root / "data", false, log), ConfigError);
    CHECK_NOTHROW(cmd_synth(cfg, root / "data", true, log));

    const auto result = cmd_train(cfg, {root / "data", root / "run", std::nullopt, false}, log);
    CHECK(result.curve.size() == 2);
    for (const char* f : {"config.ini", "manifest.json", "last.ckpt", "best.ckpt", "loss.csv"})
        CHECK(fs::exists(root / "run" / f));
    CHECK(slurp(root / "run" / "manifest.json").find("\"seed\": 1") != std::string::npos);
    CHECK(load_run_config(root / "run" / "config.ini").model.n_in == 64);

    // Resuming from the checkpoint continues the schedule.
    auto longer = cfg;
    longer.train.epochs = 3;
    const auto resumed = cmd_train(longer, {root / "data", root / "run", root / "run" / "last.ckpt", false}, log);
    CHECK(resumed.curve.size() == 3);
    CHECK(resumed.curve[0].train_loss == result.curve[0].train_loss);

    const auto sample = root / "data" / "test" / "sample_00000";
    cmd_infer(cfg, root / "run" / "best.ckpt", sample, root / "infer");
    CHECK(read_xyzb(root / "infer" / "coarse.xyzb").size() == cfg.model.n_coarse);
    CHECK(read_xyzb(root / "infer" / "filtered.xyzb").size() == keep_count(0.75, cfg.model.n_coarse));
    CHECK(read_xyzb(root / "infer" / "dense.xyzb").size() == cfg.model.upsample_ratio * cfg.model.n_in);
    CHECK(count_lines(root / "infer" / "confidence.csv") == cfg.model.n_coarse + 1);
    const auto first = slurp(root / "infer" / "dense.xyzb");
    const auto csv = slurp(root / "infer" / "confidence.csv");
    cmd_infer(cfg, root / "run" / "best.ckpt", sample, root / "infer");
    CHECK(slurp(root / "infer" / "dense.xyzb") == first);
    CHECK(slurp(root / "infer" / "confidence.csv") == csv);

    const auto report = cmd_eval(cfg, root / "run" / "best.ckpt", root / "data" / "test", root / "eval");
    CHECK(report.samples.size() == 2);
    CHECK(fs::exists(root / "eval" / "report.txt"));
    CHECK(fs::exists(root / "eval" / "report.json"));
    CHECK(fs::exists(root / "eval" / "config.ini"));
    const auto pass = cmd_eval(cfg, {}, root / "data" / "test", {}, Predictor::passthrough);
    const auto base = cmd_eval(cfg, {}, root / "data" / "test", {}, Predictor::nonlearned);
    CHECK(base.overall.cd_l1 < pass.overall.cd_l1);
    CHECK_THROWS_AS(parse_predictor("oracle"), ConfigError);

    const auto m = cmd_metrics(sample / "gt.xyzb", sample / "gt.xyzb");
    CHECK(m.cd_l1 == 0.0);
    CHECK(m.f_score == 1.0);

    const auto keep = cmd_ablate(cfg, "keep_fraction", root / "data", root / "ablate", root / "run" / "best.ckpt", log);
    REQUIRE(keep.rows.size() == 3);
    CHECK(keep.rows[0].value == 0.88);
    CHECK(keep.rows[2].value == 0.50);
    CHECK(keep.to_text().find("12% filtered") != std::string::npos);
    CHECK(fs::exists(root / "ablate" / "ablate_keep_fraction.txt"));
    CHECK_THROWS_AS(cmd_ablate(cfg, "depth", root / "data", root / "ablate", std::nullopt, log), ConfigError);
}

TEST_CASE("views ablation sweeps 2, 4, 6 and 8 views") {
    const auto root = scratch_dir("views");
    auto cfg = resolve(parse_ini(kTinyIni));
    cfg.train.epochs = 1;
    cfg.data.train = 2;
    cfg.data.val = 1;
    cfg.data.test = 1;
    std::ostringstream log;
    cmd_synth(cfg, root / "data", false, log);
    const auto table = cmd_ablate(cfg, "views", root / "data", root / "out", std::nullopt, log);
    REQUIRE(table.rows.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(table.rows[i].value == double(kViewSweep[i]));
    const auto text = table.to_text();
    for (const char* col : {"CD-l1x1e3", "DCD", "F1", "V=8"}) CHECK(text.find(col) != std::string::npos);
    CHECK(load_split(root / "out" / "data_v8" / "test")[0].views.size() == 8);
}

TEST_CASE("exit codes") {
    const auto root = scratch_dir("exit");
    {
        std::ofstream(root / "tiny.ini") << kTinyIni;
    }
    const auto r = root.string();
    CHECK(run_tool("") == 2);
    CHECK(run_tool("synth --config " + r + "/tiny.ini --out " + r + "/data") == 0);
    CHECK(run_tool("synth --config " + r + "/tiny.ini --out " + r + "/data") == 2);
    CHECK(run_tool("train --data " + r + "/missing --out " + r + "/run --model tiny") == 3);
    CHECK(run_tool("train --data " + r + "/data --out " + r + "/run --model huge") == 2);
    CHECK(run_tool("train --data " + r + "/data --out " + r + "/run --set train.lr=-1") == 2);
    CHECK(run_tool("metrics --pred " + r + "/nothing.xyzb --gt " + r + "/nothing.xyzb") == 3);

    CHECK(exit_code_for(ConfigError("x")) == 2);
    CHECK(exit_code_for(DataError("x")) == 3);
    CHECK(exit_code_for(NumericError("x")) == 4);
    CHECK(exit_code_for(std::runtime_error("x")) == 1);
}
