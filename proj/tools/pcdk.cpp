#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pcd/cli.hpp"

namespace fs = std::filesystem;
using namespace pcd;
using namespace pcd::cli;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "Config file ([section] key = value)");
    app->add_option("--set", c.sets, "Override one setting, e.g. --set train.epochs=5")->take_all();
}

// File settings, then --set overrides, then the command's own flags.
RunConfig effective(const Common& c, const Settings& flags, const fs::path& fallback_config = {}) {
    Settings base;
    if (!c.config.empty())
        base = read_ini(c.config);
    else if (!fallback_config.empty() && fs::exists(fallback_config))
        base = read_ini(fallback_config);
    Settings overrides;
    for (const auto& s : c.sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || s.find('.') > eq) throw ConfigError("--set expects section.key=value, got '" + s + "'");
        overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    for (const auto& [k, v] : flags) overrides[k] = v;
    return resolve(base, overrides);
}

std::string exact(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
}

template <typename T>
void flag_to(Settings& s, const std::string& key, const std::optional<T>& v) {
    if (!v) return;
    if constexpr (std::is_same_v<T, std::string>)
        s[key] = *v;
    else
        s[key] = std::to_string(*v);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pcdk: multi-view assisted point cloud completion"};
    app.require_subcommand(1);

    // synth
    Common synth_c;
    std::string synth_out;
    bool synth_force = false;
    std::optional<std::string> synth_profile;
    std::optional<std::size_t> synth_views, synth_train, synth_val, synth_test;
    std::optional<std::uint64_t> synth_seed;
    auto* synth = app.add_subcommand("synth", "Generate train/val/test splits of synthetic shapes");
    add_common(synth, synth_c);
    synth->add_option("--out", synth_out, "Dataset directory")->required();
    synth->add_flag("--force", synth_force, "Overwrite a non-empty directory");
    synth->add_option("--profile", synth_profile, "View inconsistency preset: clean, mild or severe");
    synth->add_option("--views", synth_views, "Auxiliary views per sample");
    synth->add_option("--train", synth_train, "Training samples");
    synth->add_option("--val", synth_val, "Validation samples");
    synth->add_option("--test", synth_test, "Test samples");
    synth->add_option("--seed", synth_seed, "Dataset seed");

    // train
    Common train_c;
    std::string train_data, train_out;
    std::optional<std::string> train_from, train_model;
    std::optional<std::size_t> train_epochs, train_batch;
    std::optional<std::uint64_t> train_seed;
    std::optional<double> train_lr;
    bool train_quiet = false;
    auto* tr = app.add_subcommand("train", "Train a model");
    add_common(tr, train_c);
    tr->add_option("--data", train_data, "Dataset directory")->required();
    tr->add_option("--out", train_out, "Run directory")->required();
    tr->add_option("--from", train_from, "Checkpoint to resume or start from");
    tr->add_option("--model", train_model, "Model preset: tiny, small or full");
    tr->add_option("--epochs", train_epochs, "Epochs");
    tr->add_option("--batch-size", train_batch, "Samples per optimiser step");
    tr->add_option("--lr", train_lr, "Initial learning rate");
    tr->add_option("--seed", train_seed, "Initialisation and shuffling seed");
    tr->add_flag("--quiet", train_quiet, "No per-epoch lines");

    // infer
    Common infer_c;
    std::string infer_ckpt, infer_sample, infer_out;
    auto* inf = app.add_subcommand("infer", "Complete one sample");
    add_common(inf, infer_c);
    inf->add_option("--ckpt", infer_ckpt, "Checkpoint")->required();
    inf->add_option("--sample", infer_sample, "Sample directory")->required();
    inf->add_option("--out", infer_out, "Output directory")->required();

    // eval
    Common eval_c;
    std::string eval_ckpt, eval_split, eval_out, eval_predictor = "model";
    std::optional<double> eval_keep;
    bool eval_no_filter = false;
    double eval_tau = 0.01;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint or a reference predictor on a split");
    add_common(ev, eval_c);
    ev->add_option("--ckpt", eval_ckpt, "Checkpoint (needed for --predictor model)");
    ev->add_option("--split", eval_split, "Split directory, e.g. data/test")->required();
    ev->add_option("--out", eval_out, "Report directory");
    ev->add_option("--predictor", eval_predictor, "model, nonlearned or passthrough");
    ev->add_option("--keep", eval_keep, "Override keep_fraction");
    ev->add_flag("--no-filter", eval_no_filter, "Disable confidence filtering");
    ev->add_option("--tau", eval_tau, "F-score threshold");

    // ablate
    Common ablate_c;
    std::string ablate_axis, ablate_data, ablate_out;
    std::optional<std::string> ablate_ckpt;
    auto* ab = app.add_subcommand("ablate", "Sweep the number of views or the kept fraction");
    add_common(ab, ablate_c);
    ab->add_option("--axis", ablate_axis, "views or keep_fraction")->required();
    ab->add_option("--data", ablate_data, "Dataset directory")->required();
    ab->add_option("--out", ablate_out, "Output directory")->required();
    ab->add_option("--ckpt", ablate_ckpt, "Existing checkpoint (keep_fraction axis only)");

    // metrics
    std::string metrics_pred, metrics_gt;
    double metrics_tau = 0.01;
    auto* me = app.add_subcommand("metrics", "Metrics between two .xyzb files");
    me->add_option("--pred", metrics_pred, "Predicted points")->required();
    me->add_option("--gt", metrics_gt, "Ground-truth points")->required();
    me->add_option("--tau", metrics_tau, "F-score threshold");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) {
            Settings f;
            flag_to(f, "data.profile", synth_profile);
            flag_to(f, "data.views", synth_views);
            flag_to(f, "data.train", synth_train);
            flag_to(f, "data.val", synth_val);
            flag_to(f, "data.test", synth_test);
            flag_to(f, "data.seed", synth_seed);
            auto cfg = effective(synth_c, f);
            cmd_synth(cfg, synth_out, synth_force, std::cout);
        } else if (tr->parsed()) {
            Settings f;
            flag_to(f, "model.preset", train_model);
            flag_to(f, "train.epochs", train_epochs);
            flag_to(f, "train.batch_size", train_batch);
            flag_to(f, "train.seed", train_seed);
            if (train_lr) f["train.lr"] = exact(*train_lr);
            // A resumed run inherits the configuration stored beside its checkpoint.
            fs::path fallback;
            if (train_from) fallback = fs::path(*train_from).parent_path() / "config.ini";
            const auto cfg = effective(train_c, f, fallback);
            TrainCommand cmd{train_data, train_out, std::nullopt, !train_quiet};
            if (train_from) cmd.from = fs::path(*train_from);
            cmd_train(cfg, cmd, std::cout);
        } else if (inf->parsed()) {
            const auto cfg = effective(infer_c, {}, fs::path(infer_ckpt).parent_path() / "config.ini");
            cmd_infer(cfg, infer_ckpt, infer_sample, infer_out);
            std::cout << "infer: wrote " << infer_out << '\n';
        } else if (ev->parsed()) {
            Settings f;
            if (eval_keep) f["model.keep_fraction"] = exact(*eval_keep);
            if (eval_no_filter) f["model.use_filter"] = "false";
            const auto predictor = parse_predictor(eval_predictor);
            if (predictor == Predictor::model && eval_ckpt.empty()) throw ConfigError("eval: --ckpt is required for the model");
            const fs::path fallback = eval_ckpt.empty() ? fs::path() : fs::path(eval_ckpt).parent_path() / "config.ini";
            const auto cfg = effective(eval_c, f, fallback);
            const auto report = cmd_eval(cfg, eval_ckpt, eval_split, eval_out, predictor, eval_tau);
            std::cout << report.to_text();
        } else if (ab->parsed()) {
            const auto cfg = effective(ablate_c, {});
            std::optional<fs::path> ckpt;
            if (ablate_ckpt) ckpt = fs::path(*ablate_ckpt);
            const auto table = cmd_ablate(cfg, ablate_axis, ablate_data, ablate_out, ckpt, std::cout);
            std::cout << table.to_text();
        } else if (me->parsed()) {
            const auto m = cmd_metrics(metrics_pred, metrics_gt, metrics_tau);
            std::printf("cd_l1 %.9g\ncd_l2 %.9g\nhyper_cd %.9g\ndcd %.9g\nf_score %.9g\n", m.cd_l1, m.cd_l2, m.hyper_cd,
                        m.dcd, m.f_score);
        }
    } catch (const std::exception& e) {
        std::cerr << "pcdk: " << e.what() << '\n';
        return exit_code_for(e);
    }
    return 0;
}
