#pragma once

// Operator surface behind the `pcdk` tool: the run configuration (flat
// `key = value` text with [section] headers), and one function per command so
// the same code paths can be driven from tests.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcd/training.hpp"

namespace pcd::cli {

/// "section.key" -> raw value.
using Settings = std::map<std::string, std::string>;

struct RunConfig {
    std::string model_preset = "small";
    std::string train_preset = "desk";
    std::string profile_name = "clean";
    ModelConfig model = pcd::model_preset("small");
    TrainConfig train;
    DatasetOptions data;
};

/// Parses config text. Blank lines and lines starting with '#' or ';' are
/// ignored. ConfigError names the offending line.
Settings parse_ini(std::string_view text);
Settings read_ini(const std::filesystem::path& file);

/// Applies presets (model.preset, train.preset, data.profile) first, then
/// every other key, on top of the defaults. Unknown keys are a ConfigError.
RunConfig resolve(const Settings& settings);
/// `base` overridden by `overrides`, then resolved.
RunConfig resolve(const Settings& base, const Settings& overrides);

/// Every effective value, so the text alone reproduces the run.
Settings to_settings(const RunConfig& cfg);
std::string to_ini(const RunConfig& cfg);
void write_run_config(const std::filesystem::path& dir, const RunConfig& cfg);
RunConfig load_run_config(const std::filesystem::path& file);

// --------------------------------------------------------------- commands

/// Writes train/val/test splits plus config.ini under `out`. Refuses (ConfigError)
/// if `out` exists and is not empty, unless `force`.
void cmd_synth(const RunConfig& cfg, const std::filesystem::path& out, bool force, std::ostream& log);

struct TrainCommand {
    std::filesystem::path data;  // dataset root with train/ and val/
    std::filesystem::path out;   // run directory
    std::optional<std::filesystem::path> from;  // checkpoint to start from
    bool verbose = true;
};

/// Trains and writes config.ini, manifest.json, checkpoints and loss.csv.
/// With `from`: when the checkpoint's directory also holds the optimiser and
/// schedule state, training resumes from it; otherwise only the weights are
/// loaded and training starts at epoch 1.
TrainResult cmd_train(const RunConfig& cfg, const TrainCommand& cmd, std::ostream& log);

/// Writes coarse.xyzb, filtered.xyzb, dense.xyzb, confidence.csv and config.ini.
void cmd_infer(const RunConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& sample,
               const std::filesystem::path& out);

enum class Predictor { model, nonlearned, passthrough };
Predictor parse_predictor(std::string_view name);

/// Evaluates a split; writes report.txt, report.json and config.ini to `out`
/// when it is not empty.
MetricReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& split,
                      const std::filesystem::path& out, Predictor predictor = Predictor::model, double tau = 0.01);

struct AblationRow {
    std::string setting;
    double value = 0.0;
    MetricMeans metrics;
};

struct AblationTable {
    std::string axis;
    std::vector<AblationRow> rows;
    std::string to_text() const;
    std::string to_json() const;
    /// For the views axis: whether CD-l1 strictly improves from 2 to 4 to 6 views.
    bool improves_through_six() const;
};

inline const std::vector<std::size_t> kViewSweep{2, 4, 6, 8};
inline const std::vector<double> kKeepSweep{0.88, 0.75, 0.50};

/// axis "views": for each V in {2,4,6,8}, regenerates the dataset described
/// by <data>/config.ini with V views, trains, and evaluates best.ckpt on the
/// test split. axis "keep_fraction": trains once (or uses `ckpt`) and
/// evaluates with keep fractions {0.88, 0.75, 0.50}.
AblationTable cmd_ablate(const RunConfig& cfg, std::string_view axis, const std::filesystem::path& data,
                         const std::filesystem::path& out, const std::optional<std::filesystem::path>& ckpt,
                         std::ostream& log);

/// All metrics between two point files.
SampleMetrics cmd_metrics(const std::filesystem::path& pred, const std::filesystem::path& gt, double tau = 0.01);

/// Exit code for an exception: 2 config, 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace pcd::cli
