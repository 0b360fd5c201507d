#pragma once

// Loss assembly, the Adam optimiser with a step-decay schedule, the training
// loop with per-epoch checkpoints and resume, and evaluation into metric
// reports. Also the two non-learned reference completions.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcd/network.hpp"
#include "pcd/oracle.hpp"

namespace pcd {

struct TrainConfig {
    std::size_t epochs = 80;
    std::size_t batch_size = 8;
    double lr = 1e-4;
    double lr_decay_factor = 0.7;
    std::size_t lr_decay_every = 20;
    std::uint64_t seed = 1;
    double grad_clip = 5.0;       // global norm; 0 disables clipping
    double score_weight = 1.0;    // auxiliary confidence loss; 0 disables it
    double score_keep = 0.75;     // fraction of coarse points labelled "good"

    /// Throws ConfigError on out-of-range values.
    void validate() const;
    /// Learning rate in effect during `epoch` (1-based).
    double lr_at(std::size_t epoch) const;
};

/// "paper" (300 epochs, batch 24, decay every 40) or "desk" (80, 8, 20).
TrainConfig train_preset(std::string_view name);

// ----------------------------------------------------------------- losses

/// Unhalved squared chamfer distance with gradients to `pred`; matches
/// chamfer_l2 in value. Nearest neighbours are found without gradients.
template <typename T>
Tensor<T> chamfer_l2_loss(const Tensor<T>& pred, std::span<const Vec3> target);

/// arcosh(1 + chamfer_l2(p_c, fps(g, n_coarse))) + arcosh(1 + chamfer_l2(p_r, g)).
template <typename T>
Tensor<T> total_loss(const Tensor<T>& p_c, const Tensor<T>& p_r, std::span<const Vec3> g, std::size_t n_coarse);

/// Labels for the auxiliary confidence loss: 1 for the ceil(keep * n) coarse
/// points closest to the ground truth (lower index first on ties), else 0.
std::vector<double> score_targets(std::span<const Vec3> coarse, std::span<const Vec3> gt, double keep);

// -------------------------------------------------------------- optimiser

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over every parameter of a store.
class Adam {
public:
    explicit Adam(const ParamStore<float>& params);

    /// One update from the gradients currently held by `params`.
    void step(ParamStore<float>& params, double lr);
    std::uint64_t steps() const { return t_; }

    void save(const std::filesystem::path& dir) const;
    void load(const std::filesystem::path& dir);

private:
    ParamStore<float> m_, v_;
    std::uint64_t t_ = 0;
};

/// Scales every gradient so the global norm is at most `max_norm`; returns
/// the norm before clipping.
double clip_gradients(ParamStore<float>& params, double max_norm);

// --------------------------------------------------------------- training

/// A sample ready for the network: prepared input plus ground truth.
struct TrainItem {
    std::string id;
    ShapeFamily family = ShapeFamily::cylinder;
    ModelInput input;
    std::vector<Vec3> gt;
    std::vector<Vec3> gt_coarse;  // fps(gt, n_coarse)
};

/// Prepares samples in parallel. Uses the first cfg.v_views views.
std::vector<TrainItem> prepare_items(std::span<const Sample> samples, const ModelConfig& cfg);

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_cd_l1 = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
    std::size_t best_epoch = 0;
    double best_val_cd_l1 = 0.0;
};

struct TrainOptions {
    std::filesystem::path run_dir;  // empty: keep everything in memory
    bool resume = false;            // continue from run_dir/state.json
    std::size_t stop_after = 0;     // stop once this epoch is done (0: run all)
    bool verbose = false;
};

/// Trains `model` in place. With a run directory, writes after every epoch:
/// last.ckpt, the optimiser state, state.json and loss.csv; best.ckpt tracks
/// the lowest validation CD-l1. On return `model` holds the last-epoch
/// parameters. NaN or infinite loss throws NumericError naming the epoch,
/// batch and sample.
TrainResult train(Model<float>& model, const TrainConfig& tc, std::span<const TrainItem> train_set,
                  std::span<const TrainItem> val_set, const TrainOptions& opt = {});

void write_loss_csv(const std::filesystem::path& file, std::span<const EpochStats> curve);

// ------------------------------------------------------------- evaluation

struct SampleMetrics {
    std::string id;
    std::string family;
    double cd_l1 = 0.0;
    double cd_l2 = 0.0;
    double hyper_cd = 0.0;
    double dcd = 0.0;
    double f_score = 0.0;
};

struct MetricMeans {
    std::size_t count = 0;
    double cd_l1 = 0.0, cd_l2 = 0.0, hyper_cd = 0.0, dcd = 0.0, f_score = 0.0;
};

struct MetricReport {
    std::vector<SampleMetrics> samples;
    MetricMeans overall;
    std::map<std::string, MetricMeans> per_family;

    /// Recomputes the means from `samples`.
    void aggregate();
    /// Aligned table; CD-l1 and CD-l2 are shown x 10^3.
    std::string to_text() const;
    std::string to_json() const;
};

SampleMetrics score_prediction(std::string id, std::string family, std::span<const Vec3> pred,
                               std::span<const Vec3> gt, double tau = 0.01);

/// Runs the model on every item (in parallel) and scores the dense output.
MetricReport evaluate(const Model<float>& model, std::span<const TrainItem> items, double tau = 0.01);

/// Scores arbitrary predictions, one per item.
MetricReport evaluate_predictions(std::span<const TrainItem> items, std::span<const std::vector<Vec3>> preds,
                                  double tau = 0.01);

/// Partial cloud united with every view back-projected to n_partial points,
/// then FPS down to n_out.
std::vector<Vec3> nonlearned_completion(const Sample& s, std::size_t n_out);

/// The partial input unchanged.
inline std::vector<Vec3> passthrough_completion(const Sample& s) { return s.partial.points; }

/// Dense output of a single forward pass as points.
std::vector<Vec3> tensor_points(const Tensor<float>& t);

}  // namespace pcd
