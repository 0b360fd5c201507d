#pragma once

// The completion network: patch encoder over the partial cloud, view encoder
// over the posed depth stack, cross-attention fuser with a coarse decoder,
// confidence scoring and filtering, and the consolidation upsampler.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcd/param_store.hpp"
#include "pcd/point_cloud.hpp"
#include "pcd/views.hpp"

namespace pcd {

enum class MergeSource { input, coarse };

struct ModelConfig {
    std::string preset = "full";
    // partial encoder
    std::size_t n_in = 2048;
    std::size_t k_patches = 128;
    double radius = 0.2;
    std::size_t patch_max_points = 0;  // 0: keep every point within radius
    std::size_t edge_k = 8;
    std::size_t edge_width = 64;       // first edge-conv round; second is d_model
    std::size_t pos_enc_dim = 24;
    // shared token width and transformer shape
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t encoder_layers = 1;
    std::size_t ffn_mult = 2;
    // view encoder
    std::size_t v_views = 6;
    std::size_t image_pool = 1;  // average-pool factor applied before the backbone
    std::vector<std::size_t> conv_channels{16, 32, 64, 128};
    std::size_t pose_hidden = 64;
    // decoder, filter, consolidation
    std::size_t n_coarse = 512;
    std::size_t decoder_hidden = 256;
    double keep_fraction = 0.75;
    std::size_t upsample_ratio = 8;
    MergeSource merge_source = MergeSource::input;
    // ablation switches
    bool use_views = true;
    bool use_filter = true;

    /// Throws ConfigError on inconsistent settings.
    void validate() const;
    std::size_t output_points() const { return upsample_ratio * n_in; }
    std::size_t kept_points() const;
};

/// "full", "small" or "tiny"; ConfigError otherwise.
ModelConfig model_preset(std::string_view name);
std::string_view merge_source_name(MergeSource m);
MergeSource parse_merge_source(std::string_view name);

/// ceil(f * n) with a tolerance for products such as 0.7 * 10 that land a
/// hair above an integer.
std::size_t keep_count(double keep_fraction, std::size_t n);

/// Everything the forward pass needs that does not depend on parameters:
/// patch grouping, edge-conv neighbourhoods, pooled images and poses.
struct ModelInput {
    std::vector<Vec3> partial;
    // Patch points are laid out patch after patch; rows index this layout.
    std::vector<Vec3> seeds;                  // K seed positions
    std::vector<float> local;                 // [P x 3] point minus its seed
    std::vector<std::size_t> patch_starts;    // K segment starts into P
    std::vector<std::size_t> edge_center;     // [E] row of the centre point
    std::vector<std::size_t> edge_neighbor;   // [E] row of the neighbour
    std::vector<std::size_t> edge_starts;     // P segment starts into E
    // Views, each [1 x h x w] holding 1 - depth after pooling.
    std::vector<std::vector<float>> images;
    std::size_t image_h = 0, image_w = 0;
    std::vector<CameraPose> poses;
};

ModelInput prepare_input(std::span<const Vec3> partial, std::span<const DepthView> views, const ModelConfig& cfg);

template <typename T>
struct ForwardResult {
    Tensor<T> patch_features;  // [K x d] edge-conv output before the seed encoding
    Tensor<T> patch_tokens;    // [K x d] after the partial transformer
    Tensor<T> f_p;             // [1 x d]
    Tensor<T> view_tokens;     // [V x d] (undefined without views)
    Tensor<T> f_i;             // [1 x d] (F_P stands in without views)
    Tensor<T> attention;       // [K x V]
    Tensor<T> f_fusion;        // [1 x d]
    Tensor<T> coarse;          // [n_coarse x 3]
    Tensor<T> logits;          // [n_coarse x 1]
    Tensor<T> scores;          // [n_coarse x 1], sigmoid(logits)
    std::vector<std::size_t> kept;  // ascending coarse indices of P_f
    Tensor<T> filtered;        // [|kept| x 3]
    std::vector<std::size_t> merged_pick;  // FPS indices into [P_f ; source]
    Tensor<T> p_de;            // [n_in x 3]
    Tensor<T> offsets;         // [R n_in x 3]
    Tensor<T> dense;           // [R n_in x 3]
};

/// Indices of the ceil(f n) highest scores, lower index first on ties,
/// returned in ascending index order.
std::vector<std::size_t> select_top(std::span<const double> scores, double keep_fraction);

template <typename T>
class Model {
public:
    Model(ModelConfig cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    ForwardResult<T> forward(const ModelInput& in) const;

    // Stages, exposed for testing.
    Tensor<T> patch_features(const ModelInput& in) const;
    Tensor<T> encode_partial(const ModelInput& in, Tensor<T>* features = nullptr) const;
    Tensor<T> encode_views(const ModelInput& in) const;
    Tensor<T> pose_embedding(const CameraPose& pose) const;
    struct Fused {
        Tensor<T> attention, f_fusion, coarse;
    };
    Fused fuse(const Tensor<T>& patch_tokens, const Tensor<T>& view_tokens) const;
    /// Returns logits; scores are sigmoid(logits).
    Tensor<T> confidence_logits(const Tensor<T>& coarse, const Tensor<T>& f_i) const;
    struct Consolidated {
        std::vector<std::size_t> pick;
        Tensor<T> p_de, offsets, dense;
    };
    Consolidated consolidate(const Tensor<T>& filtered, const Tensor<T>& source, const Tensor<T>& f_fusion) const;

private:
    const Tensor<T>& p(const std::string& path) const { return params_.get(path); }
    Tensor<T> lin(const std::string& name, const Tensor<T>& x) const;
    Tensor<T> transformer(const std::string& name, Tensor<T> x) const;
    void add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero = false);
    void add_transformer(const std::string& name, std::mt19937_64& rng);

    ModelConfig cfg_;
    ParamStore<T> params_;
};

/// Reconstructs a model from a checkpoint written for `cfg`.
Model<float> load_model(const ModelConfig& cfg, const std::filesystem::path& checkpoint);

}  // namespace pcd
