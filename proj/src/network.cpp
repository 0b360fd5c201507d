#include "pcd/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pcd/geometry.hpp"

namespace pcd {

// ----------------------------------------------------------------- config

void ModelConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
    if (n_in == 0) fail("n_in must be positive");
    if (k_patches == 0 || k_patches > n_in) fail("k_patches must be in [1, n_in]");
    if (!(radius > 0.0)) fail("radius must be positive");
    if (edge_k == 0) fail("edge_k must be positive");
    if (edge_width == 0 || d_model == 0) fail("widths must be positive");
    if (pos_enc_dim == 0 || pos_enc_dim % 6 != 0) fail("pos_enc_dim must be a positive multiple of 6");
    if (heads == 0 || d_model % heads != 0) fail("heads must divide d_model");
    if (ffn_mult == 0) fail("ffn_mult must be positive");
    if (use_views && v_views == 0) fail("v_views must be positive");
    if (image_pool == 0) fail("image_pool must be positive");
    if (conv_channels.size() != 4) fail("conv_channels needs four stages");
    for (auto c : conv_channels)
        if (c == 0) fail("conv channels must be positive");
    if (pose_hidden == 0 || decoder_hidden == 0) fail("hidden widths must be positive");
    if (n_coarse == 0) fail("n_coarse must be positive");
    if (!(keep_fraction > 0.0 && keep_fraction < 1.0)) fail("keep_fraction must be in (0, 1)");
    if (upsample_ratio == 0) fail("upsample_ratio must be >= 1");
    if ((2 * d_model) % upsample_ratio != 0)
        fail("upsample_ratio " + std::to_string(upsample_ratio) + " must divide the combined width " +
             std::to_string(2 * d_model));
    if (merge_source == MergeSource::coarse) {
        const std::size_t merged = (use_filter ? kept_points() : n_coarse) + n_coarse;
        if (merged < n_in)
            fail("merging filtered and coarse points gives " + std::to_string(merged) + " < n_in = " +
                 std::to_string(n_in) + " points; use merge_source = input or raise n_coarse");
    }
}

std::size_t keep_count(double keep_fraction, std::size_t n) {
    const double x = keep_fraction * double(n);
    return std::size_t(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

std::size_t ModelConfig::kept_points() const { return keep_count(keep_fraction, n_coarse); }

ModelConfig model_preset(std::string_view name) {
    ModelConfig c;
    if (name == "full") return c;
    if (name == "small") {
        c.preset = "small";
        c.k_patches = 16;
        c.patch_max_points = 16;
        c.edge_width = 32;
        c.d_model = 32;
        c.heads = 2;
        c.image_pool = 4;
        c.conv_channels = {8, 16, 32, 32};
        c.pose_hidden = 32;
        c.decoder_hidden = 128;
        c.upsample_ratio = 2;
        return c;
    }
    if (name == "tiny") {
        c.preset = "tiny";
        c.n_in = 64;
        c.k_patches = 8;
        c.radius = 0.3;
        c.patch_max_points = 8;
        c.edge_k = 4;
        c.edge_width = 8;
        c.pos_enc_dim = 12;
        c.d_model = 12;
        c.heads = 2;
        c.v_views = 2;
        c.image_pool = 4;
        c.conv_channels = {4, 4, 8, 8};
        c.pose_hidden = 8;
        c.n_coarse = 32;
        c.decoder_hidden = 16;
        c.upsample_ratio = 2;
        return c;
    }
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected full, small or tiny)");
}

std::string_view merge_source_name(MergeSource m) { return m == MergeSource::input ? "input" : "coarse"; }

MergeSource parse_merge_source(std::string_view name) {
    if (name == "input") return MergeSource::input;
    if (name == "coarse") return MergeSource::coarse;
    throw ConfigError("merge_source must be 'input' or 'coarse', got '" + std::string(name) + "'");
}

// ------------------------------------------------------------ input prep

ModelInput prepare_input(std::span<const Vec3> partial, std::span<const DepthView> views, const ModelConfig& cfg) {
    if (partial.size() < cfg.k_patches)
        throw std::invalid_argument("model input: " + std::to_string(partial.size()) + " points but " +
                                    std::to_string(cfg.k_patches) + " patches");
    ModelInput in;
    in.partial.assign(partial.begin(), partial.end());

    const auto patches = patchify(partial, cfg.k_patches, cfg.radius);
    for (std::size_t k = 0; k < patches.seeds.size(); ++k) {
        const Vec3 seed = partial[patches.seeds[k]];
        in.seeds.push_back(seed);
        auto members = patches.patches[k];
        if (cfg.patch_max_points && members.size() > cfg.patch_max_points) {
            // Keep the points nearest the seed (lower index on ties).
            std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
                return dist2(partial[a], seed) < dist2(partial[b], seed);
            });
            members.resize(cfg.patch_max_points);
        }
        const std::size_t base = in.local.size() / 3;
        in.patch_starts.push_back(base);
        std::vector<Vec3> local;
        for (auto i : members) {
            const Vec3 l = partial[i] - seed;
            local.push_back(l);
            in.local.insert(in.local.end(), l.begin(), l.end());
        }
        // Edge-conv neighbourhoods inside the patch, by coordinate distance.
        const std::size_t m = local.size(), k_nn = std::min(cfg.edge_k, m);
        std::vector<std::size_t> order(m);
        for (std::size_t j = 0; j < m; ++j) {
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return dist2(local[a], local[j]) < dist2(local[b], local[j]); });
            in.edge_starts.push_back(in.edge_center.size());
            for (std::size_t q = 0; q < k_nn; ++q) {
                in.edge_center.push_back(base + j);
                in.edge_neighbor.push_back(base + order[q]);
            }
        }
    }

    if (!cfg.use_views) return in;
    if (views.empty()) throw std::invalid_argument("model input: no views");
    const auto W = std::size_t(views[0].width), H = std::size_t(views[0].height);
    const auto f = cfg.image_pool;
    if (W % f || H % f)
        throw std::invalid_argument("model input: view size " + std::to_string(W) + "x" + std::to_string(H) +
                                    " not divisible by image_pool " + std::to_string(f));
    in.image_w = W / f;
    in.image_h = H / f;
    for (const auto& v : views) {
        if (std::size_t(v.width) != W || std::size_t(v.height) != H)
            throw std::invalid_argument("model input: views differ in resolution");
        std::vector<float> img(in.image_h * in.image_w, 0.0f);
        for (std::size_t r = 0; r < in.image_h; ++r)
            for (std::size_t c = 0; c < in.image_w; ++c) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < f; ++dy)
                    for (std::size_t dx = 0; dx < f; ++dx) acc += 1.0 - double(v.at(int(r * f + dy), int(c * f + dx)));
                img[r * in.image_w + c] = float(acc / double(f * f));
            }
        in.images.push_back(std::move(img));
        in.poses.push_back(v.pose);
    }
    return in;
}

std::vector<std::size_t> select_top(std::span<const double> scores, double keep_fraction) {
    const std::size_t m = keep_count(keep_fraction, scores.size());
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ------------------------------------------------------------------ model

namespace {

template <typename T>
Tensor<T> constant(Shape shape, std::span<const float> data) {
    return Tensor<T>::from(std::move(shape), std::vector<T>(data.begin(), data.end()));
}

template <typename T>
Tensor<T> points_tensor(std::span<const Vec3> pts) {
    std::vector<T> d;
    d.reserve(pts.size() * 3);
    for (const auto& p : pts) d.insert(d.end(), {T(p[0]), T(p[1]), T(p[2])});
    return Tensor<T>::from({pts.size(), 3}, std::move(d));
}

}  // namespace

template <typename T>
void Model<T>::add_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng, bool zero) {
    const double bound = 1.0 / std::sqrt(double(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<T> w(in * out), b(out);
    if (!zero) {
        for (auto& v : w) v = T(u(rng));
        for (auto& v : b) v = T(u(rng));
    }
    params_.add(name + ".w", Tensor<T>::from({in, out}, std::move(w), true));
    params_.add(name + ".b", Tensor<T>::from({1, out}, std::move(b), true));
}

template <typename T>
void Model<T>::add_transformer(const std::string& name, std::mt19937_64& rng) {
    const auto d = cfg_.d_model;
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
        const auto pre = name + ".layer" + std::to_string(l);
        for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(pre + proj, d, d, rng);
        add_linear(pre + ".ffn1", d, cfg_.ffn_mult * d, rng);
        add_linear(pre + ".ffn2", cfg_.ffn_mult * d, d, rng);
    }
}

template <typename T>
Model<T>::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), params_(seed) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto d = cfg_.d_model, e = cfg_.edge_width;
    add_linear("partial.edge1", 6, e, rng);
    add_linear("partial.edge2", 2 * e, d, rng);
    add_linear("partial.proj", d + cfg_.pos_enc_dim, d, rng);
    add_transformer("partial.encoder", rng);
    if (cfg_.use_views) {
        std::size_t cin = 1;
        for (std::size_t s = 0; s < 4; ++s) {
            const auto cout = cfg_.conv_channels[s];
            const double bound = 1.0 / std::sqrt(double(cin * 9));
            std::uniform_real_distribution<double> u(-bound, bound);
            std::vector<T> w(cout * cin * 9), b(cout);
            for (auto& v : w) v = T(u(rng));
            for (auto& v : b) v = T(u(rng));
            const auto pre = "views.conv" + std::to_string(s);
            params_.add(pre + ".w", Tensor<T>::from({cout, cin, 3, 3}, std::move(w), true));
            params_.add(pre + ".b", Tensor<T>::from({cout}, std::move(b), true));
            cin = cout;
        }
        add_linear("views.pose1", 7, cfg_.pose_hidden, rng);
        add_linear("views.pose2", cfg_.pose_hidden, d, rng);
        add_linear("views.proj", cin + d, d, rng);
        add_transformer("views.encoder", rng);
        add_linear("fuse.q", d, d, rng);
        add_linear("fuse.k", d, d, rng);
        add_linear("fuse.v", d, d, rng);
    }
    add_linear("decoder.fc1", d, cfg_.decoder_hidden, rng);
    add_linear("decoder.fc2", cfg_.decoder_hidden, cfg_.decoder_hidden, rng);
    add_linear("decoder.fc3", cfg_.decoder_hidden, cfg_.n_coarse * 3, rng);
    add_linear("score.mlp1", 3, d, rng);
    add_linear("score.mlp2", d, d, rng);
    add_linear("score.q", 2 * d, d, rng);
    add_linear("score.k", 2 * d, d, rng);
    add_linear("refine.mlp1", 3, d, rng);
    add_linear("refine.mlp2", d, d, rng);
    add_linear("refine.proj", 2 * d, 2 * d, rng);
    add_linear("refine.offset", 2 * d / cfg_.upsample_ratio, 3, rng, /*zero=*/true);
}

template <typename T>
Tensor<T> Model<T>::lin(const std::string& name, const Tensor<T>& x) const {
    return linear(x, p(name + ".w"), p(name + ".b"));
}

template <typename T>
Tensor<T> Model<T>::transformer(const std::string& name, Tensor<T> x) const {
    const auto d = cfg_.d_model, h = cfg_.heads, dh = d / h;
    const T inv = T(1.0 / std::sqrt(double(dh)));
    for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
        const auto pre = name + ".layer" + std::to_string(l);
        const auto n = layer_norm(x);
        const auto q = lin(pre + ".q", n), k = lin(pre + ".k", n), v = lin(pre + ".v", n);
        std::vector<Tensor<T>> heads;
        for (std::size_t i = 0; i < h; ++i) {
            const auto qi = slice_cols(q, i * dh, dh), ki = slice_cols(k, i * dh, dh), vi = slice_cols(v, i * dh, dh);
            heads.push_back(matmul(softmax(scale(matmul(qi, transpose(ki)), inv), 1), vi));
        }
        x = add(x, lin(pre + ".o", concat<T>(std::span<const Tensor<T>>(heads), 1)));
        x = add(x, lin(pre + ".ffn2", relu(lin(pre + ".ffn1", layer_norm(x)))));
    }
    return x;
}

template <typename T>
Tensor<T> Model<T>::patch_features(const ModelInput& in) const {
    const std::size_t P = in.local.size() / 3;
    const auto x0 = constant<T>({P, 3}, in.local);
    const auto edge = [&](const Tensor<T>& h, const std::string& name) {
        const auto c = gather_rows(h, std::span<const std::size_t>(in.edge_center));
        const auto nb = gather_rows(h, std::span<const std::size_t>(in.edge_neighbor));
        const auto e = relu(lin(name, concat({c, sub(nb, c)}, 1)));
        return segment_max(e, std::span<const std::size_t>(in.edge_starts));
    };
    const auto h1 = edge(x0, "partial.edge1");
    const auto h2 = edge(h1, "partial.edge2");
    return segment_max(h2, std::span<const std::size_t>(in.patch_starts));
}

template <typename T>
Tensor<T> Model<T>::encode_partial(const ModelInput& in, Tensor<T>* features) const {
    const auto f = patch_features(in);
    if (features) *features = f;
    std::vector<float> enc;
    for (const auto& s : in.seeds) {
        const auto e = sinusoidal_encoding(s, cfg_.pos_enc_dim);
        enc.insert(enc.end(), e.begin(), e.end());
    }
    const auto pe = constant<T>({in.seeds.size(), cfg_.pos_enc_dim}, enc);
    return transformer("partial.encoder", lin("partial.proj", concat({f, pe}, 1)));
}

template <typename T>
Tensor<T> Model<T>::pose_embedding(const CameraPose& pose) const {
    const auto feat = pose.features();
    const auto x = constant<T>({1, 7}, feat);
    return relu(lin("views.pose2", relu(lin("views.pose1", x))));
}

template <typename T>
Tensor<T> Model<T>::encode_views(const ModelInput& in) const {
    if (in.images.empty()) throw std::invalid_argument("encode_views: no views");
    std::vector<Tensor<T>> tokens;
    for (std::size_t v = 0; v < in.images.size(); ++v) {
        auto x = constant<T>({1, in.image_h, in.image_w}, in.images[v]);
        for (std::size_t s = 0; s < 4; ++s) {
            const auto pre = "views.conv" + std::to_string(s);
            x = relu(conv2d(x, p(pre + ".w"), p(pre + ".b"), 2, 1));
        }
        tokens.push_back(lin("views.proj", concat({global_avg_pool(x), pose_embedding(in.poses[v])}, 1)));
    }
    return transformer("views.encoder", concat<T>(std::span<const Tensor<T>>(tokens), 0));
}

template <typename T>
typename Model<T>::Fused Model<T>::fuse(const Tensor<T>& patch_tokens, const Tensor<T>& view_tokens) const {
    Fused out;
    Tensor<T> fused = patch_tokens;
    if (view_tokens.defined()) {
        if (view_tokens.dim(1) != patch_tokens.dim(1)) throw ShapeError("fuse: token widths differ");
        const auto q = lin("fuse.q", patch_tokens), k = lin("fuse.k", view_tokens), v = lin("fuse.v", view_tokens);
        out.attention = softmax(scale(matmul(q, transpose(k)), T(1.0 / std::sqrt(double(cfg_.d_model)))), 1);
        fused = add(patch_tokens, matmul(out.attention, v));
    }
    out.f_fusion = mean(fused, 0);
    const auto h = relu(lin("decoder.fc2", relu(lin("decoder.fc1", out.f_fusion))));
    out.coarse = reshape(lin("decoder.fc3", h), {cfg_.n_coarse, 3});
    return out;
}

template <typename T>
Tensor<T> Model<T>::confidence_logits(const Tensor<T>& coarse, const Tensor<T>& f_i) const {
    const auto n = coarse.dim(0);
    const auto h = relu(lin("score.mlp2", relu(lin("score.mlp1", coarse))));
    const auto com = concat({h, expand_rows(f_i, n)}, 1);
    const auto q = lin("score.q", com), k = lin("score.k", com);
    // (1/n) sum_j q_i . k_j = q_i . mean_j k_j
    return scale(matmul(q, transpose(mean(k, 0))), T(1.0 / std::sqrt(double(cfg_.d_model))));
}

template <typename T>
typename Model<T>::Consolidated Model<T>::consolidate(const Tensor<T>& filtered, const Tensor<T>& source,
                                                      const Tensor<T>& f_fusion) const {
    const auto merged = concat({filtered, source}, 0);
    if (merged.dim(0) < cfg_.n_in)
        throw ConfigError("consolidate: merged set has " + std::to_string(merged.dim(0)) + " points, need " +
                          std::to_string(cfg_.n_in));
    std::vector<Vec3> pts(merged.dim(0));
    for (std::size_t i = 0; i < pts.size(); ++i)
        pts[i] = {float(merged.at(i, 0)), float(merged.at(i, 1)), float(merged.at(i, 2))};
    Consolidated out;
    out.pick = farthest_point_sample(pts, cfg_.n_in, nearest_to_centroid(pts));
    out.p_de = gather_rows(merged, std::span<const std::size_t>(out.pick));
    const auto n = cfg_.n_in, R = cfg_.upsample_ratio, d2 = 2 * cfg_.d_model;
    const auto h = relu(lin("refine.mlp2", relu(lin("refine.mlp1", out.p_de))));
    const auto com = relu(lin("refine.proj", concat({h, expand_rows(f_fusion, n)}, 1)));
    out.offsets = lin("refine.offset", reshape(com, {R * n, d2 / R}));
    std::vector<std::size_t> parent(R * n);
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i / R;
    out.dense = add(gather_rows(out.p_de, std::span<const std::size_t>(parent)), out.offsets);
    return out;
}

template <typename T>
ForwardResult<T> Model<T>::forward(const ModelInput& in) const {
    ForwardResult<T> r;
    r.patch_tokens = encode_partial(in, &r.patch_features);
    r.f_p = mean(r.patch_tokens, 0);
    if (cfg_.use_views) {
        r.view_tokens = encode_views(in);
        r.f_i = mean(r.view_tokens, 0);
    } else {
        r.f_i = r.f_p;
    }
    auto fused = fuse(r.patch_tokens, r.view_tokens);
    r.attention = fused.attention;
    r.f_fusion = fused.f_fusion;
    r.coarse = fused.coarse;
    r.logits = confidence_logits(r.coarse, r.f_i);
    r.scores = sigmoid(r.logits);
    if (cfg_.use_filter) {
        const std::vector<double> s(r.logits.data().begin(), r.logits.data().end());
        r.kept = select_top(s, cfg_.keep_fraction);
    } else {
        r.kept.resize(cfg_.n_coarse);
        std::iota(r.kept.begin(), r.kept.end(), 0);
    }
    r.filtered = gather_rows(r.coarse, std::span<const std::size_t>(r.kept));
    const auto source = cfg_.merge_source == MergeSource::input ? points_tensor<T>(in.partial) : r.coarse;
    auto c = consolidate(r.filtered, source, r.f_fusion);
    r.merged_pick = std::move(c.pick);
    r.p_de = c.p_de;
    r.offsets = c.offsets;
    r.dense = c.dense;
    return r;
}

Model<float> load_model(const ModelConfig& cfg, const std::filesystem::path& checkpoint) {
    Model<float> m(cfg, 0);
    load_checkpoint_into(m.params(), checkpoint);
    return m;
}

template class Model<float>;
template class Model<double>;

}  // namespace pcd
