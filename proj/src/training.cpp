#include "pcd/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pcd/geometry.hpp"
#include "pcd/spatial_grid.hpp"

namespace pcd {

using json = nlohmann::json;

// ----------------------------------------------------------------- config

void TrainConfig::validate() const {
    const auto fail = [](const std::string& msg) { throw ConfigError("train: " + msg); };
    if (epochs == 0) fail("epochs must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) fail("lr_decay_factor must be in (0, 1]");
    if (lr_decay_every == 0) fail("lr_decay_every must be positive");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
    if (!(score_weight >= 0.0)) fail("score_weight must be >= 0");
    if (!(score_keep > 0.0 && score_keep < 1.0)) fail("score_keep must be in (0, 1)");
}

double TrainConfig::lr_at(std::size_t epoch) const {
    const std::size_t decays = epoch == 0 ? 0 : (epoch - 1) / lr_decay_every;
    return lr * std::pow(lr_decay_factor, double(decays));
}

TrainConfig train_preset(std::string_view name) {
    TrainConfig t;
    if (name == "desk") return t;
    if (name == "paper") {
        t.epochs = 300;
        t.batch_size = 24;
        t.lr_decay_every = 40;
        return t;
    }
    throw ConfigError("unknown training preset '" + std::string(name) + "' (expected desk or paper)");
}

// ----------------------------------------------------------------- losses

namespace {

template <typename T>
Tensor<T> points_const(std::span<const Vec3> pts) {
    std::vector<T> d;
    d.reserve(pts.size() * 3);
    for (const auto& p : pts) d.insert(d.end(), {T(p[0]), T(p[1]), T(p[2])});
    return Tensor<T>::from({pts.size(), 3}, std::move(d));
}

template <typename T>
std::vector<Vec3> as_points(const Tensor<T>& t) {
    if (t.rank() != 2 || t.dim(1) != 3) throw ShapeError("expected an [n x 3] point tensor");
    std::vector<Vec3> out(t.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {float(t.at(i, 0)), float(t.at(i, 1)), float(t.at(i, 2))};
    return out;
}

template <typename T>
Tensor<T> mean_sq_rows(const Tensor<T>& d) {
    return scale(sum(mul(d, d)), T(1.0 / double(d.dim(0))));
}

}  // namespace

std::vector<Vec3> tensor_points(const Tensor<float>& t) { return as_points(t); }

template <typename T>
Tensor<T> chamfer_l2_loss(const Tensor<T>& pred, std::span<const Vec3> target) {
    if (target.empty() || pred.numel() == 0) throw std::invalid_argument("chamfer_l2_loss: empty input");
    const auto pts = as_points(pred);
    const auto fwd = nearest_neighbors(pts, target);
    const auto bwd = nearest_neighbors(target, pts);
    std::vector<std::size_t> fi(fwd.size()), bi(bwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) fi[i] = fwd[i].index;
    for (std::size_t i = 0; i < bwd.size(); ++i) bi[i] = bwd[i].index;
    const auto tgt = points_const<T>(target);
    const auto d1 = sub(pred, gather_rows(tgt, std::span<const std::size_t>(fi)));
    const auto d2 = sub(gather_rows(pred, std::span<const std::size_t>(bi)), tgt);
    return add(mean_sq_rows(d1), mean_sq_rows(d2));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& p_c, const Tensor<T>& p_r, std::span<const Vec3> g, std::size_t n_coarse) {
    if (g.empty()) throw std::invalid_argument("total_loss: empty ground truth");
    const auto g_coarse = fps_points(g, std::min(n_coarse, g.size()));
    return add(acosh1p(chamfer_l2_loss(p_c, g_coarse)), acosh1p(chamfer_l2_loss(p_r, g)));
}

template Tensor<float> chamfer_l2_loss(const Tensor<float>&, std::span<const Vec3>);
template Tensor<double> chamfer_l2_loss(const Tensor<double>&, std::span<const Vec3>);
template Tensor<float> total_loss(const Tensor<float>&, const Tensor<float>&, std::span<const Vec3>, std::size_t);
template Tensor<double> total_loss(const Tensor<double>&, const Tensor<double>&, std::span<const Vec3>, std::size_t);

std::vector<double> score_targets(std::span<const Vec3> coarse, std::span<const Vec3> gt, double keep) {
    const auto nn = nearest_neighbors(coarse, gt);
    std::vector<double> neg(nn.size());
    for (std::size_t i = 0; i < nn.size(); ++i) neg[i] = -nn[i].dist2;
    std::vector<double> labels(coarse.size(), 0.0);
    for (auto i : select_top(neg, keep)) labels[i] = 1.0;
    return labels;
}

namespace {

// Loss on coarse points against a precomputed FPS of the ground truth.
Tensor<float> item_loss(const Tensor<float>& p_c, const Tensor<float>& p_r, const std::vector<Vec3>& gt_coarse,
                        const std::vector<Vec3>& gt) {
    return add(acosh1p(chamfer_l2_loss(p_c, gt_coarse)), acosh1p(chamfer_l2_loss(p_r, gt)));
}

}  // namespace

// -------------------------------------------------------------- optimiser

namespace {

ParamStore<float> zeros_like(const ParamStore<float>& params) {
    ParamStore<float> out(params.rng_seed());
    for (const auto& [path, t] : params) out.add(path, Tensor<float>::zeros(t.shape()));
    return out;
}

}  // namespace

Adam::Adam(const ParamStore<float>& params) : m_(zeros_like(params)), v_(zeros_like(params)) {}

void Adam::step(ParamStore<float>& params, double lr) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t_;
    const double c1 = 1.0 - std::pow(b1, double(t_)), c2 = 1.0 - std::pow(b2, double(t_));
    for (auto& [path, p] : params) {
        auto m = m_.get(path).mutable_data();
        auto v = v_.get(path).mutable_data();
        auto w = p.mutable_data();
        const auto g = p.grad();
        const bool has = p.has_grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = has ? double(g[i]) : 0.0;
            const double mi = b1 * double(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * double(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = float(mi);
            v[i] = float(vi);
            const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + eps);
            if (update != 0.0) w[i] = float(double(w[i]) - update);
        }
    }
}

void Adam::save(const std::filesystem::path& dir) const {
    save_checkpoint(m_, dir / "adam_m.ckpt");
    save_checkpoint(v_, dir / "adam_v.ckpt");
    std::ofstream(dir / "adam_steps.txt") << t_ << '\n';
}

void Adam::load(const std::filesystem::path& dir) {
    load_checkpoint_into(m_, dir / "adam_m.ckpt");
    load_checkpoint_into(v_, dir / "adam_v.ckpt");
    std::ifstream in(dir / "adam_steps.txt");
    if (!(in >> t_)) throw DataError("optimiser state: cannot read " + (dir / "adam_steps.txt").string());
}

double clip_gradients(ParamStore<float>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [path, p] : params)
        if (p.has_grad())
            for (float g : p.grad()) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [path, p] : params)
            if (p.has_grad())
                for (auto& g : p.mutable_grad()) g = float(double(g) * s);
    }
    return norm;
}

// --------------------------------------------------------------- training

std::vector<TrainItem> prepare_items(std::span<const Sample> samples, const ModelConfig& cfg) {
    std::vector<TrainItem> items(samples.size());
    std::vector<std::string> errors(samples.size());
    parallel_for(samples.size(), [&](std::size_t i) {
        const auto& s = samples[i];
        try {
            std::span<const DepthView> views;
            if (cfg.use_views) {
                if (s.views.size() < cfg.v_views)
                    throw DataError("sample " + s.id + " has " + std::to_string(s.views.size()) + " views, model needs " +
                                    std::to_string(cfg.v_views));
                views = std::span<const DepthView>(s.views).first(cfg.v_views);
            }
            if (s.partial.size() != cfg.n_in)
                throw DataError("sample " + s.id + " has " + std::to_string(s.partial.size()) +
                                " partial points, model expects " + std::to_string(cfg.n_in));
            auto& it = items[i];
            it.id = s.id;
            it.family = s.spec.family;
            it.input = prepare_input(s.partial.points, views, cfg);
            it.gt = s.gt.points;
            it.gt_coarse = fps_points(it.gt, std::min(cfg.n_coarse, it.gt.size()));
        } catch (const std::exception& e) {
            errors[i] = e.what();
        }
    });
    for (const auto& e : errors)
        if (!e.empty()) throw DataError(e);
    return items;
}

void write_loss_csv(const std::filesystem::path& file, std::span<const EpochStats> curve) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
    for (const auto& e : curve) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
}

namespace {

json stats_json(const EpochStats& e) {
    return {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
            {"val_cd_l1", e.val_cd_l1}, {"lr", e.lr}};
}

EpochStats stats_from(const json& j) {
    EpochStats e;
    e.epoch = j.at("epoch").get<std::size_t>();
    e.train_loss = j.at("train_loss").get<double>();
    e.val_loss = j.at("val_loss").get<double>();
    e.val_cd_l1 = j.at("val_cd_l1").get<double>();
    e.lr = j.at("lr").get<double>();
    return e;
}

void write_state(const std::filesystem::path& dir, const TrainResult& r) {
    json j;
    j["epoch"] = r.curve.empty() ? 0 : r.curve.back().epoch;
    j["best_epoch"] = r.best_epoch;
    j["best_val_cd_l1"] = r.best_val_cd_l1;
    j["curve"] = json::array();
    for (const auto& e : r.curve) j["curve"].push_back(stats_json(e));
    std::ofstream(dir / "state.json") << j.dump(2) << '\n';
}

void check_finite(double v, std::size_t epoch, std::size_t batch, const std::string& id) {
    if (!std::isfinite(v))
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                           ", sample " + id + " (op: total_loss)");
}

}  // namespace

TrainResult train(Model<float>& model, const TrainConfig& tc, std::span<const TrainItem> train_set,
                  std::span<const TrainItem> val_set, const TrainOptions& opt) {
    tc.validate();
    if (train_set.empty()) throw DataError("train: empty training set");
    const auto& cfg = model.config();
    auto& params = model.params();
    Adam adam(params);
    TrainResult result;
    std::size_t start = 1;

    if (!opt.run_dir.empty()) std::filesystem::create_directories(opt.run_dir);
    if (opt.resume) {
        if (opt.run_dir.empty()) throw ConfigError("train: resume needs a run directory");
        std::ifstream in(opt.run_dir / "state.json");
        if (!in) throw DataError("train: no state.json in " + opt.run_dir.string());
        const json j = json::parse(in, nullptr, false);
        if (j.is_discarded()) throw DataError("train: malformed state.json");
        load_checkpoint_into(params, opt.run_dir / "last.ckpt");
        adam.load(opt.run_dir);
        for (const auto& e : j.at("curve")) result.curve.push_back(stats_from(e));
        result.best_epoch = j.at("best_epoch").get<std::size_t>();
        result.best_val_cd_l1 = j.at("best_val_cd_l1").get<double>();
        start = j.at("epoch").get<std::size_t>() + 1;
    }

    const std::size_t n = train_set.size();
    for (std::size_t epoch = start; epoch <= tc.epochs; ++epoch) {
        const double lr = tc.lr_at(epoch);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(mix_seed(tc.seed, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t b = 0; b < n; b += tc.batch_size, ++batch_index) {
            const std::size_t end = std::min(n, b + tc.batch_size);
            const float inv = float(1.0 / double(end - b));
            params.zero_grad();
            for (std::size_t k = b; k < end; ++k) {
                const auto& item = train_set[order[k]];
                try {
                    const auto r = model.forward(item.input);
                    const auto loss = item_loss(r.coarse, r.dense, item.gt_coarse, item.gt);
                    check_finite(loss.item(), epoch, batch_index, item.id);
                    loss_sum += loss.item();
                    auto objective = scale(loss, inv);
                    if (tc.score_weight > 0.0) {
                        const auto coarse = r.coarse.detach();
                        const auto logits = model.confidence_logits(coarse, r.f_i.detach());
                        const auto labels = score_targets(as_points(coarse), item.gt, tc.score_keep);
                        const std::vector<float> target(labels.begin(), labels.end());
                        objective = add(objective, scale(bce_with_logits(logits, std::span<const float>(target)),
                                                         float(tc.score_weight) * inv));
                    }
                    backward(objective);
                } catch (const NumericError& e) {
                    throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                       ", sample " + item.id + ": " + e.what());
                }
            }
            clip_gradients(params, tc.grad_clip);
            adam.step(params, lr);
        }
        params.zero_grad();

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        st.train_loss = loss_sum / double(n);
        if (!val_set.empty()) {
            std::vector<double> losses(val_set.size()), cds(val_set.size());
            parallel_for(val_set.size(), [&](std::size_t i) {
                NoGradGuard guard;
                const auto& item = val_set[i];
                const auto r = model.forward(item.input);
                losses[i] = item_loss(r.coarse, r.dense, item.gt_coarse, item.gt).item();
                cds[i] = chamfer_l1(as_points(r.dense), item.gt);
            });
            for (std::size_t i = 0; i < val_set.size(); ++i) check_finite(losses[i], epoch, 0, val_set[i].id);
            st.val_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / double(losses.size());
            st.val_cd_l1 = std::accumulate(cds.begin(), cds.end(), 0.0) / double(cds.size());
        }
        result.curve.push_back(st);
        const bool improved = result.best_epoch == 0 || val_set.empty() || st.val_cd_l1 < result.best_val_cd_l1;
        if (improved) {
            result.best_epoch = epoch;
            result.best_val_cd_l1 = st.val_cd_l1;
        }
        if (opt.verbose) {
            std::printf("epoch %3zu  lr %.3g  train %.6f  val %.6f  val_cd_l1 %.6f%s\n", epoch, lr, st.train_loss,
                        st.val_loss, st.val_cd_l1, improved ? "  *" : "");
            std::fflush(stdout);
        }
        if (!opt.run_dir.empty()) {
            save_checkpoint(params, opt.run_dir / "last.ckpt");
            if (improved) save_checkpoint(params, opt.run_dir / "best.ckpt");
            adam.save(opt.run_dir);
            write_state(opt.run_dir, result);
            write_loss_csv(opt.run_dir / "loss.csv", result.curve);
        }
        if (opt.stop_after && epoch >= opt.stop_after) break;
    }
    return result;
}

// ------------------------------------------------------------- evaluation

namespace {

void accumulate_into(MetricMeans& m, const SampleMetrics& s) {
    ++m.count;
    m.cd_l1 += s.cd_l1;
    m.cd_l2 += s.cd_l2;
    m.hyper_cd += s.hyper_cd;
    m.dcd += s.dcd;
    m.f_score += s.f_score;
}

void finish(MetricMeans& m) {
    if (m.count == 0) return;
    const double c = double(m.count);
    m.cd_l1 /= c;
    m.cd_l2 /= c;
    m.hyper_cd /= c;
    m.dcd /= c;
    m.f_score /= c;
}

json means_json(const MetricMeans& m) {
    return {{"count", m.count}, {"cd_l1", m.cd_l1}, {"cd_l2", m.cd_l2}, {"hyper_cd", m.hyper_cd},
            {"dcd", m.dcd}, {"f_score", m.f_score}};
}

}  // namespace

void MetricReport::aggregate() {
    overall = {};
    per_family.clear();
    for (const auto& s : samples) {
        accumulate_into(overall, s);
        accumulate_into(per_family[s.family], s);
    }
    finish(overall);
    for (auto& [name, m] : per_family) finish(m);
}

std::string MetricReport::to_text() const {
    std::ostringstream out;
    const auto row = [&](const std::string& a, const std::string& b, double l1, double l2, double h, double d, double f) {
        out << std::left << std::setw(16) << a << std::setw(20) << b << std::right << std::fixed << std::setprecision(4)
            << std::setw(12) << l1 * 1e3 << std::setw(12) << l2 * 1e3 << std::setw(10) << h << std::setw(10) << d
            << std::setw(10) << f << '\n';
    };
    out << std::left << std::setw(16) << "id" << std::setw(20) << "family" << std::right << std::setw(12)
        << "CD-l1x1e3" << std::setw(12) << "CD-l2x1e3" << std::setw(10) << "HyperCD" << std::setw(10) << "DCD"
        << std::setw(10) << "F@1%" << '\n';
    for (const auto& s : samples) row(s.id, s.family, s.cd_l1, s.cd_l2, s.hyper_cd, s.dcd, s.f_score);
    out << '\n';
    for (const auto& [name, m] : per_family)
        row("mean", name + " (" + std::to_string(m.count) + ")", m.cd_l1, m.cd_l2, m.hyper_cd, m.dcd, m.f_score);
    row("mean", "all (" + std::to_string(overall.count) + ")", overall.cd_l1, overall.cd_l2, overall.hyper_cd,
        overall.dcd, overall.f_score);
    return out.str();
}

std::string MetricReport::to_json() const {
    json j;
    j["samples"] = json::array();
    for (const auto& s : samples)
        j["samples"].push_back({{"id", s.id}, {"family", s.family}, {"cd_l1", s.cd_l1}, {"cd_l2", s.cd_l2},
                                {"hyper_cd", s.hyper_cd}, {"dcd", s.dcd}, {"f_score", s.f_score}});
    j["overall"] = means_json(overall);
    j["per_family"] = json::object();
    for (const auto& [name, m] : per_family) j["per_family"][name] = means_json(m);
    return j.dump(2);
}

SampleMetrics score_prediction(std::string id, std::string family, std::span<const Vec3> pred,
                               std::span<const Vec3> gt, double tau) {
    SampleMetrics m;
    m.id = std::move(id);
    m.family = std::move(family);
    m.cd_l1 = chamfer_l1(pred, gt);
    m.cd_l2 = chamfer_l2(pred, gt);
    m.hyper_cd = hyper_cd(pred, gt);
    m.dcd = density_aware_cd(pred, gt);
    m.f_score = f_score(pred, gt, tau).f;
    return m;
}

MetricReport evaluate(const Model<float>& model, std::span<const TrainItem> items, double tau) {
    MetricReport report;
    report.samples.resize(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        NoGradGuard guard;
        const auto& it = items[i];
        const auto r = model.forward(it.input);
        report.samples[i] =
            score_prediction(it.id, std::string(family_name(it.family)), as_points(r.dense), it.gt, tau);
    });
    report.aggregate();
    return report;
}

MetricReport evaluate_predictions(std::span<const TrainItem> items, std::span<const std::vector<Vec3>> preds,
                                  double tau) {
    if (items.size() != preds.size()) throw std::invalid_argument("evaluate_predictions: size mismatch");
    MetricReport report;
    report.samples.resize(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        report.samples[i] =
            score_prediction(items[i].id, std::string(family_name(items[i].family)), preds[i], items[i].gt, tau);
    });
    report.aggregate();
    return report;
}

std::vector<Vec3> nonlearned_completion(const Sample& s, std::size_t n_out) {
    std::vector<Vec3> pts = s.partial.points;
    for (std::size_t v = 0; v < s.views.size(); ++v) {
        if (s.views[v].foreground_count() == 0) continue;
        const auto back = back_project(s.views[v], s.partial.size(), mix_seed(v, 0x51));
        pts.insert(pts.end(), back.points.begin(), back.points.end());
    }
    if (pts.size() <= n_out) return pts;
    return fps_points(pts, n_out);
}

}  // namespace pcd
