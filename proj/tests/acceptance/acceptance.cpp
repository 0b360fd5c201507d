// Acceptance suite: one PASS/FAIL line per criterion.
//
//   pcd_acceptance            all nine criteria (the trained ones take about
//                             70 min on one core)
//   pcd_acceptance --quick    criteria 1, 2, 3, 8 and 9; the trained
//                             experiments 4-7 are reported as SKIP
//
// Exit status is 0 only if every criterion that ran passed.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bruteforce.hpp"
#include "gradcheck.hpp"
#include "pcd/cli.hpp"
#include "pcd/geometry.hpp"

namespace fs = std::filesystem;
using namespace pcd;
using namespace pcd::cli;
using pcd::testing::check_gradients;
using pcd::testing::random_tensor;
using Td = Tensor<double>;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Experiment {
    fs::path work;
    std::size_t train = 64, val = 8, test = 16, epochs = 60;
    double lr = 1e-3;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ------------------------------------------------------------ criterion 1

bool close_rel(double got, double want, double tol) {
    if (got == want) return true;
    return std::abs(got - want) <= tol * std::abs(want);
}

Outcome metric_oracles() {
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<std::size_t> size(1, 64);
    std::uniform_real_distribution<float> scale(0.002f, 0.2f);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    const double tol = 1e-6;
    std::size_t bad = 0;
    double worst = 0.0;
    const auto start = std::chrono::steady_clock::now();
    for (int t = 0; t < 500; ++t) {
        const auto x = testing::random_cloud(size(rng), rng);
        std::vector<Vec3> y;
        if (t % 2 == 0) {
            y = testing::random_cloud(size(rng), rng);
        } else {
            // Jittered subset/superset of x so that F-Score and DCD see close matches.
            const float s = scale(rng) * 0.1f;
            const std::size_t n = size(rng);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& p = x[i % x.size()];
                y.push_back({p[0] + s * noise(rng), p[1] + s * noise(rng), p[2] + s * noise(rng)});
            }
        }
        const double pairs[][2] = {
            {chamfer_l1(x, y), testing::brute_chamfer_l1(x, y)},
            {chamfer_l2(x, y), testing::brute_chamfer_l2(x, y)},
            {density_aware_cd(x, y), testing::brute_dcd(x, y, 1000.0)},
            {f_score(x, y).f, testing::brute_fscore(x, y, 0.01)},
        };
        for (const auto& p : pairs) {
            if (!close_rel(p[0], p[1], tol)) ++bad;
            if (p[1] != 0.0) worst = std::max(worst, std::abs(p[0] - p[1]) / std::abs(p[1]));
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {bad == 0 && secs < 10.0, "500 pairs x 4 metrics, " + std::to_string(bad) + " mismatches, worst rel " +
                                         fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s (limit 10 s)"};
}

// ------------------------------------------------------------ criterion 2

Outcome gradient_integrity() {
    using Make = std::function<std::vector<Td>(std::mt19937_64&)>;
    using Op = std::function<Td(const std::vector<Td>&)>;
    const auto one = [](Shape s, double lo = -1.0, double hi = 1.0) -> Make {
        return [s, lo, hi](std::mt19937_64& rng) { return std::vector<Td>{random_tensor(s, rng, lo, hi)}; };
    };
    const auto many = [](std::vector<Shape> shapes) -> Make {
        return [shapes](std::mt19937_64& rng) {
            std::vector<Td> v;
            for (const auto& s : shapes) v.push_back(random_tensor(s, rng));
            return v;
        };
    };
    static const std::vector<double> targets{1, 0, 1, 1, 0, 0, 1};
    const std::vector<std::tuple<const char*, Make, Op>> ops{
        {"add", many({{3, 4}, {3, 4}}), [](const auto& in) { return add(in[0], in[1]); }},
        {"sub", many({{3, 4}, {3, 4}}), [](const auto& in) { return sub(in[0], in[1]); }},
        {"mul", many({{3, 4}, {3, 4}}), [](const auto& in) { return mul(in[0], in[1]); }},
        {"add_scalar", one({5}), [](const auto& in) { return add_scalar(in[0], 0.7); }},
        {"scale", one({5}), [](const auto& in) { return scale(in[0], -1.3); }},
        {"relu", one({4, 4}), [](const auto& in) { return relu(in[0]); }},
        {"sigmoid", one({4, 4}, -4, 4), [](const auto& in) { return sigmoid(in[0]); }},
        {"acosh1p", one({6}, 0.05, 3), [](const auto& in) { return acosh1p(in[0]); }},
        {"sum", one({3, 5}), [](const auto& in) { return sum(in[0]); }},
        {"mean", one({3, 5}), [](const auto& in) { return mean(in[0]); }},
        {"sum_axis0", one({3, 5}), [](const auto& in) { return sum(in[0], 0); }},
        {"sum_axis1", one({3, 5}), [](const auto& in) { return sum(in[0], 1); }},
        {"mean_axis0", one({3, 5}), [](const auto& in) { return mean(in[0], 0); }},
        {"mean_axis1", one({3, 5}), [](const auto& in) { return mean(in[0], 1); }},
        {"segment_max", one({7, 3}),
         [](const auto& in) { return segment_max(in[0], std::vector<std::size_t>{0, 2, 3}); }},
        {"matmul", many({{3, 4}, {4, 2}}), [](const auto& in) { return matmul(in[0], in[1]); }},
        {"transpose", one({3, 5}), [](const auto& in) { return transpose(in[0]); }},
        {"reshape", one({3, 4}), [](const auto& in) { return reshape(in[0], {6, 2}); }},
        {"concat_rows", many({{2, 3}, {4, 3}}), [](const auto& in) { return concat({in[0], in[1]}, 0); }},
        {"concat_cols", many({{3, 2}, {3, 4}}), [](const auto& in) { return concat({in[0], in[1]}, 1); }},
        {"slice_cols", one({3, 6}), [](const auto& in) { return slice_cols(in[0], 2, 3); }},
        {"expand_rows", one({1, 4}), [](const auto& in) { return expand_rows(in[0], 5); }},
        {"gather_rows", one({5, 3}),
         [](const auto& in) { return gather_rows(in[0], std::vector<std::size_t>{4, 0, 0, 2, 4, 1}); }},
        {"softmax_axis0", one({3, 5}, -3, 3), [](const auto& in) { return softmax(in[0], 0); }},
        {"softmax_axis1", one({3, 5}, -3, 3), [](const auto& in) { return softmax(in[0], 1); }},
        {"layer_norm", one({3, 6}, -2, 2), [](const auto& in) { return layer_norm(in[0]); }},
        {"bce_with_logits", one({7}, -3, 3),
         [](const auto& in) { return bce_with_logits(in[0], std::span<const double>(targets)); }},
        {"conv2d_stride2", many({{2, 6, 6}, {3, 2, 3, 3}, {3}}),
         [](const auto& in) { return conv2d(in[0], in[1], in[2], 2, 1); }},
        {"conv2d_stride1", many({{1, 5, 4}, {2, 1, 3, 3}, {2}}),
         [](const auto& in) { return conv2d(in[0], in[1], in[2], 1, 0); }},
        {"avg_pool2d", one({2, 4, 6}), [](const auto& in) { return avg_pool2d(in[0], 2); }},
        {"global_avg_pool", one({3, 4, 4}), [](const auto& in) { return global_avg_pool(in[0]); }},
        {"linear", many({{3, 4}, {4, 2}, {1, 2}}), [](const auto& in) { return linear(in[0], in[1], in[2]); }},
    };
    const auto start = std::chrono::steady_clock::now();
    double worst_op = 0.0;
    std::string worst_name = "-";
    for (const auto& [name, make, op] : ops) {
        std::mt19937_64 rng(std::hash<std::string>{}(name));
        for (int t = 0; t < 20; ++t) {
            const auto r = check_gradients(make(rng), op, rng());
            if (r.max_rel_error > worst_op) {
                worst_op = r.max_rel_error;
                worst_name = name;
            }
        }
    }

    // End-to-end: tiny network (N=64, K=8, V=2), double precision.
    const auto cfg = model_preset("tiny");
    Model<double> model(cfg, 25);
    std::mt19937_64 rng(26);
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (auto& v : model.params().get("refine.offset.w").mutable_data()) v = u(rng);  // zero at init
    const auto gt = synth_shape({ShapeFamily::chair_like, 3, {}}, 4096).points;
    const auto partial = make_partial(gt, cfg.n_in, 32, 3).cloud.points;
    const auto views = dream_views(gt, canonical_rig(cfg.v_views), {}, 3, 32);
    const auto in = prepare_input(partial, views, cfg);
    std::vector<std::string> paths;
    std::vector<Td> values;
    for (const auto& [path, t] : model.params()) {
        paths.push_back(path);
        values.push_back(t.detach());
    }
    const auto f = [&](const std::vector<Td>& leaves) {
        for (std::size_t i = 0; i < paths.size(); ++i) model.params().get(paths[i]) = leaves[i];
        const auto r = model.forward(in);
        return concat({reshape(r.coarse, {cfg.n_coarse * 3, 1}), r.logits,
                       reshape(r.dense, {cfg.output_points() * 3, 1})},
                      0);
    };
    const auto e2e = check_gradients(values, f, 27, 1e-6, 3, 1e-5);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool pass = worst_op < 1e-3 && e2e.max_rel_error < 2e-3 && secs < 120.0;
    return {pass, std::to_string(ops.size()) + " ops worst rel " + fmt("%.2e", worst_op) + " (" + worst_name +
                      ", tol 1e-3); end-to-end tiny worst rel " + fmt("%.2e", e2e.max_rel_error) + " over " +
                      std::to_string(e2e.checked) + " entries (tol 2e-3); " + fmt("%.1f", secs) + " s (limit 120 s)"};
}

// ------------------------------------------------------------ criterion 3

Outcome hyper_cd_forms() {
    std::mt19937_64 rng(303);
    std::uniform_int_distribution<std::size_t> size(1, 64);
    std::size_t bad = 0, nonzero_identity = 0;
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto x = testing::random_cloud(size(rng), rng);
        const auto y = testing::random_cloud(size(rng), rng);
        const double want = std::acosh(1.0 + testing::brute_chamfer_l2(x, y));
        const double got = hyper_cd(x, y);
        worst = std::max(worst, std::abs(got - want) / std::abs(want));
        if (!close_rel(got, want, 1e-6)) ++bad;
        if (hyper_cd(x, x) != 0.0) ++nonzero_identity;
    }
    return {bad == 0 && nonzero_identity == 0, "100 pairs, worst rel " + fmt("%.2e", worst) + " (tol 1e-6); " +
                                                   std::to_string(nonzero_identity) + " identity pairs non-zero"};
}

// ------------------------------------------------------------ trained experiments

RunConfig experiment_config(const Experiment& e, const std::string& profile) {
    Settings s{{"model.preset", "small"},
               {"train.preset", "desk"},
               {"data.profile", profile},
               {"train.epochs", std::to_string(e.epochs)},
               {"train.lr", fmt("%.17g", e.lr)},
               {"train.lr_decay_every", std::to_string(std::max<std::size_t>(1, e.epochs / 2))},
               {"data.train", std::to_string(e.train)},
               {"data.val", std::to_string(e.val)},
               {"data.test", std::to_string(e.test)}};
    return resolve(s);
}

class Lab {
  public:
    explicit Lab(Experiment e) : e_(std::move(e)) {}

    const Experiment& experiment() const { return e_; }

    fs::path data(const std::string& profile) {
        const auto dir = e_.work / ("data_" + profile);
        const auto cfg = experiment_config(e_, profile);
        if (slurp(dir / "config.ini") != to_ini(cfg)) {
            std::ostringstream log;
            cmd_synth(cfg, dir, true, log);
        }
        return dir;
    }

    /// Trained run directory; reused when it finished with the same configuration.
    fs::path run(const std::string& profile, std::uint64_t seed, bool views) {
        const auto tag = profile + "_s" + std::to_string(seed) + (views ? "" : "_noviews");
        const auto dir = e_.work / ("run_" + tag);
        const auto cfg = run_config(profile, seed, views);
        if (!fs::exists(dir / "best.ckpt") || slurp(dir / "config.ini") != to_ini(cfg)) {
            fs::remove_all(dir);
            std::cout << "  training " << tag << " ..." << std::flush;
            const auto t0 = std::chrono::steady_clock::now();
            std::ostringstream log;
            cmd_train(cfg, {data(profile), dir, std::nullopt, false}, log);
            std::cout << fmt(" %.0f s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count())
                      << std::endl;
        }
        return dir;
    }

    RunConfig run_config(const std::string& profile, std::uint64_t seed, bool views) const {
        auto cfg = experiment_config(e_, profile);
        cfg.train.seed = seed;
        cfg.model.use_views = views;
        return cfg;
    }

    double eval_cd(const std::string& profile, std::uint64_t seed, bool views, bool filter,
                   const std::string& test_profile) {
        auto cfg = run_config(profile, seed, views);
        cfg.model.use_filter = filter;
        const auto dir = run(profile, seed, views);
        return cmd_eval(cfg, dir / "best.ckpt", data(test_profile) / "test", {}).overall.cd_l1;
    }

    double reference_cd(const std::string& profile, Predictor p) {
        return cmd_eval(experiment_config(e_, profile), {}, data(profile) / "test", {}, p).overall.cd_l1;
    }

  private:
    Experiment e_;
};

std::string cd3(double v) { return fmt("%.4f", v * 1e3); }

Outcome filtering_efficacy(Lab& lab) {
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    std::string detail = "severe, CD-l1x1e3 keep=0.75 vs no filter:";
    for (std::uint64_t seed : {1, 2, 3}) {
        const double on = lab.eval_cd("severe", seed, true, true, "severe");
        const double off = lab.eval_cd("severe", seed, true, false, "severe");
        pass = pass && on < off;
        detail += " s" + std::to_string(seed) + " " + cd3(on) + " vs " + cd3(off) + (on < off ? "" : " (X)") + ";";
    }
    const double mins = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    pass = pass && mins < 30.0;
    return {pass, detail + " " + fmt("%.1f", mins) + " min (limit 30 min)"};
}

Outcome fusion_ablation(Lab& lab) {
    bool pass = true;
    std::string detail = "clean, CD-l1x1e3 with views vs view-less:";
    for (std::uint64_t seed : {1, 2, 3}) {
        const double with = lab.eval_cd("clean", seed, true, true, "clean");
        const double without = lab.eval_cd("clean", seed, false, true, "clean");
        pass = pass && with < without;
        detail += " s" + std::to_string(seed) + " " + cd3(with) + " vs " + cd3(without) + (with < without ? "" : " (X)") +
                  ";";
    }
    return {pass, detail};
}

Outcome baseline_dominance(Lab& lab) {
    const double model_clean = lab.eval_cd("clean", 1, true, true, "clean");
    const double nonlearned = lab.reference_cd("clean", Predictor::nonlearned);
    bool pass = model_clean < nonlearned;
    std::string detail = "clean: model " + cd3(model_clean) + " vs non-learned " + cd3(nonlearned) +
                         (model_clean < nonlearned ? "" : " (X)") + "; vs passthrough:";
    for (const char* profile : {"clean", "mild", "severe"}) {
        const double m = lab.eval_cd(profile, 1, true, true, profile);
        const double p = lab.reference_cd(profile, Predictor::passthrough);
        pass = pass && m < p;
        detail += std::string(" ") + profile + " " + cd3(m) + " vs " + cd3(p) + (m < p ? "" : " (X)") + ";";
    }
    return {pass, detail + " (CD-l1x1e3)"};
}

Outcome view_sweep(Lab& lab) {
    const auto& e = lab.experiment();
    const auto out = e.work / "ablate_views";
    std::ostringstream log;
    const auto table = cmd_ablate(experiment_config(e, "clean"), "views", lab.data("clean"), out, std::nullopt, log);
    std::cout << table.to_text();
    bool pass = table.rows.size() == kViewSweep.size() && fs::exists(out / "ablate_views.txt");
    for (std::size_t i = 0; pass && i < table.rows.size(); ++i)
        pass = table.rows[i].value == double(kViewSweep[i]) && std::isfinite(table.rows[i].metrics.cd_l1);
    return {pass, "table for V = 2, 4, 6, 8 emitted; monotone 2->6: " +
                      std::string(table.improves_through_six() ? "yes" : "no") + " (reported, not asserted)"};
}

// ------------------------------------------------------------ criterion 8

Outcome determinism(const fs::path& work) {
    const auto root = work / "determinism";
    fs::remove_all(root);
    auto cfg = resolve(Settings{{"model.preset", "tiny"},
                                {"train.epochs", "6"},
                                {"train.batch_size", "2"},
                                {"train.lr", "0.001"},
                                {"train.lr_decay_every", "2"},
                                {"data.train", "6"},
                                {"data.val", "2"},
                                {"data.test", "2"},
                                {"data.n_partial", "64"},
                                {"data.n_gt", "1024"},
                                {"data.width", "32"},
                                {"data.views", "2"},
                                {"data.profile", "mild"}});
    std::ostringstream log;
    cmd_synth(cfg, root / "data", false, log);
    const auto a = cmd_train(cfg, {root / "data", root / "a", std::nullopt, false}, log);
    const auto b = cmd_train(cfg, {root / "data", root / "b", std::nullopt, false}, log);

    auto half = cfg;
    half.train.epochs = 3;
    cmd_train(half, {root / "data", root / "c", std::nullopt, false}, log);
    const auto c = cmd_train(cfg, {root / "data", root / "c", root / "c" / "last.ckpt", false}, log);

    const auto same_curve = [](const TrainResult& x, const TrainResult& y) {
        if (x.curve.size() != y.curve.size() || x.best_epoch != y.best_epoch) return false;
        for (std::size_t i = 0; i < x.curve.size(); ++i)
            if (x.curve[i].train_loss != y.curve[i].train_loss || x.curve[i].val_loss != y.curve[i].val_loss ||
                x.curve[i].val_cd_l1 != y.curve[i].val_cd_l1)
                return false;
        return true;
    };
    const bool curves = same_curve(a, b) && slurp(root / "a" / "loss.csv") == slurp(root / "b" / "loss.csv");
    const bool resume = same_curve(a, c) && slurp(root / "a" / "last.ckpt") == slurp(root / "c" / "last.ckpt") &&
                        slurp(root / "a" / "best.ckpt") == slurp(root / "c" / "best.ckpt");

    bool inference = true;
    const auto sample = root / "data" / "test" / "sample_00000";
    cmd_infer(cfg, root / "a" / "best.ckpt", sample, root / "infer_a");
    cmd_infer(cfg, root / "b" / "best.ckpt", sample, root / "infer_b");
    for (const char* f : {"coarse.xyzb", "filtered.xyzb", "dense.xyzb", "confidence.csv"})
        inference = inference && slurp(root / "infer_a" / f) == slurp(root / "infer_b" / f) &&
                    !slurp(root / "infer_a" / f).empty();
    return {curves && resume && inference,
            std::string("loss curves ") + (curves ? "bit-identical" : "DIFFER") + "; inference outputs " +
                (inference ? "byte-identical" : "DIFFER") + "; resume 3+3 vs 6 epochs " +
                (resume ? "bit-identical" : "DIFFERS")};
}

// ------------------------------------------------------------ criterion 9

Outcome cardinalities() {
    const auto cfg = model_preset("small");
    const Model<float> model(cfg, 1);
    DatasetOptions opt;  // default splits: 20 test samples, 2048-point partials, 6 views
    const std::size_t want_kept = std::size_t(std::ceil(0.75 * double(cfg.n_coarse)));
    std::size_t bad = 0;
    NoGradGuard guard;
    for (std::size_t i = 0; i < opt.test; ++i) {
        const auto s = make_dataset_sample(opt, "test", i);
        const auto r = model.forward(prepare_input(s.partial.points, s.views, cfg));
        const bool ok = s.partial.points.size() == 2048 && r.dense.dim(0) == cfg.upsample_ratio * 2048 &&
                        r.filtered.dim(0) == want_kept && r.coarse.dim(0) == cfg.n_coarse;
        bad += !ok;
    }
    return {bad == 0, std::to_string(opt.test) + " test samples: |partial| = 2048, |P_r| = " +
                          std::to_string(cfg.upsample_ratio * 2048) + " (R = " + std::to_string(cfg.upsample_ratio) +
                          "), |P_f| = " + std::to_string(want_kept) + " of " + std::to_string(cfg.n_coarse) + "; " +
                          std::to_string(bad) + " violations"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pcd acceptance suite"};
    bool quick = false;
    Experiment e;
    e.work = fs::temp_directory_path() / "pcd_acceptance";
    std::string work = e.work.string();
    app.add_flag("--quick", quick, "Skip the trained experiments (criteria 4-7)");
    app.add_option("--work", work, "Scratch directory for datasets and runs");
    app.add_option("--train", e.train, "Training samples per experiment dataset");
    app.add_option("--epochs", e.epochs, "Epochs per training run");
    app.add_option("--lr", e.lr, "Initial learning rate for the trained experiments");
    CLI11_PARSE(app, argc, argv);
    e.work = work;
    fs::create_directories(e.work);

    Lab lab(e);
    int failures = 0;
    const auto report = [&](int n, const char* name, bool trained, const std::function<Outcome()>& fn) {
        if (quick && trained) {
            std::cout << "criterion " << n << " " << name << ": SKIP (trained experiment; run without --quick)"
                      << std::endl;
            return;
        }
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("error: ") + ex.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << "criterion " << n << " " << name << ": " << (o.pass ? "PASS" : "FAIL") << " -- " << o.detail
                  << fmt(" [%.1f s]", secs) << std::endl;
    };

    report(1, "metric oracle equivalence", false, metric_oracles);
    report(2, "gradient integrity", false, gradient_integrity);
    report(3, "HyperCD closed forms", false, hyper_cd_forms);
    report(4, "filtering efficacy", true, [&] { return filtering_efficacy(lab); });
    report(5, "fusion ablation", true, [&] { return fusion_ablation(lab); });
    report(6, "baseline dominance", true, [&] { return baseline_dominance(lab); });
    report(7, "view-count sweep", true, [&] { return view_sweep(lab); });
    report(8, "determinism", false, [&] { return determinism(e.work); });
    report(9, "cardinality contracts", false, cardinalities);
    return failures == 0 ? 0 : 1;
}
