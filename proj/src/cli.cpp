#include "pcd/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "pcd/geometry.hpp"

namespace pcd::cli {

using json = nlohmann::json;

// ----------------------------------------------------------------- config

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
    std::ostringstream o;
    o << std::setprecision(17) << v;
    return o.str();
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("config: " + key + " = '" + v + "' is not a valid number");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: " + key + " = '" + v + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');)
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

template <typename T>
std::string join(const std::vector<T>& xs, const std::function<std::string(const T&)>& f) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
    return out;
}

struct Field {
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define PCD_SIZE(member)                                                                                  \
    Field {                                                                                               \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<std::size_t>(k, v); }, \
            [](const RunConfig& c) { return std::to_string(c.member); }                                   \
    }
#define PCD_DOUBLE(member)                                                                             \
    Field {                                                                                            \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<double>(k, v); }, \
            [](const RunConfig& c) { return fmt_double(c.member); }                                    \
    }
#define PCD_BOOL(member)                                                                       \
    Field {                                                                                    \
        [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }, \
            [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }        \
    }

const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> f = {
        {"model.n_in", PCD_SIZE(model.n_in)},
        {"model.k_patches", PCD_SIZE(model.k_patches)},
        {"model.radius", PCD_DOUBLE(model.radius)},
        {"model.patch_max_points", PCD_SIZE(model.patch_max_points)},
        {"model.edge_k", PCD_SIZE(model.edge_k)},
        {"model.edge_width", PCD_SIZE(model.edge_width)},
        {"model.pos_enc_dim", PCD_SIZE(model.pos_enc_dim)},
        {"model.d_model", PCD_SIZE(model.d_model)},
        {"model.heads", PCD_SIZE(model.heads)},
        {"model.encoder_layers", PCD_SIZE(model.encoder_layers)},
        {"model.ffn_mult", PCD_SIZE(model.ffn_mult)},
        {"model.v_views", PCD_SIZE(model.v_views)},
        {"model.image_pool", PCD_SIZE(model.image_pool)},
        {"model.conv_channels",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.model.conv_channels.clear();
              for (const auto& x : split_list(v)) c.model.conv_channels.push_back(parse_number<std::size_t>(k, x));
          },
          [](const RunConfig& c) {
              return join<std::size_t>(c.model.conv_channels, [](const std::size_t& x) { return std::to_string(x); });
          }}},
        {"model.pose_hidden", PCD_SIZE(model.pose_hidden)},
        {"model.n_coarse", PCD_SIZE(model.n_coarse)},
        {"model.decoder_hidden", PCD_SIZE(model.decoder_hidden)},
        {"model.keep_fraction", PCD_DOUBLE(model.keep_fraction)},
        {"model.upsample_ratio", PCD_SIZE(model.upsample_ratio)},
        {"model.merge_source",
         {[](RunConfig& c, const std::string&, const std::string& v) { c.model.merge_source = parse_merge_source(v); },
          [](const RunConfig& c) { return std::string(merge_source_name(c.model.merge_source)); }}},
        {"model.use_views", PCD_BOOL(model.use_views)},
        {"model.use_filter", PCD_BOOL(model.use_filter)},
        {"train.epochs", PCD_SIZE(train.epochs)},
        {"train.batch_size", PCD_SIZE(train.batch_size)},
        {"train.lr", PCD_DOUBLE(train.lr)},
        {"train.lr_decay_factor", PCD_DOUBLE(train.lr_decay_factor)},
        {"train.lr_decay_every", PCD_SIZE(train.lr_decay_every)},
        {"train.seed",
         {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.seed = parse_number<std::uint64_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.train.seed); }}},
        {"train.grad_clip", PCD_DOUBLE(train.grad_clip)},
        {"train.score_weight", PCD_DOUBLE(train.score_weight)},
        {"train.score_keep", PCD_DOUBLE(train.score_keep)},
        {"data.train", PCD_SIZE(data.train)},
        {"data.val", PCD_SIZE(data.val)},
        {"data.test", PCD_SIZE(data.test)},
        {"data.seed",
         {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.seed = parse_number<std::uint64_t>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.seed); }}},
        {"data.families",
         {[](RunConfig& c, const std::string&, const std::string& v) {
              c.data.families.clear();
              for (const auto& x : split_list(v)) c.data.families.push_back(parse_family(x));
          },
          [](const RunConfig& c) {
              return join<ShapeFamily>(c.data.families, [](const ShapeFamily& f) { return std::string(family_name(f)); });
          }}},
        {"data.n_partial", PCD_SIZE(data.sample.n_partial)},
        {"data.n_gt", PCD_SIZE(data.sample.n_gt)},
        {"data.width",
         {[](RunConfig& c, const std::string& k, const std::string& v) { c.data.sample.width = parse_number<int>(k, v); },
          [](const RunConfig& c) { return std::to_string(c.data.sample.width); }}},
        {"data.views", PCD_SIZE(data.sample.views)},
        {"data.elevation", PCD_DOUBLE(data.sample.elevation)},
        {"data.azimuths",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.data.sample.azimuths.clear();
              for (const auto& x : split_list(v)) c.data.sample.azimuths.push_back(parse_number<double>(k, x));
          },
          [](const RunConfig& c) { return join<double>(c.data.sample.azimuths, fmt_double); }}},
        {"data.depth_noise_sigma", PCD_DOUBLE(data.sample.profile.depth_noise_sigma)},
        {"data.per_view_scale_jitter", PCD_DOUBLE(data.sample.profile.per_view_scale_jitter)},
        {"data.silhouette_erosion",
         {[](RunConfig& c, const std::string& k, const std::string& v) {
              c.data.sample.profile.silhouette_erosion = parse_number<int>(k, v);
          },
          [](const RunConfig& c) { return std::to_string(c.data.sample.profile.silhouette_erosion); }}},
        {"data.dropout_patch_rate", PCD_DOUBLE(data.sample.profile.dropout_patch_rate)},
        {"data.outlier_rate", PCD_DOUBLE(data.sample.profile.outlier_rate)},
    };
    return f;
}

#undef PCD_SIZE
#undef PCD_DOUBLE
#undef PCD_BOOL

const char* const kPresetKeys[] = {"model.preset", "train.preset", "data.profile"};

}  // namespace

Settings parse_ini(std::string_view text) {
    Settings out;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        const auto line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
            section = trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        const auto key = trim(std::string_view(line).substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": key outside a section");
        out[section + "." + key] = trim(std::string_view(line).substr(eq + 1));
    }
    return out;
}

Settings read_ini(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_ini(ss.str());
}

RunConfig resolve(const Settings& settings) {
    RunConfig c;
    if (auto it = settings.find("model.preset"); it != settings.end()) {
        c.model = model_preset(it->second);
        c.model_preset = it->second;
    }
    if (auto it = settings.find("train.preset"); it != settings.end()) {
        c.train = train_preset(it->second);
        c.train_preset = it->second;
    }
    if (auto it = settings.find("data.profile"); it != settings.end()) {
        c.data.sample.profile = profile_preset(it->second);
        c.profile_name = it->second;
    }
    const auto& table = fields();
    for (const auto& [key, value] : settings) {
        if (std::find(std::begin(kPresetKeys), std::end(kPresetKeys), key) != std::end(kPresetKeys)) continue;
        const auto f = table.find(key);
        if (f == table.end()) throw ConfigError("config: unknown key '" + key + "'");
        f->second.set(c, key, value);
    }
    c.model.preset = c.model_preset;
    c.model.validate();
    c.train.validate();
    c.data.sample.profile.validate();
    return c;
}

RunConfig resolve(const Settings& base, const Settings& overrides) {
    Settings merged = base;
    for (const auto& [k, v] : overrides) merged[k] = v;
    return resolve(merged);
}

Settings to_settings(const RunConfig& cfg) {
    Settings s;
    s["model.preset"] = cfg.model_preset;
    s["train.preset"] = cfg.train_preset;
    s["data.profile"] = cfg.profile_name;
    for (const auto& [key, f] : fields()) s[key] = f.get(cfg);
    return s;
}

std::string to_ini(const RunConfig& cfg) {
    const auto s = to_settings(cfg);
    std::ostringstream out;
    out << "# Effective configuration; rerunning with this file reproduces the run.\n";
    std::string section;
    for (const std::string sec : {"model", "train", "data"}) {
        out << "\n[" << sec << "]\n";
        // Presets first so the explicit keys below win when the file is reread.
        for (const auto* pk : kPresetKeys)
            if (std::string(pk).rfind(sec + ".", 0) == 0) out << std::string(pk).substr(sec.size() + 1) << " = " << s.at(pk) << '\n';
        for (const auto& [key, value] : s) {
            if (key.rfind(sec + ".", 0) != 0) continue;
            if (std::find(std::begin(kPresetKeys), std::end(kPresetKeys), key) != std::end(kPresetKeys)) continue;
            out << key.substr(sec.size() + 1) << " = " << value << '\n';
        }
    }
    return out.str();
}

void write_run_config(const std::filesystem::path& dir, const RunConfig& cfg) {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.ini");
    if (!out) throw DataError("cannot write " + (dir / "config.ini").string());
    out << to_ini(cfg);
}

RunConfig load_run_config(const std::filesystem::path& file) { return resolve(read_ini(file)); }

// --------------------------------------------------------------- commands

namespace {

bool non_empty_dir(const std::filesystem::path& p) {
    return std::filesystem::exists(p) &&
           (!std::filesystem::is_directory(p) || std::filesystem::directory_iterator(p) != std::filesystem::directory_iterator());
}

std::vector<TrainItem> load_items(const std::filesystem::path& split, const ModelConfig& cfg) {
    const auto samples = load_split(split);
    if (samples.empty()) throw DataError("no samples in " + split.string());
    return prepare_items(samples, cfg);
}

void write_text(const std::filesystem::path& file, const std::string& text) {
    std::ofstream out(file);
    if (!out) throw DataError("cannot write " + file.string());
    out << text;
}

}  // namespace

void cmd_synth(const RunConfig& cfg, const std::filesystem::path& out, bool force, std::ostream& log) {
    if (non_empty_dir(out) && !force)
        throw ConfigError("refusing to write into non-empty " + out.string() + " (pass --force to overwrite)");
    if (force && std::filesystem::exists(out)) std::filesystem::remove_all(out);
    generate_dataset(out, cfg.data);
    write_run_config(out, cfg);
    log << "synth: " << cfg.data.train << " train, " << cfg.data.val << " val, " << cfg.data.test
        << " test samples (" << cfg.data.sample.views << " views, profile " << cfg.profile_name << ") in "
        << out.string() << '\n';
}

TrainResult cmd_train(const RunConfig& cfg, const TrainCommand& cmd, std::ostream& log) {
    const auto train_set = load_items(cmd.data / "train", cfg.model);
    std::vector<TrainItem> val_set;
    if (std::filesystem::is_directory(cmd.data / "val")) val_set = load_items(cmd.data / "val", cfg.model);

    Model<float> model(cfg.model, cfg.train.seed);
    TrainOptions opt;
    opt.run_dir = cmd.out;
    opt.verbose = cmd.verbose;
    std::filesystem::create_directories(cmd.out);
    if (cmd.from) {
        const auto src = cmd.from->parent_path();
        const bool has_state = std::filesystem::exists(src / "state.json") && std::filesystem::exists(src / "adam_m.ckpt");
        if (has_state) {
            if (std::filesystem::absolute(src) != std::filesystem::absolute(cmd.out))
                for (const char* f : {"state.json", "adam_m.ckpt", "adam_v.ckpt", "adam_steps.txt", "best.ckpt", "loss.csv"})
                    if (std::filesystem::exists(src / f))
                        std::filesystem::copy_file(src / f, cmd.out / f, std::filesystem::copy_options::overwrite_existing);
            if (std::filesystem::absolute(*cmd.from) != std::filesystem::absolute(cmd.out / "last.ckpt"))
                std::filesystem::copy_file(*cmd.from, cmd.out / "last.ckpt",
                                           std::filesystem::copy_options::overwrite_existing);
            opt.resume = true;
            log << "train: resuming from " << cmd.from->string() << '\n';
        } else {
            load_checkpoint_into(model.params(), *cmd.from);
            log << "train: starting from weights in " << cmd.from->string() << '\n';
        }
    }
    write_run_config(cmd.out, cfg);
    json manifest = {{"seed", cfg.train.seed},
                     {"data", std::filesystem::absolute(cmd.data).string()},
                     {"model_preset", cfg.model_preset},
                     {"train_samples", train_set.size()},
                     {"val_samples", val_set.size()},
                     {"from", cmd.from ? cmd.from->string() : ""}};
    write_text(cmd.out / "manifest.json", manifest.dump(2) + "\n");
    log << "train: seed " << cfg.train.seed << ", " << train_set.size() << " train / " << val_set.size()
        << " val samples, " << cfg.train.epochs << " epochs\n";
    auto result = train(model, cfg.train, train_set, val_set, opt);
    log << "train: best epoch " << result.best_epoch << " (val CD-l1 " << result.best_val_cd_l1 << ")\n";
    return result;
}

void cmd_infer(const RunConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& sample,
               const std::filesystem::path& out) {
    const auto model = load_model(cfg.model, ckpt);
    const auto s = load_sample(sample);
    const auto items = prepare_items(std::span<const Sample>(&s, 1), cfg.model);
    NoGradGuard guard;
    const auto r = model.forward(items[0].input);
    std::filesystem::create_directories(out);
    write_xyzb(out / "coarse.xyzb", tensor_points(r.coarse));
    write_xyzb(out / "filtered.xyzb", tensor_points(r.filtered));
    write_xyzb(out / "dense.xyzb", tensor_points(r.dense));
    std::ostringstream csv;
    csv << "index,x,y,z,confidence,kept\n" << std::setprecision(9);
    for (std::size_t i = 0; i < r.coarse.dim(0); ++i)
        csv << i << ',' << r.coarse.at(i, 0) << ',' << r.coarse.at(i, 1) << ',' << r.coarse.at(i, 2) << ','
            << r.scores.at(i, 0) << ',' << (std::binary_search(r.kept.begin(), r.kept.end(), i) ? 1 : 0) << '\n';
    write_text(out / "confidence.csv", csv.str());
    write_run_config(out, cfg);
}

Predictor parse_predictor(std::string_view name) {
    if (name == "model") return Predictor::model;
    if (name == "nonlearned") return Predictor::nonlearned;
    if (name == "passthrough") return Predictor::passthrough;
    throw ConfigError("predictor must be model, nonlearned or passthrough; got '" + std::string(name) + "'");
}

MetricReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& ckpt, const std::filesystem::path& split,
                      const std::filesystem::path& out, Predictor predictor, double tau) {
    MetricReport report;
    if (predictor == Predictor::model) {
        const auto model = load_model(cfg.model, ckpt);
        report = evaluate(model, load_items(split, cfg.model), tau);
    } else {
        const auto samples = load_split(split);
        if (samples.empty()) throw DataError("no samples in " + split.string());
        std::vector<TrainItem> items(samples.size());
        std::vector<std::vector<Vec3>> preds(samples.size());
        parallel_for(samples.size(), [&](std::size_t i) {
            items[i].id = samples[i].id;
            items[i].family = samples[i].spec.family;
            items[i].gt = samples[i].gt.points;
            preds[i] = predictor == Predictor::passthrough ? passthrough_completion(samples[i])
                                                           : nonlearned_completion(samples[i], cfg.model.output_points());
        });
        report = evaluate_predictions(items, preds, tau);
    }
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        write_text(out / "report.txt", report.to_text());
        write_text(out / "report.json", report.to_json() + "\n");
        write_run_config(out, cfg);
    }
    return report;
}

std::string AblationTable::to_text() const {
    std::ostringstream out;
    out << std::left << std::setw(16) << axis << std::right << std::setw(12) << "CD-l1x1e3" << std::setw(10) << "DCD"
        << std::setw(10) << "F1" << '\n';
    for (const auto& r : rows)
        out << std::left << std::setw(16) << r.setting << std::right << std::fixed << std::setprecision(4)
            << std::setw(12) << r.metrics.cd_l1 * 1e3 << std::setw(10) << r.metrics.dcd << std::setw(10)
            << r.metrics.f_score << '\n';
    if (axis == "views")
        out << "CD-l1 improves monotonically from 2 to 6 views: " << (improves_through_six() ? "yes" : "no") << '\n';
    return out.str();
}

std::string AblationTable::to_json() const {
    json j;
    j["axis"] = axis;
    j["rows"] = json::array();
    for (const auto& r : rows)
        j["rows"].push_back({{"setting", r.setting}, {"value", r.value}, {"cd_l1", r.metrics.cd_l1},
                             {"cd_l2", r.metrics.cd_l2}, {"dcd", r.metrics.dcd}, {"f_score", r.metrics.f_score}});
    if (axis == "views") j["improves_2_to_6"] = improves_through_six();
    return j.dump(2);
}

bool AblationTable::improves_through_six() const {
    std::map<double, double> cd;
    for (const auto& r : rows) cd[r.value] = r.metrics.cd_l1;
    if (!cd.count(2) || !cd.count(4) || !cd.count(6)) return false;
    return cd[4] < cd[2] && cd[6] < cd[4];
}

AblationTable cmd_ablate(const RunConfig& cfg, std::string_view axis, const std::filesystem::path& data,
                         const std::filesystem::path& out, const std::optional<std::filesystem::path>& ckpt,
                         std::ostream& log) {
    AblationTable table;
    table.axis = std::string(axis);
    std::filesystem::create_directories(out);
    if (axis == "views") {
        const auto data_cfg = load_run_config(data / "config.ini");
        for (auto v : kViewSweep) {
            auto run = cfg;
            run.data = data_cfg.data;
            run.profile_name = data_cfg.profile_name;
            run.data.sample.views = v;
            run.data.sample.azimuths.clear();
            run.model.v_views = v;
            const auto tag = "v" + std::to_string(v);
            const auto vdata = out / ("data_" + tag);
            log << "ablate views: V = " << v << '\n';
            cmd_synth(run, vdata, true, log);
            TrainCommand tc{vdata, out / ("run_" + tag), std::nullopt, false};
            cmd_train(run, tc, log);
            const auto report = cmd_eval(run, tc.out / "best.ckpt", vdata / "test", out / ("eval_" + tag));
            table.rows.push_back({"V=" + std::to_string(v), double(v), report.overall});
        }
    } else if (axis == "keep_fraction") {
        std::filesystem::path model_ckpt;
        if (ckpt) {
            model_ckpt = *ckpt;
        } else {
            TrainCommand tc{data, out / "run", std::nullopt, false};
            cmd_train(cfg, tc, log);
            model_ckpt = tc.out / "best.ckpt";
        }
        for (double f : kKeepSweep) {
            auto run = cfg;
            run.model.keep_fraction = f;
            std::ostringstream tag;
            tag << "keep=" << f << " (" << int(std::lround((1.0 - f) * 100)) << "% filtered)";
            const auto report = cmd_eval(run, model_ckpt, data / "test", out / ("eval_keep_" + fmt_double(f)));
            table.rows.push_back({tag.str(), f, report.overall});
        }
    } else {
        throw ConfigError("ablate axis must be 'views' or 'keep_fraction', got '" + std::string(axis) + "'");
    }
    write_text(out / ("ablate_" + table.axis + ".txt"), table.to_text());
    write_text(out / ("ablate_" + table.axis + ".json"), table.to_json() + "\n");
    write_run_config(out, cfg);
    return table;
}

SampleMetrics cmd_metrics(const std::filesystem::path& pred, const std::filesystem::path& gt, double tau) {
    const auto p = read_xyzb(pred), g = read_xyzb(gt);
    if (p.empty() || g.empty()) throw DataError("metrics: empty point file");
    return score_prediction(pred.filename().string(), "", p, g, tau);
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const DataError*>(&e)) return 3;
    if (dynamic_cast<const NumericError*>(&e)) return 4;
    return 1;
}

}  // namespace pcd::cli
