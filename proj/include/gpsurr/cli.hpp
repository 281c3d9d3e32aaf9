#pragma once

// The `gpsurr` command line: generate, train, predict, backpredict, compare, serve.
//
// Every option may also come from a JSON config file (--config); keys are the
// long option names with '-' replaced by '_'. Command-line flags win over the
// file, the file wins over the GPSURR_SEED environment variable.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gpsurr/baselines.hpp"
#include "gpsurr/dataset.hpp"
#include "gpsurr/gpr.hpp"
#include "gpsurr/metrics.hpp"
#include "gpsurr/model_io.hpp"
#include "gpsurr/oracle.hpp"
#include "gpsurr/service.hpp"
#include "gpsurr/surrogate.hpp"

namespace gpsurr::cli {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumerical = 4 };

/// Bad flags or config values; maps to exit code 2.
class UsageError : public InvalidArgument {
  public:
    using InvalidArgument::InvalidArgument;
};

namespace detail {

enum class Role { Value, InputFile, OutputFile };

/// Option bookkeeping for config-file merging and config hashing.
class Bindings {
  public:
    template <typename T>
    CLI::Option *add(CLI::App &app, const std::string &flag, T &var, const std::string &desc, Role role = Role::Value) {
        CLI::Option *o = app.add_option(flag, var, desc);
        if constexpr (!std::is_same_v<T, std::vector<std::string>>) o->capture_default_str();
        record<T>(o, var, role);
        return o;
    }

    CLI::Option *add_flag(CLI::App &app, const std::string &flag, bool &var, const std::string &desc) {
        CLI::Option *o = app.add_flag(flag, var, desc);
        record<bool>(o, var, Role::Value);
        return o;
    }

    /// Fills options not given on the command line from the config object.
    void apply(const nlohmann::json &cfg) const {
        for (const auto &b : binds_) {
            if (b.option->count() > 0 || !cfg.contains(b.key)) continue;
            try {
                b.assign(cfg.at(b.key));
            } catch (const nlohmann::json::exception &e) {
                throw UsageError("config field '" + b.key + "': " + e.what());
            }
        }
    }

    /// Canonical JSON of every effective value; input files contribute their content hash,
    /// output paths are left out.
    [[nodiscard]] nlohmann::json effective() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto &b : binds_) {
            if (b.role == Role::OutputFile) continue;
            j[b.key] = b.dump();
            if (b.role == Role::InputFile && j[b.key].is_string()) {
                const std::string path = j[b.key].get<std::string>();
                if (!path.empty()) j[b.key] = {{"sha256", file_sha256(path)}};
            }
        }
        return j;
    }

    static std::string file_sha256(const std::string &path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open '" + path + "'");
        Sha256 h;
        char buf[1 << 16];
        while (is) {
            is.read(buf, sizeof buf);
            h.update(std::string_view(buf, static_cast<std::size_t>(is.gcount())));
        }
        return h.hex();
    }

  private:
    struct Bind {
        CLI::Option *option;
        std::string key;
        Role role;
        std::function<void(const nlohmann::json &)> assign;
        std::function<nlohmann::json()> dump;
    };

    template <typename T>
    void record(CLI::Option *o, T &var, Role role) {
        std::string key = o->get_name(false, true);
        while (!key.empty() && key.front() == '-') key.erase(key.begin());
        std::replace(key.begin(), key.end(), '-', '_');
        binds_.push_back({o, key, role, [&var](const nlohmann::json &v) { var = v.get<T>(); },
                          [&var]() { return nlohmann::json(var); }});
    }

    std::vector<Bind> binds_;
};

inline std::uint64_t env_seed() {
    const char *s = std::getenv("GPSURR_SEED");
    if (!s || !*s) return 0;
    char *end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw UsageError(std::string("GPSURR_SEED is not an unsigned integer: '") + s + "'");
    return v;
}

inline nlohmann::json read_json_file(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open config file '" + path + "'");
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error &e) {
        throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
    }
}

inline std::vector<std::string> split_list(const std::vector<std::string> &items) {
    std::vector<std::string> out;
    for (const auto &item : items) {
        std::stringstream ss(item);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) out.push_back(tok);
        }
    }
    return out;
}

inline double to_number(const std::string &s, const std::string &what) {
    double v = 0.0;
    if (!parse_double(s, v) || !std::isfinite(v)) throw UsageError(what + ": '" + s + "' is not a finite number");
    return v;
}

inline std::vector<double> parse_numbers(const std::vector<std::string> &items, const std::string &what) {
    std::vector<double> out;
    for (const auto &s : split_list(items)) out.push_back(to_number(s, what));
    return out;
}

/// "name=value" pairs.
inline std::map<std::string, double> parse_assignments(const std::vector<std::string> &items, const std::string &what) {
    std::map<std::string, double> out;
    for (const auto &s : split_list(items)) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw UsageError(what + ": expected NAME=VALUE, got '" + s + "'");
        out[s.substr(0, eq)] = to_number(s.substr(eq + 1), what + " " + s.substr(0, eq));
    }
    return out;
}

inline void write_text(const std::string &path, const std::string &text) {
    if (path.empty() || path == "-") {
        std::cout << text;
        return;
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << text;
    if (!os) throw IoError("failed writing '" + path + "'");
}

inline FlatDataset load_flat(const std::string &path) { return flatten(read_runs(path)); }

inline CurveKind dataset_kind(const FlatDataset &d) {
    return d.target_name == "generation" || std::find(d.feature_names.begin(), d.feature_names.end(), "generation") !=
                                                d.feature_names.end()
               ? CurveKind::Generation
               : CurveKind::Reflectance;
}

/// Row filter "name=value" (exact match).
inline FlatDataset apply_where(const FlatDataset &d, const std::map<std::string, double> &where) {
    FlatDataset out = d;
    for (const auto &[name, value] : where) {
        const Eigen::Index k = out.feature_index(name);
        out = filter_rows(out, [&](const auto &row, double) { return row(k) == value; });
    }
    if (out.rows() == 0) throw DataError("row filter leaves no data");
    return out;
}

/// Drops rows whose feature lies in [lo, hi]; spec "name:lo:hi".
inline FlatDataset apply_exclude(const FlatDataset &d, const std::vector<std::string> &specs) {
    FlatDataset out = d;
    for (const auto &s : split_list(specs)) {
        const auto a = s.find(':');
        const auto b = s.rfind(':');
        if (a == std::string::npos || a == b) throw UsageError("--exclude-range: expected NAME:LO:HI, got '" + s + "'");
        const Eigen::Index k = out.feature_index(s.substr(0, a));
        const double lo = to_number(s.substr(a + 1, b - a - 1), "--exclude-range");
        const double hi = to_number(s.substr(b + 1), "--exclude-range");
        out = filter_rows(out, [&](const auto &row, double) { return !(row(k) >= lo && row(k) <= hi); });
    }
    if (out.rows() == 0) throw DataError("--exclude-range leaves no training data");
    return out;
}

inline KernelSpec initial_kernel(const std::string &family, Eigen::Index d) {
    const std::vector<double> ls(static_cast<std::size_t>(d), 1.0);
    if (family == "se") return KernelSpec::squared_exponential(1.0, ls);
    if (family == "rq") return KernelSpec::rational_quadratic(1.0, ls, 1.0);
    throw UsageError("--kernel must be se, rq or auto, got '" + family + "'");
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Option sets

struct CommonOptions {
    std::string config;
    std::uint64_t seed = 0;
};

struct GenerateOptions {
    std::string out;
    std::string kind = "reflectance";
    double noise_sd = 0.005;
};

struct ModelOptions {
    std::string model = "gpr";
    std::string kernel = "auto";
    std::vector<std::string> features;
    std::vector<std::string> where;
    std::vector<std::string> exclude_range;
    std::string inverse_target;
    double test_fraction = 0.25;
    long max_train_rows = 800;
    int max_iters = 60;
    int restarts = 1;
    double z = 2.0;
    int n_trees = 100;
    int max_depth = 12;
    int min_leaf = 2;
    int hidden = 64;
    int epochs = 200;
    double step = 1e-3;
};

struct TrainOptions {
    std::string data;
    std::string out;
    std::string metrics;
};

struct PredictOptions {
    std::string model;
    std::vector<std::string> set;
    std::string sweep_feature;
    std::vector<std::string> sweep_values;
    double start = 300.0;
    double stop = 1150.0;
    long count = 18;
    double z = 2.0;
    std::string format = "csv";
    std::string out;
    bool oracle_truth = false;
};

struct BackpredictOptions {
    std::string data;
    std::string target = "wafer_thickness_um";
    double wavelength = 1050.0;
    std::vector<std::string> requested{"0.38,0.31,0.26"};
    std::vector<std::string> set{"substrate_doping_cm3=1e16,pyramid_angle_deg=54.74,rear_contact_thickness_um=1,"
                                 "arc_thickness_nm=70,back_reflectivity_frac=0.8"};
    std::string out;
    std::string save_model;
};

struct CompareOptions {
    std::string data;
    std::string out_table;
    std::string out_summary;
};

// ---------------------------------------------------------------------------
// Shared training pipeline

struct PreparedData {
    FlatDataset train;
    FlatDataset test;
    CurveKind kind = CurveKind::Reflectance;
};

inline PreparedData prepare_data(const std::string &path, const ModelOptions &o, std::uint64_t seed) {
    FlatDataset d = detail::load_flat(path);
    PreparedData p;
    p.kind = detail::dataset_kind(d);
    d = detail::apply_where(d, detail::parse_assignments(o.where, "--where"));
    if (!o.inverse_target.empty()) {
        if (!is_design_feature(o.inverse_target)) {
            throw UsageError("--inverse-target must be a design parameter, got '" + o.inverse_target + "'");
        }
        d = make_inverse_dataset(d, o.inverse_target);
    }
    const auto features = detail::split_list(o.features);
    if (!features.empty()) d = select_features(d, features);
    std::tie(p.train, p.test) = split(d, o.test_fraction, seed, true);
    p.train = detail::apply_exclude(p.train, o.exclude_range);
    return p;
}

inline GprModel train_gpr(const FlatDataset &train, const ModelOptions &o, CurveKind kind, std::uint64_t seed) {
    std::string family = o.kernel;
    if (family == "auto") family = kind == CurveKind::Generation && o.inverse_target.empty() ? "rq" : "se";
    const FlatDataset sub = subsample(train, o.max_train_rows, seed);
    OptConfig cfg;
    cfg.max_iters = o.max_iters;
    cfg.restarts = o.restarts;
    cfg.seed = seed;
    return fit(sub, detail::initial_kernel(family, sub.dim()), 1e-2, cfg);
}

inline ForestModel train_rf(const FlatDataset &train, const ModelOptions &o, std::uint64_t seed) {
    ForestConfig cfg;
    cfg.n_trees = o.n_trees;
    cfg.max_depth = o.max_depth;
    cfg.min_leaf = o.min_leaf;
    cfg.seed = seed;
    return rf_fit(train, cfg);
}

inline MlpModel train_mlp(const FlatDataset &train, const ModelOptions &o, std::uint64_t seed) {
    MlpConfig cfg;
    cfg.h1 = cfg.h2 = o.hidden;
    cfg.epochs = o.epochs;
    cfg.step = o.step;
    cfg.seed = seed;
    return mlp_fit(train, cfg);
}

inline AnyModel train_any(const PreparedData &p, const ModelOptions &o, std::uint64_t seed) {
    if (o.model == "gpr") return train_gpr(p.train, o, p.kind, seed);
    if (o.model == "rf") return train_rf(p.train, o, seed);
    if (o.model == "mlp") return train_mlp(p.train, o, seed);
    throw UsageError("--model must be gpr, rf or mlp, got '" + o.model + "'");
}

struct TestPredictions {
    Vector mean;
    std::optional<Vector> variance;
};

inline TestPredictions predict_rows(const AnyModel &m, const Matrix &X) {
    if (const auto *g = std::get_if<GprModel>(&m)) {
        auto [mu, var] = predict_batch(*g, X);
        return {mu, var};
    }
    if (const auto *f = std::get_if<ForestModel>(&m)) return {rf_predict_batch(*f, X), std::nullopt};
    return {mlp_predict_batch(std::get<MlpModel>(m), X), std::nullopt};
}

inline nlohmann::json test_metrics(const AnyModel &m, const FlatDataset &test, double z) {
    const TestPredictions p = predict_rows(m, test.inputs);
    nlohmann::json j{{"model_kind", model_kind(m)},
                     {"r2", r2_score(test.targets, p.mean)},
                     {"rmse", rmse(test.targets, p.mean)},
                     {"n_test", test.rows()},
                     {"z", z}};
    if (p.variance) {
        const Eigen::ArrayXd half = z * p.variance->array().sqrt();
        j["mean_ci_width"] = (2.0 * half).mean();
        j["coverage"] = ((test.targets - p.mean).array().abs() <= half).cast<double>().mean();
    } else {
        j["mean_ci_width"] = nullptr;
        j["coverage"] = nullptr;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_generate(const GenerateOptions &o, const CommonOptions &c, const nlohmann::json &cfg) {
    oracle::GridSpec grid;
    oracle::OpticalConstants constants;
    try {
        if (cfg.contains("grid")) grid = cfg.at("grid").get<oracle::GridSpec>();
        if (cfg.contains("constants")) constants = cfg.at("constants").get<oracle::OpticalConstants>();
    } catch (const nlohmann::json::exception &e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    const CurveKind kind = curve_kind_from_string(o.kind);
    const auto runs = oracle::generate_database(grid, kind, constants, o.noise_sd, c.seed);
    const std::string hash = oracle::config_hash(grid, constants, kind, o.noise_sd, c.seed);
    write_runs(runs, o.out,
               {"oracle_version=" + std::to_string(oracle::kOracleVersion), "config_sha256=" + hash,
                "seed=" + std::to_string(c.seed), "curve_kind=" + to_string(kind),
                "noise_sd=" + format_double(o.noise_sd)});
    std::size_t rows = 0;
    for (const auto &r : runs) rows += r.sweep.size();
    std::cout << "runs: " << runs.size() << "\nrows: " << rows << "\nconfig_sha256: " << hash << '\n';
    return kExitOk;
}

inline int cmd_train(const TrainOptions &t, const ModelOptions &o, const CommonOptions &c, const std::string &hash) {
    const PreparedData p = prepare_data(t.data, o, c.seed);
    const auto t0 = std::chrono::steady_clock::now();
    const AnyModel model = train_any(p, o, c.seed);
    const double train_time = detail::seconds_since(t0);

    ModelMetadata meta{default_sweep_feature(model_feature_names(model)), hash, c.seed};
    save_model(model, t.out, meta);

    nlohmann::json metrics = test_metrics(model, p.test, o.z);
    metrics["train_time"] = train_time;
    metrics["n_train"] = p.train.rows();
    metrics["feature_names"] = model_feature_names(model);
    metrics["target_name"] = model_target_name(model);
    metrics["config_sha256"] = hash;
    metrics["seed"] = c.seed;
    if (const auto *g = std::get_if<GprModel>(&model)) {
        metrics["n_gp_train"] = g->size();
        metrics["lml"] = g->report.lml;
        metrics["kernel"] = g->kernel;
        metrics["noise_variance"] = g->noise_variance * g->standardizer.target_scale * g->standardizer.target_scale;
    }
    const std::string metrics_path = t.metrics.empty() ? t.out + ".metrics.json" : t.metrics;
    detail::write_text(metrics_path, metrics.dump(2) + "\n");
    std::cout << "model: " << t.out << "\nr2: " << format_double(metrics["r2"].get<double>())
              << "\nrmse: " << format_double(metrics["rmse"].get<double>()) << '\n';
    if (!metrics["mean_ci_width"].is_null()) {
        std::cout << "mean_ci_width: " << format_double(metrics["mean_ci_width"].get<double>()) << '\n';
    }
    std::cout << "train_time: " << format_double(train_time) << '\n';
    return kExitOk;
}

inline int cmd_predict(const PredictOptions &o, const CommonOptions &c, const nlohmann::json &cfg,
                       const std::string &hash) {
    const LoadedModel loaded = load_any_model(o.model);
    const auto &names = model_feature_names(loaded.model);
    std::map<std::string, double> fixed;
    if (cfg.contains("fixed")) {
        try {
            fixed = cfg.at("fixed").get<std::map<std::string, double>>();
        } catch (const nlohmann::json::exception &e) {
            throw UsageError(std::string("config field 'fixed': ") + e.what());
        }
    }
    for (const auto &[k, v] : detail::parse_assignments(o.set, "--set")) fixed[k] = v;

    std::string sweep = o.sweep_feature;
    if (sweep.empty()) sweep = loaded.metadata.sweep_feature;
    if (sweep.empty()) sweep = default_sweep_feature(names);
    if (sweep.empty()) throw UsageError("--sweep-feature is required for this model");
    const std::vector<double> grid = o.sweep_values.empty()
                                         ? linspace(o.start, o.stop, static_cast<std::size_t>(std::max(o.count, 0L)))
                                         : detail::parse_numbers(o.sweep_values, "--sweep-values");
    if (grid.size() > service::kMaxSweepCount) throw UsageError("sweep has more than 10000 points");

    std::vector<std::string> missing;
    for (const auto &n : names) {
        if (n != sweep && !fixed.count(n)) missing.push_back(n);
    }
    if (!missing.empty()) {
        std::string msg = "missing feature(s):";
        for (const auto &n : missing) msg += " " + n;
        msg += "; model expects:";
        for (const auto &n : names) msg += " " + n;
        throw UsageError(msg);
    }
    const ProfileWithCI p = predict_profile_any(loaded.model, fixed, sweep, grid, o.z);

    std::vector<double> truth;
    if (o.oracle_truth) {
        if (model_target_name(loaded.model) != "reflectance" || sweep != "wavelength_nm") {
            throw UsageError("--oracle-truth needs a reflectance model swept over wavelength_nm");
        }
        CellDesign design;
        for (const auto &[k, v] : fixed) {
            if (is_design_feature(k)) design.set(k, v);
        }
        design.validate();
        const oracle::OpticalConstants constants;
        for (double w : grid) truth.push_back(oracle::reflectance(design, w, constants));
    }

    if (o.format == "json") {
        nlohmann::json j = profile_to_json(p, sweep);
        j["model_file_sha256"] = loaded.file_sha256;
        j["config_sha256"] = hash;
        j["seed"] = c.seed;
        if (!truth.empty()) j["oracle"] = truth;
        detail::write_text(o.out, j.dump(2) + "\n");
    } else if (o.format == "csv") {
        std::ostringstream os;
        os << "# model_file_sha256=" << loaded.file_sha256 << "\n# config_sha256=" << hash << "\n# seed=" << c.seed
           << '\n';
        write_profile_csv(os, p, sweep, truth);
        detail::write_text(o.out, os.str());
    } else {
        throw UsageError("--format must be csv or json");
    }
    return kExitOk;
}

inline int cmd_backpredict(const BackpredictOptions &b, const ModelOptions &o, const CommonOptions &c,
                           const std::string &hash) {
    if (!is_design_feature(b.target)) throw UsageError("--target must be a design parameter");
    FlatDataset d = detail::load_flat(b.data);
    if (d.target_name != "reflectance") throw DataError("back-prediction needs a reflectance database");
    const Eigen::Index wl = d.feature_index("wavelength_nm");
    d = filter_rows(d, [&](const auto &row, double) { return row(wl) == b.wavelength; });
    if (d.rows() == 0) {
        throw DataError("no rows at wavelength_nm=" + format_double(b.wavelength) + " in '" + b.data + "'");
    }
    const FlatDataset inv = make_inverse_dataset(d, b.target);
    ModelOptions mo = o;
    mo.inverse_target = b.target;
    const GprModel model = train_gpr(inv, mo, CurveKind::Reflectance, c.seed);
    if (!b.save_model.empty()) save_model(model, b.save_model, {"", hash, c.seed});

    std::map<std::string, double> fixed = detail::parse_assignments(b.set, "--set");
    fixed["wavelength_nm"] = b.wavelength;
    fixed.erase(b.target);
    const double lo_t = inv.targets.minCoeff(), hi_t = inv.targets.maxCoeff();
    const double lo_r = d.targets.minCoeff(), hi_r = d.targets.maxCoeff();
    const oracle::OpticalConstants constants;

    nlohmann::json results = nlohmann::json::array();
    for (double r : detail::parse_numbers(b.requested, "--requested")) {
        fixed["reflectance"] = r;
        Vector x(model.dim());
        for (Eigen::Index k = 0; k < model.dim(); ++k) {
            const auto &n = model.feature_names[static_cast<std::size_t>(k)];
            auto it = fixed.find(n);
            if (it == fixed.end()) throw UsageError("--set is missing '" + n + "'");
            x(k) = it->second;
        }
        const Prediction p = predict(model, x);
        const double sd = std::sqrt(p.variance);
        CellDesign design;
        for (const auto &[k, v] : fixed) {
            if (is_design_feature(k)) design.set(k, v);
        }
        // Forward oracle over the predicted value and its z-band.
        auto forward = [&](double t) {
            design.set(b.target, std::max(t, 1e-6));
            return oracle::reflectance(design, b.wavelength, constants);
        };
        const double achieved = forward(p.mean);
        double band_lo = achieved, band_hi = achieved;
        for (int i = 0; i <= 200; ++i) {
            const double t = p.mean - 2.0 * sd + 4.0 * sd * i / 200.0;
            const double v = forward(t);
            band_lo = std::min(band_lo, v);
            band_hi = std::max(band_hi, v);
        }
        results.push_back({{"requested", r},
                           {"mean", p.mean},
                           {"variance", p.variance},
                           {"ci_lower", p.mean - o.z * sd},
                           {"ci_upper", p.mean + o.z * sd},
                           {"achieved", achieved},
                           {"abs_error", std::abs(achieved - r)},
                           {"within_2sd", r >= band_lo && r <= band_hi},
                           {"requested_in_training_range", r >= lo_r && r <= hi_r},
                           {"mean_in_training_range", p.mean >= lo_t && p.mean <= hi_t}});
    }
    nlohmann::json report{{"target_name", b.target},
                          {"wavelength_nm", b.wavelength},
                          {"fixed", fixed},
                          {"n_train", model.size()},
                          {"z", o.z},
                          {"results", results},
                          {"config_sha256", hash},
                          {"seed", c.seed}};
    report["fixed"].erase("reflectance");
    detail::write_text(b.out, report.dump(2) + "\n");
    return kExitOk;
}

inline int cmd_compare(const CompareOptions &co, const ModelOptions &o, const CommonOptions &c,
                       const std::string &hash) {
    const PreparedData p = prepare_data(co.data, o, c.seed);
    struct Entry {
        std::string kind;
        AnyModel model;
        double train_time;
    };
    std::vector<Entry> entries;
    for (const std::string kind : {"gpr", "rf", "mlp"}) {
        ModelOptions mo = o;
        mo.model = kind;
        const auto t0 = std::chrono::steady_clock::now();
        AnyModel m = train_any(p, mo, c.seed);
        entries.push_back({kind, std::move(m), detail::seconds_since(t0)});
    }

    nlohmann::json summary{{"config_sha256", hash}, {"seed", c.seed}, {"n_test", p.test.rows()}};
    std::vector<TestPredictions> preds;
    std::cout << "model  r2         rmse       variance  train_time\n";
    for (const auto &e : entries) {
        nlohmann::json m = test_metrics(e.model, p.test, o.z);
        m["train_time"] = e.train_time;
        m["has_variance"] = !m["mean_ci_width"].is_null();
        preds.push_back(predict_rows(e.model, p.test.inputs));
        char line[128];
        std::snprintf(line, sizeof line, "%-6s %-10.6f %-10.6f %-9s %.2fs\n", e.kind.c_str(), m["r2"].get<double>(),
                      m["rmse"].get<double>(), m["has_variance"].get<bool>() ? "yes" : "no", e.train_time);
        std::cout << line;
        summary["models"][e.kind] = std::move(m);
    }

    if (!co.out_table.empty()) {
        std::ostringstream os;
        os << "# config_sha256=" << hash << "\n# seed=" << c.seed << '\n';
        const std::string sweep = default_sweep_feature(p.test.feature_names);
        const Eigen::Index s = sweep.empty() ? -1 : p.test.feature_index(sweep);
        os << "run_id," << (sweep.empty() ? "sweep" : sweep) << ",truth";
        for (const auto &e : entries) os << ',' << e.kind << "_mean," << e.kind << "_variance";
        os << '\n';
        for (Eigen::Index i = 0; i < p.test.rows(); ++i) {
            os << p.test.run_index[static_cast<std::size_t>(i)] << ','
               << (s >= 0 ? format_double(p.test.inputs(i, s)) : std::string()) << ','
               << format_double(p.test.targets(i));
            for (const auto &pr : preds) {
                os << ',' << format_double(pr.mean(i)) << ',';
                if (pr.variance) os << format_double((*pr.variance)(i));
            }
            os << '\n';
        }
        detail::write_text(co.out_table, os.str());
    }
    if (!co.out_summary.empty()) detail::write_text(co.out_summary, summary.dump(2) + "\n");
    return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

namespace detail {

inline void add_model_options(CLI::App &app, Bindings &b, ModelOptions &o, bool with_kind) {
    if (with_kind) b.add(app, "--model", o.model, "Model kind: gpr, rf or mlp");
    b.add(app, "--kernel", o.kernel, "GPR kernel: se, rq or auto (se for reflectance, rq for generation)");
    b.add(app, "--features", o.features, "Comma-separated feature subset (default: all)");
    b.add(app, "--where", o.where, "Keep only rows with NAME=VALUE (repeatable)");
    b.add(app, "--exclude-range", o.exclude_range, "Drop training rows with NAME in [LO,HI]; NAME:LO:HI");
    b.add(app, "--inverse-target", o.inverse_target, "Swap this design parameter with the target");
    b.add(app, "--test-fraction", o.test_fraction, "Fraction of runs held out for testing");
    b.add(app, "--max-train-rows", o.max_train_rows, "GPR training subsample size (0 = all rows)");
    b.add(app, "--max-iters", o.max_iters, "GPR optimizer iterations per start");
    b.add(app, "--restarts", o.restarts, "GPR random restarts in addition to the default start");
    b.add(app, "--z", o.z, "Confidence-interval half-width in standard deviations");
    b.add(app, "--n-trees", o.n_trees, "Random forest: number of trees");
    b.add(app, "--max-depth", o.max_depth, "Random forest: maximum depth");
    b.add(app, "--min-leaf", o.min_leaf, "Random forest: minimum rows per leaf");
    b.add(app, "--hidden", o.hidden, "MLP: width of both hidden layers");
    b.add(app, "--epochs", o.epochs, "MLP: training epochs");
    b.add(app, "--step", o.step, "MLP: initial Adam step size");
}

inline int exit_code_for(const std::exception &e) {
    if (dynamic_cast<const NumericalError *>(&e)) return kExitNumerical;
    if (dynamic_cast<const InvalidArgument *>(&e)) return kExitUsage;
    if (dynamic_cast<const DataError *>(&e) || dynamic_cast<const IoError *>(&e)) return kExitData;
    return 1;
}

} // namespace detail

inline int main(int argc, const char *const *argv) {
    CLI::App app{"Gaussian-process surrogate models for solar-cell reflectance and generation profiles", "gpsurr"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "gpsurr 1.0.0");

    CommonOptions common;
    try {
        common.seed = detail::env_seed();
    } catch (const UsageError &e) {
        std::cerr << "gpsurr: error: " << e.what() << std::endl;
        return kExitUsage;
    }
    GenerateOptions gen;
    ModelOptions model_opts;
    TrainOptions train;
    PredictOptions pred;
    BackpredictOptions back;
    CompareOptions cmp;
    service::ServiceConfig serve;

    std::map<CLI::App *, detail::Bindings> bindings;
    auto add_common = [&](CLI::App *sub) {
        auto &b = bindings[sub];
        sub->add_option("--config", common.config, "JSON config file; flags override its values");
        b.add(*sub, "--seed", common.seed, "Random seed (default: $GPSURR_SEED or 0)")->default_str("");
        return sub;
    };

    CLI::App *g = add_common(app.add_subcommand("generate", "Simulate a database of oracle runs and write Runs CSV"));
    bindings[g].add(*g, "--out", gen.out, "Output CSV path", detail::Role::OutputFile)->required();
    bindings[g].add(*g, "--kind", gen.kind, "Curve kind: reflectance or generation");
    bindings[g].add(*g, "--noise-sd", gen.noise_sd, "Gaussian noise SD added to every value (target units)");
    g->footer("Grid and optical constants are read from the config file keys \"grid\" and \"constants\".");

    CLI::App *t = add_common(app.add_subcommand("train", "Fit a gpr, rf or mlp model and report test metrics"));
    bindings[t].add(*t, "--data", train.data, "Runs CSV", detail::Role::InputFile)->required();
    bindings[t].add(*t, "--out", train.out, "Model file to write", detail::Role::OutputFile)->required();
    bindings[t].add(*t, "--metrics", train.metrics, "Metrics JSON (default: <out>.metrics.json)",
                    detail::Role::OutputFile);
    detail::add_model_options(*t, bindings[t], model_opts, true);

    CLI::App *p = add_common(app.add_subcommand("predict", "Predict a profile with confidence band from a model file"));
    bindings[p].add(*p, "--model", pred.model, "Model file", detail::Role::InputFile)->required();
    bindings[p].add(*p, "--set", pred.set, "Fixed feature NAME=VALUE (repeatable or comma-separated)");
    bindings[p].add(*p, "--sweep-feature", pred.sweep_feature, "Feature to sweep (default: the model's sweep feature)");
    bindings[p].add(*p, "--sweep-values", pred.sweep_values, "Explicit comma-separated sweep values");
    bindings[p].add(*p, "--start", pred.start, "Sweep start (with --stop and --count)");
    bindings[p].add(*p, "--stop", pred.stop, "Sweep stop, inclusive");
    bindings[p].add(*p, "--count", pred.count, "Number of sweep points");
    bindings[p].add(*p, "--z", pred.z, "Confidence-interval half-width in standard deviations");
    bindings[p].add(*p, "--format", pred.format, "Output format: csv or json");
    bindings[p].add(*p, "--out", pred.out, "Output path (default: stdout)", detail::Role::OutputFile);
    bindings[p].add_flag(*p, "--oracle-truth", pred.oracle_truth, "Add a noise-free oracle column");

    CLI::App *bp = add_common(
        app.add_subcommand("backpredict", "Train an inverse GPR and predict the design parameter for target values"));
    bindings[bp].add(*bp, "--data", back.data, "Reflectance Runs CSV", detail::Role::InputFile)->required();
    bindings[bp].add(*bp, "--target", back.target, "Design parameter to predict");
    bindings[bp].add(*bp, "--wavelength", back.wavelength, "Wavelength [nm] at which reflectance is requested");
    bindings[bp].add(*bp, "--requested", back.requested, "Comma-separated requested reflectance values");
    bindings[bp].add(*bp, "--set", back.set, "Other design parameters NAME=VALUE");
    bindings[bp].add(*bp, "--out", back.out, "Report JSON (default: stdout)", detail::Role::OutputFile);
    bindings[bp].add(*bp, "--save-model", back.save_model, "Also write the inverse model file",
                     detail::Role::OutputFile);
    bindings[bp].add(*bp, "--max-train-rows", model_opts.max_train_rows, "GPR training subsample size (0 = all)");
    bindings[bp].add(*bp, "--max-iters", model_opts.max_iters, "GPR optimizer iterations per start");
    bindings[bp].add(*bp, "--restarts", model_opts.restarts, "GPR random restarts");
    bindings[bp].add(*bp, "--z", model_opts.z, "Confidence-interval half-width in standard deviations");

    CLI::App *cm = add_common(app.add_subcommand("compare", "Train gpr, rf and mlp on one split and tabulate them"));
    bindings[cm].add(*cm, "--data", cmp.data, "Runs CSV", detail::Role::InputFile)->required();
    bindings[cm].add(*cm, "--out-table", cmp.out_table, "Per-test-row prediction table (CSV)",
                     detail::Role::OutputFile);
    bindings[cm].add(*cm, "--out-summary", cmp.out_summary, "Per-model metrics (JSON)", detail::Role::OutputFile);
    detail::add_model_options(*cm, bindings[cm], model_opts, false);

    CLI::App *s = app.add_subcommand("serve", "Serve model files over HTTP");
    s->add_option("--config", common.config, "JSON config file; flags override its values");
    bindings[s].add(*s, "--models-dir", serve.models_dir, "Directory of model files (*.json)");
    bindings[s].add(*s, "--port", serve.port, "TCP port");
    bindings[s].add(*s, "--host", serve.host, "Bind address");
    bindings[s].add(*s, "--cors-origin", serve.cors_origin, "Allowed CORS origin for the web UI (empty: none)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        CLI::App *sub = app.get_subcommands().front();
        nlohmann::json cfg = nlohmann::json::object();
        if (!common.config.empty()) {
            cfg = detail::read_json_file(common.config);
            if (!cfg.is_object()) throw UsageError("config file must hold a JSON object");
        }
        auto &b = bindings[sub];
        b.apply(cfg);
        nlohmann::json effective = b.effective();
        if (sub == g) return cmd_generate(gen, common, cfg);
        const std::string name = sub->get_name();
        nlohmann::json hashed{{"command", name}, {"options", effective}};
        if (sub == p && cfg.contains("fixed")) hashed["fixed"] = cfg["fixed"];
        const std::string hash = sha256_hex(hashed.dump());
        if (sub == t) return cmd_train(train, model_opts, common, hash);
        if (sub == p) return cmd_predict(pred, common, cfg, hash);
        if (sub == bp) return cmd_backpredict(back, model_opts, common, hash);
        if (sub == cm) return cmd_compare(cmp, model_opts, common, hash);
        if (sub == s) {
            service::run(serve);
            return kExitOk;
        }
        return kExitUsage;
    } catch (const std::exception &e) {
        std::cerr << "gpsurr: error: " << e.what() << std::endl;
        return detail::exit_code_for(e);
    }
}

} // namespace gpsurr::cli
