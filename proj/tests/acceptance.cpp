// End-to-end acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "gpsurr/gpr.hpp"
#include "gpsurr/oracle.hpp"
#include "gpsurr/service.hpp"
#include "oracles.hpp"

using namespace gpsurr;
using nlohmann::json;
namespace fs = std::filesystem;
namespace gt = gpsurr::testing;

namespace {

int failures = 0;

void report(const std::string &name, bool pass, const std::string &detail) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
    if (!pass) ++failures;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path work;

/// Runs the CLI in the work directory; stdout goes to `out` (or is discarded).
int cli(const std::string &args, const std::string &out = "") {
    const std::string cmd = "cd '" + work.string() + "' && env -u GPSURR_SEED '" GPSURR_CLI_PATH "' " + args + " > " +
                            (out.empty() ? std::string("/dev/null") : "'" + out + "'") + " 2> cli.err";
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (code != 0) std::cerr << "gpsurr " << args << " -> exit " << code << "\n" << slurp(work / "cli.err");
    return code;
}

json metrics_of(const std::string &model) { return json::parse(slurp(work / (model + ".metrics.json"))); }

FlatDataset synthetic(const Matrix &X, const Vector &y) {
    FlatDataset d;
    d.inputs = X;
    d.targets = y;
    for (Eigen::Index k = 0; k < X.cols(); ++k) d.feature_names.push_back("x" + std::to_string(k));
    d.target_name = "y";
    return d;
}

// ---------------------------------------------------------------------------

void posterior_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(101);
    std::uniform_int_distribution<int> n_dist(5, 50), d_dist(1, 7);
    double worst = 0.0;
    for (int problem = 0; problem < 20; ++problem) {
        const auto family = problem % 2 ? KernelFamily::RationalQuadratic : KernelFamily::SquaredExponential;
        const int n = n_dist(rng), d = d_dist(rng);
        const Matrix X = gt::random_matrix(rng, n, d);
        const Vector y = gt::random_vector(rng, n);
        OptConfig cfg;
        cfg.max_iters = 0;
        const GprModel m = fit(synthetic(X, y), gt::random_kernel(rng, family, d), 0.02, cfg);
        const double sy = m.standardizer.target_scale;
        for (int t = 0; t < 10; ++t) {
            const Vector xs = gt::random_vector(rng, d, -1.5, 1.5);
            const auto ref = gt::dense_posterior(m.kernel, m.noise_variance, m.train_inputs, m.train_targets,
                                                 m.standardizer.apply(xs));
            const Prediction p = predict(m, xs);
            worst = std::max({worst, std::abs(p.mean - m.standardizer.invert_target(ref.mean)),
                              std::abs(p.variance - ref.variance * sy * sy)});
        }
    }
    const double secs = seconds_since(t0);
    report("posterior-correctness", worst <= 1e-8 && secs < 5.0,
           "20 problems, max |cholesky - dense inverse| = " + fmt(worst, 3) + " (tol 1e-8), " + fmt(secs, 3) +
               " s (limit 5 s)");
}

void gradient_check() {
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::mt19937_64 rng(seed);
        for (auto family : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
            const Eigen::Index d = 3;
            const KernelSpec k = gt::random_kernel(rng, family, d);
            const Matrix X = gt::random_matrix(rng, 25, d);
            const Vector y = gt::random_vector(rng, 25);
            const double noise = 0.05;
            const Eigen::Index np = k.num_params();
            Vector p(np + 1);
            p.head(np) = k.log_params();
            p(np) = 0.5 * std::log(noise);
            const Vector fd = gt::central_diff(
                [&](const Vector &q) { return gt::dense_lml(k.with_log_params(q.head(np)), std::exp(2.0 * q(np)), X, y); },
                p, 1e-5);
            const Vector an = log_marginal_likelihood(k, noise, X, y).gradient;
            for (Eigen::Index i = 0; i < fd.size(); ++i) worst = std::max(worst, gt::rel_err(an(i), fd(i)));
        }
    }
    report("gradient-check", worst < 1e-4,
           "10 seeds x {se, rq}, max rel. err. vs central differences = " + fmt(worst, 3) + " (tol 1e-4)");
}

const char *kThreeFeatures = "wafer_thickness_um,substrate_doping_cm3,rear_contact_thickness_um,wavelength_nm";
const char *kNoRearContact =
    "wafer_thickness_um,substrate_doping_cm3,pyramid_angle_deg,arc_thickness_nm,back_reflectivity_frac,wavelength_nm";

void feature_count_effect() {
    const auto t0 = std::chrono::steady_clock::now();
    const bool ok = cli("train --data runs.csv --seed 1 --out all.json") == 0 &&
                    cli(std::string("train --data runs.csv --seed 1 --out three.json --features ") + kThreeFeatures) == 0;
    const double secs = seconds_since(t0);
    if (!ok) return report("feature-count-effect", false, "training failed");
    const json all = metrics_of("all.json"), three = metrics_of("three.json");
    const double r2a = all["r2"], r2t = three["r2"], wa = all["mean_ci_width"], wt = three["mean_ci_width"];
    report("feature-count-effect", r2a >= 0.99 && r2t < r2a && wt > wa && secs < 120.0,
           "all features R2 " + fmt(r2a, 5) + " (>= 0.99), 3 features R2 " + fmt(r2t, 5) + "; CI width " + fmt(wa) +
               " -> " + fmt(wt) + "; " + fmt(secs, 3) + " s (limit 120 s)");
}

void irrelevant_feature() {
    if (cli(std::string("train --data runs.csv --seed 1 --out norear.json --features ") + kNoRearContact) != 0) {
        return report("irrelevant-feature", false, "training failed");
    }
    const double r2a = metrics_of("all.json")["r2"], r2n = metrics_of("norear.json")["r2"];
    report("irrelevant-feature", std::abs(r2a - r2n) < 0.01,
           "R2 with rear contact " + fmt(r2a, 5) + ", without " + fmt(r2n, 5) + ", |diff| = " + fmt(std::abs(r2a - r2n), 3) +
               " (tol 0.01)");
}

void calibration() {
    std::string detail;
    bool pass = true;
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, 0.05);
        auto f = [](const Eigen::Ref<const Vector> &x) { return std::sin(2.0 * x(0)) * std::cos(x(1)) + 0.3 * x(2); };
        const Matrix Xtr = gt::random_matrix(rng, 200, 3);
        Vector ytr(200);
        for (Eigen::Index i = 0; i < 200; ++i) ytr(i) = f(Xtr.row(i).transpose()) + noise(rng);
        OptConfig cfg;
        cfg.seed = seed;
        cfg.restarts = 1;
        const GprModel m = fit(synthetic(Xtr, ytr), KernelSpec::squared_exponential(1.0, {1.0, 1.0, 1.0}), 0.1, cfg);
        const Matrix Xte = gt::random_matrix(rng, 600, 3);
        const auto [mu, var] = predict_batch(m, Xte);
        int inside = 0;
        for (Eigen::Index i = 0; i < Xte.rows(); ++i) {
            const double y = f(Xte.row(i).transpose()) + noise(rng);
            inside += std::abs(y - mu(i)) <= 2.0 * std::sqrt(var(i));
        }
        const double cov = inside / static_cast<double>(Xte.rows());
        pass = pass && cov >= 0.90 && cov <= 0.99;
        detail += (detail.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + " " + fmt(cov, 3);
    }
    report("calibration", pass, "z=2 coverage on 600 held-out points: " + detail + " (range [0.90, 0.99])");
}

const char *kDesign = "--set wafer_thickness_um=180,substrate_doping_cm3=1e16,pyramid_angle_deg=54.74,"
                      "rear_contact_thickness_um=1,arc_thickness_nm=70,back_reflectivity_frac=0.8";

void sparse_region() {
    if (cli("train --data runs.csv --seed 1 --out sparse.json --exclude-range wavelength_nm:500:700") != 0) {
        return report("sparse-region-widening", false, "training failed");
    }
    const std::string sweep = " --start 300 --stop 1150 --count 171 --format json ";
    if (cli("predict --model all.json" + sweep + kDesign, "dense_profile.json") != 0 ||
        cli("predict --model sparse.json" + sweep + kDesign, "sparse_profile.json") != 0) {
        return report("sparse-region-widening", false, "prediction failed");
    }
    const json dense = json::parse(slurp(work / "dense_profile.json"));
    const json sparse = json::parse(slurp(work / "sparse_profile.json"));
    double in_sum = 0.0, out_sum = 0.0, d_center = 0.0, s_center = 0.0;
    int in_n = 0, out_n = 0;
    const double dense_prior = load_model((work / "all.json").string()).prior_mean();
    const double sparse_prior = load_model((work / "sparse.json").string()).prior_mean();
    for (std::size_t i = 0; i < sparse["sweep_values"].size(); ++i) {
        const double w = sparse["sweep_values"][i];
        const double sd = std::sqrt(sparse["variances"][i].get<double>());
        if (w >= 500.0 && w <= 700.0) {
            in_sum += sd;
            ++in_n;
        } else {
            out_sum += sd;
            ++out_n;
        }
        if (w == 600.0) {
            d_center = std::abs(dense["means"][i].get<double>() - dense_prior);
            s_center = std::abs(sparse["means"][i].get<double>() - sparse_prior);
        }
    }
    const double ratio = (in_sum / in_n) / (out_sum / out_n);
    report("sparse-region-widening", ratio > 1.5 && s_center < d_center,
           "mean sd inside [500,700] nm / outside = " + fmt(ratio, 3) + " (> 1.5); |mean - prior| at 600 nm " +
               fmt(d_center) + " dense -> " + fmt(s_center) + " sparse");
}

void back_prediction() {
    if (cli("backpredict --data runs.csv --seed 1 --out bp.json") != 0) {
        return report("back-prediction-closure", false, "backpredict failed");
    }
    const json bp = json::parse(slurp(work / "bp.json"));
    CellDesign design;
    for (const auto &[k, v] : bp["fixed"].items()) {
        if (is_design_feature(k)) design.set(k, v.get<double>());
    }
    const double wl = bp["wavelength_nm"];
    const oracle::OpticalConstants constants;
    auto forward = [&](double t) {
        CellDesign c = design;
        c.wafer_thickness_um = t;
        return oracle::reflectance(c, wl, constants);
    };
    int within_2sd = 0, within_abs = 0;
    std::string detail;
    for (const auto &r : bp["results"]) {
        const double req = r["requested"], mean = r["mean"], sd = std::sqrt(r["variance"].get<double>());
        const double achieved = forward(mean);
        // The requested value is reachable by some thickness in mean +- 2 sd.
        double lo = achieved, hi = achieved;
        for (int i = 0; i <= 400; ++i) {
            const double v = forward(std::max(mean - 2.0 * sd + 4.0 * sd * i / 400.0, 1e-6));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        within_2sd += req >= lo && req <= hi;
        within_abs += std::abs(achieved - req) <= 0.03;
        detail += (detail.empty() ? "" : "; ") + fmt(req, 3) + " -> t=" + fmt(mean) + "+-" + fmt(sd, 3) + " um, R=" +
                  fmt(achieved, 4);
    }
    const int n = static_cast<int>(bp["results"].size());
    report("back-prediction-closure", n == 3 && within_2sd >= 2 && within_abs == n,
           std::to_string(within_2sd) + "/3 within 2 sd, " + std::to_string(within_abs) + "/3 within 0.03 (" + detail +
               ")");
}

void baseline_comparison() {
    const auto t0 = std::chrono::steady_clock::now();
    if (cli("compare --data runs.csv --seed 1 --out-table cmp.csv --out-summary cmp.json") != 0) {
        return report("baseline-comparison", false, "compare failed");
    }
    const double secs = seconds_since(t0);
    const json s = json::parse(slurp(work / "cmp.json"));
    bool pass = secs < 300.0;
    std::string detail;
    for (const char *kind : {"gpr", "rf", "mlp"}) {
        const json &m = s["models"][kind];
        const bool expect_var = std::string(kind) == "gpr";
        pass = pass && m["r2"].get<double>() >= 0.9 && m["has_variance"].get<bool>() == expect_var;
        detail += std::string(kind) + " R2 " + fmt(m["r2"].get<double>(), 5) +
                  (m["has_variance"].get<bool>() ? " (variance)" : " (no variance)") + ", ";
    }
    // Only the gpr_variance column carries values.
    std::ifstream table(work / "cmp.csv");
    std::string line, header;
    while (std::getline(table, line) && line.rfind('#', 0) == 0) {
    }
    header = line;
    std::getline(table, line);
    pass = pass && header.find("gpr_variance") != std::string::npos && line.find(",,") != std::string::npos;
    report("baseline-comparison", pass, detail + fmt(secs, 3) + " s for one compare command (limit 300 s)");
}

void persistence_and_serving() {
    std::string detail;
    bool pass = true;

    // In-memory model -> file -> model: predictions bitwise equal.
    std::mt19937_64 rng(7);
    const Matrix X = gt::random_matrix(rng, 60, 3);
    const Vector y = (X.col(0).array().sin() + X.col(1).array() * X.col(2).array()).matrix();
    OptConfig cfg;
    cfg.max_iters = 20;
    cfg.restarts = 0;
    const GprModel fresh = fit(synthetic(X, y), KernelSpec::squared_exponential(1.0, {1.0, 1.0, 1.0}), 1e-2, cfg);
    save_model(fresh, (work / "roundtrip.json").string());
    const GprModel back = load_model((work / "roundtrip.json").string());
    const Matrix Xq = gt::random_matrix(rng, 200, 3, -2.0, 2.0);
    const auto [m1, v1] = predict_batch(fresh, Xq);
    const auto [m2, v2] = predict_batch(back, Xq);
    const bool bitwise = m1 == m2 && v1 == v2;
    pass = pass && bitwise;
    detail += std::string("save/load/predict ") + (bitwise ? "bitwise identical" : "DIFFERS");

    // Service vs CLI on the same model file and inputs.
    const fs::path models = work / "models";
    fs::create_directories(models);
    fs::copy_file(work / "three.json", models / "three.json", fs::copy_options::overwrite_existing);
    const std::string fixed = "wafer_thickness_um=180,substrate_doping_cm3=1e16,rear_contact_thickness_um=1";
    if (cli("predict --model models/three.json --format json --start 300 --stop 1150 --count 35 --set " + fixed,
            "cli_profile.json") != 0) {
        return report("persistence-and-serving", false, "CLI predict failed");
    }
    const json from_cli = json::parse(slurp(work / "cli_profile.json"));
    const json request{
        {"fixed", {{"wafer_thickness_um", 180}, {"substrate_doping_cm3", 1e16}, {"rear_contact_thickness_um", 1}}},
        {"sweep", {{"feature", "wavelength_nm"}, {"start", 300}, {"stop", 1150}, {"count", 35}}}};

    service::Service svc({.models_dir = models.string(), .host = "127.0.0.1", .port = 0, .cors_origin = ""});
    const int port = svc.start();
    httplib::Client c("127.0.0.1", port);
    const auto early = c.Get("/healthz");
    const bool starting = early && early->status == 503;
    svc.load_models();

    std::vector<std::future<std::pair<int, std::string>>> burst;
    for (int i = 0; i < 100; ++i) {
        burst.push_back(std::async(std::launch::async, [port, &request, i] {
            httplib::Client hc("127.0.0.1", port);
            auto r = i % 2 ? hc.Get("/healthz")
                           : hc.Post("/models/three/predict-profile", request.dump(), "application/json");
            return r ? std::make_pair(r->status, r->body) : std::make_pair(-1, std::string());
        }));
    }
    std::set<std::string> health_bodies, profile_bodies;
    bool all_ok = true;
    for (int i = 0; i < 100; ++i) {
        const auto [status, body] = burst[static_cast<std::size_t>(i)].get();
        all_ok = all_ok && status == 200;
        (i % 2 ? health_bodies : profile_bodies).insert(body);
    }
    svc.stop();

    bool same = profile_bodies.size() == 1;
    if (same) {
        const json from_service = json::parse(*profile_bodies.begin());
        for (const char *k : {"sweep_values", "means", "variances", "ci_lower", "ci_upper"})
            same = same && from_service[k] == from_cli[k];
    }
    const bool healthy = starting && health_bodies.size() == 1 &&
                         json::parse(*health_bodies.begin()) == json{{"status", "ok"}, {"models_loaded", 1}};
    pass = pass && same && healthy && all_ok;
    detail += std::string("; service ") + (same ? "==" : "!=") + " CLI profile (35 points); healthz " +
              (starting ? "503 before load" : "NOT 503 before load") + ", burst of 100: " +
              (all_ok ? "all 200" : "errors") + ", " + std::to_string(health_bodies.size()) + " distinct healthz / " +
              std::to_string(profile_bodies.size()) + " distinct profile bodies";
    report("persistence-and-serving", pass, detail);
}

} // namespace

int main() {
    work = fs::temp_directory_path() / ("gpsurr_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(work);

    posterior_correctness();
    gradient_check();
    calibration();

    // 768-run reflectance database with noise_sd = 0.005.
    if (cli("generate --seed 1 --noise-sd 0.005 --out runs.csv") != 0) {
        report("database", false, "generate failed");
    } else {
        feature_count_effect();
        irrelevant_feature();
        sparse_region();
        back_prediction();
        baseline_comparison();
        persistence_and_serving();
    }

    std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED") << std::endl;
    if (failures == 0) fs::remove_all(work);
    return failures == 0 ? 0 : 1;
}
