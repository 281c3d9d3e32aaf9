#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "gpsurr/dataset.hpp"
#include "gpsurr/error.hpp"
#include "gpsurr/format.hpp"
#include "gpsurr/kernel.hpp"

namespace gpsurr {

inline constexpr double kNoiseFloor = 1e-12;
inline constexpr double kJitterStart = 1e-10;
inline constexpr double kJitterMax = 1e-4;

/// Lower Cholesky factor of K + noise I, escalating diagonal jitter on failure.
struct Factorization {
    Matrix lower;
    /// Diagonal jitter that was needed on top of the noise (0 when none).
    double jitter = 0.0;
};

inline Factorization factorize(const Matrix &K, double noise_variance) {
    const Eigen::Index n = K.rows();
    const double mean_diag = K.diagonal().mean();
    double jitter = 0.0;
    for (;;) {
        Matrix A = K;
        A.diagonal().array() += noise_variance + jitter;
        Eigen::LLT<Matrix> llt(A);
        if (llt.info() == Eigen::Success) {
            Matrix L = llt.matrixL();
            bool ok = L.allFinite();
            for (Eigen::Index i = 0; ok && i < n; ++i) ok = L(i, i) > 0.0;
            if (ok) return {std::move(L), jitter};
        }
        jitter = jitter == 0.0 ? kJitterStart * mean_diag : jitter * 10.0;
        if (!(jitter <= kJitterMax * mean_diag * (1.0 + 1e-9))) {
            throw NumericalError("Cholesky factorization failed after jitter escalation up to " +
                                 format_double(jitter / 10.0) + " (noise variance " + format_double(noise_variance) +
                                 ")");
        }
    }
}

/// log p(y | X) and its gradient in log-hyperparameter space,
/// ordered [log sigma_f, log length_scales..., log rq_alpha?, log sigma_n].
struct LmlResult {
    double value = 0.0;
    Vector gradient;
};

namespace detail {

struct LmlWork {
    LmlResult result;
    Factorization fact;
    Vector alpha;
};

/// Fills w.result.gradient from the factorization already held in `w`.
inline void add_lml_gradient(LmlWork &w, const KernelSpec &kernel, double noise_variance, const Matrix &X) {
    const Eigen::Index n = X.rows();
    const Eigen::Index d = kernel.dim();
    const auto L = std::as_const(w.fact.lower).triangularView<Eigen::Lower>();

    // Lower triangle of (K + s2 I)^-1 via L^-T L^-1.
    Matrix Linv = L.solve(Matrix::Identity(n, n));
    Matrix Kinv = Matrix::Zero(n, n);
    Kinv.selfadjointView<Eigen::Lower>().rankUpdate(Linv.transpose());

    const bool rq = kernel.family == KernelFamily::RationalQuadratic;
    const double s2 = kernel.sigma_f * kernel.sigma_f;
    const double a = rq ? *kernel.rq_alpha : 0.0;
    const Eigen::Index np = kernel.num_params();
    Vector g = Vector::Zero(np + 1);
    std::vector<double> scaled(static_cast<std::size_t>(d));
    double trace_q = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = j; i < n; ++i) {
            // Q = alpha alpha^T - Kinv; dLML/dp = 1/2 sum_ij Q_ij dK_ij
            const double q = w.alpha(i) * w.alpha(j) - Kinv(i, j);
            const double wq = (i == j ? 0.5 : 1.0) * q;
            double r2 = 0.0;
            for (Eigen::Index k = 0; k < d; ++k) {
                const double t = (X(i, k) - X(j, k)) / kernel.length_scales[static_cast<std::size_t>(k)];
                scaled[static_cast<std::size_t>(k)] = t * t;
                r2 += t * t;
            }
            const double kv = detail::kernel_from_sqdist(kernel, r2);
            g(0) += wq * 2.0 * kv;
            const double ls_factor = rq ? s2 * std::pow(1.0 + r2 / (2.0 * a), -a - 1.0) : kv;
            for (Eigen::Index k = 0; k < d; ++k) g(1 + k) += wq * ls_factor * scaled[static_cast<std::size_t>(k)];
            if (rq) {
                const double base = 1.0 + r2 / (2.0 * a);
                g(1 + d) += wq * kv * (-a * std::log(base) + r2 / (2.0 * base));
            }
            if (i == j) trace_q += q;
        }
    }
    // d(s2 I)/d log sigma_n = 2 s2 I
    g(np) = 0.5 * trace_q * 2.0 * noise_variance;
    w.result.gradient = std::move(g);
}

inline LmlWork lml_with_state(const KernelSpec &kernel, double noise_variance, const Matrix &X, const Vector &y,
                              bool want_gradient) {
    const Eigen::Index n = X.rows();
    const Matrix K = kernel_matrix(kernel, X);
    LmlWork w;
    w.fact = factorize(K, noise_variance);
    const auto L = std::as_const(w.fact.lower).triangularView<Eigen::Lower>();
    w.alpha = L.transpose().solve(L.solve(y));

    const double quad = y.dot(w.alpha);
    const double logdet_half = w.fact.lower.diagonal().array().log().sum();
    w.result.value = -0.5 * quad - logdet_half - 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
    if (want_gradient) add_lml_gradient(w, kernel, noise_variance, X);
    return w;
}

} // namespace detail

/// Log marginal likelihood of standardized targets y at inputs X.
inline LmlResult log_marginal_likelihood(const KernelSpec &kernel, double noise_variance, const Matrix &X,
                                         const Vector &y) {
    kernel.validate();
    if (X.rows() != y.size()) throw InvalidArgument("X and y differ in row count");
    if (X.rows() == 0) throw InvalidArgument("log_marginal_likelihood: no data");
    if (!(noise_variance > 0.0)) throw InvalidArgument("noise variance must be positive");
    return detail::lml_with_state(kernel, noise_variance, X, y, true).result;
}

struct OptConfig {
    int max_iters = 100;
    /// Convergence threshold on the infinity norm of the projected gradient.
    double tolerance = 1e-3;
    /// Random initializations in addition to the caller's initial point.
    int restarts = 3;
    std::uint64_t seed = 0;
};

struct FitReport {
    double lml = 0.0;
    int iterations = 0;
    bool converged = false;
    /// Final LML of every start, caller's init first.
    std::vector<double> start_lmls;
};

struct GprModel {
    KernelSpec kernel;
    double noise_variance = 1.0;
    Matrix train_inputs;
    Vector train_targets;
    Matrix chol_factor;
    Vector dual_coeffs;
    Standardizer standardizer;
    double prior_mean_const = 0.0;
    std::vector<std::string> feature_names;
    std::string target_name;
    FitReport report;

    [[nodiscard]] Eigen::Index dim() const { return train_inputs.cols(); }
    [[nodiscard]] Eigen::Index size() const { return train_inputs.rows(); }

    /// Natural-units prior mean (targets revert to this far from data).
    [[nodiscard]] double prior_mean() const { return standardizer.invert_target(prior_mean_const); }

    [[nodiscard]] Eigen::Index feature_index(const std::string &name) const {
        auto it = std::find(feature_names.begin(), feature_names.end(), name);
        if (it == feature_names.end()) throw InvalidArgument("unknown feature '" + name + "'");
        return static_cast<Eigen::Index>(it - feature_names.begin());
    }
};

/// Posterior predictive at one point, natural units.
struct Prediction {
    double mean = 0.0;
    double variance = 0.0;
};

namespace detail {

/// Smallest positive gap between distinct values of each column (0 if the column is constant).
inline Vector min_spacing(const Matrix &X) {
    Vector gap = Vector::Zero(X.cols());
    for (Eigen::Index k = 0; k < X.cols(); ++k) {
        std::vector<double> v(X.col(k).begin(), X.col(k).end());
        std::sort(v.begin(), v.end());
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 1; i < v.size(); ++i) {
            if (v[i] > v[i - 1]) best = std::min(best, v[i] - v[i - 1]);
        }
        if (std::isfinite(best)) gap(k) = best;
    }
    return gap;
}

/// Bounds in log space: [sigma_f, length_scales..., rq_alpha?, sigma_n]. A length scale may not
/// drop below its input's grid spacing: on gridded inputs the likelihood cannot tell shorter scales
/// apart, and a collapsed scale turns every grid value into an unrelated function.
inline std::pair<Vector, Vector> log_param_bounds(const KernelSpec &kernel, const Vector &spacing) {
    const Eigen::Index np = kernel.num_params();
    Vector lo(np + 1), hi(np + 1);
    lo(0) = std::log(1e-3);
    hi(0) = std::log(1e3);
    for (Eigen::Index k = 0; k < kernel.dim(); ++k) {
        lo(1 + k) = std::log(std::clamp(spacing(k), 1e-3, 1e2));
        hi(1 + k) = std::log(1e4);
    }
    if (kernel.family == KernelFamily::RationalQuadratic) {
        lo(np - 1) = std::log(1e-3);
        hi(np - 1) = std::log(1e6);
    }
    lo(np) = 0.5 * std::log(kNoiseFloor);
    hi(np) = std::log(10.0);
    return {lo, hi};
}

inline Vector project(const Vector &p, const Vector &lo, const Vector &hi) {
    return p.cwiseMax(lo).cwiseMin(hi);
}

/// Gradient components that would push a bound-active coordinate outward are zeroed.
inline Vector projected_gradient(const Vector &p, const Vector &g, const Vector &lo, const Vector &hi) {
    Vector pg = g;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        if ((p(i) <= lo(i) && g(i) < 0.0) || (p(i) >= hi(i) && g(i) > 0.0)) pg(i) = 0.0;
    }
    return pg;
}

struct AscentResult {
    Vector params;
    double value = -std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
};

inline std::string describe_state(const KernelSpec &kernel, const Vector &p) {
    std::string s;
    const auto names = kernel.param_names();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        const std::string name = i < static_cast<Eigen::Index>(names.size()) ? names[static_cast<std::size_t>(i)]
                                                                              : std::string("sigma_n");
        s += (i ? ", " : "") + name + "=" + format_double(std::exp(p(i)));
    }
    return s;
}

/// Projected L-BFGS ascent with Armijo backtracking, in log-hyperparameter space.
inline AscentResult maximize_lml(const KernelSpec &shape, const Matrix &X, const Vector &y, Vector p,
                                 const OptConfig &cfg) {
    const auto [lo, hi] = log_param_bounds(shape, min_spacing(X));
    const Eigen::Index np = shape.num_params();
    auto kernel_at = [&](const Vector &q) { return shape.with_log_params(q.head(np)); };
    auto noise_at = [&](const Vector &q) { return std::max(std::exp(2.0 * q(np)), kNoiseFloor); };
    // Trial points only need the value; the gradient is added once a step is accepted.
    auto evaluate = [&](const Vector &q, bool grad) -> std::optional<LmlWork> {
        try {
            LmlWork w = lml_with_state(kernel_at(q), noise_at(q), X, y, grad);
            if (!std::isfinite(w.result.value) || (grad && !w.result.gradient.allFinite())) return std::nullopt;
            return w;
        } catch (const NumericalError &) {
            return std::nullopt;
        }
    };
    auto with_gradient = [&](LmlWork w, const Vector &q) -> std::optional<LmlResult> {
        add_lml_gradient(w, kernel_at(q), noise_at(q), X);
        if (!w.result.gradient.allFinite()) return std::nullopt;
        return std::move(w.result);
    };

    p = project(p, lo, hi);
    std::optional<LmlResult> cur;
    if (auto w = evaluate(p, true)) cur = std::move(w->result);
    if (!cur) {
        throw NumericalError("optimizer diverged: log marginal likelihood is not finite at " +
                             describe_state(shape, p));
    }
    AscentResult res;
    std::deque<std::pair<Vector, Vector>> history; // (s, y) pairs for the descent-form of -LML
    constexpr std::size_t kHistory = 8;
    for (res.iterations = 0; res.iterations < cfg.max_iters; ++res.iterations) {
        const Vector pg = projected_gradient(p, cur->gradient, lo, hi);
        if (pg.lpNorm<Eigen::Infinity>() < cfg.tolerance) {
            res.converged = true;
            break;
        }
        // Two-loop recursion on f = -LML with gradient -g.
        Vector q = -pg;
        std::vector<double> alphas(history.size());
        for (std::size_t i = history.size(); i-- > 0;) {
            const auto &[s, yv] = history[i];
            alphas[i] = s.dot(q) / yv.dot(s);
            q -= alphas[i] * yv;
        }
        if (!history.empty()) {
            const auto &[s, yv] = history.back();
            q *= s.dot(yv) / yv.dot(yv);
        }
        for (std::size_t i = 0; i < history.size(); ++i) {
            const auto &[s, yv] = history[i];
            const double b = yv.dot(q) / yv.dot(s);
            q += (alphas[i] - b) * s;
        }
        Vector dir = -q;
        if (dir.dot(pg) <= 0.0) {
            dir = pg;
            history.clear();
        }
        // Cap the largest log-space move to keep trial points sane.
        const double max_move = dir.lpNorm<Eigen::Infinity>();
        double step = max_move > 2.0 ? 2.0 / max_move : 1.0;
        if (history.empty() && max_move > 0.0) step = std::min(step, 0.5 / max_move);

        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt, step *= 0.5) {
            const Vector trial = project(p + step * dir, lo, hi);
            const Vector move = trial - p;
            if (move.lpNorm<Eigen::Infinity>() < 1e-14) break;
            auto trial_work = evaluate(trial, false);
            if (!trial_work || trial_work->result.value < cur->value + 1e-4 * pg.dot(move)) continue;
            auto next = with_gradient(std::move(*trial_work), trial);
            if (next) {
                const Vector yv = -(next->gradient - cur->gradient);
                if (move.dot(yv) > 1e-12) {
                    history.emplace_back(move, yv);
                    if (history.size() > kHistory) history.pop_front();
                }
                p = trial;
                cur = std::move(next);
                accepted = true;
                break;
            }
        }
        if (!accepted) {
            if (history.empty()) break; // steepest ascent cannot improve: stationary to working precision
            history.clear();
        }
    }
    if (!res.converged && res.iterations < cfg.max_iters) {
        res.converged = projected_gradient(p, cur->gradient, lo, hi).lpNorm<Eigen::Infinity>() < cfg.tolerance;
    }
    res.params = p;
    res.value = cur->value;
    return res;
}

inline void finalize(GprModel &m) {
    const Matrix K = kernel_matrix(m.kernel, m.train_inputs);
    Factorization f = factorize(K, m.noise_variance);
    m.noise_variance += f.jitter;
    m.chol_factor = std::move(f.lower);
    const auto L = std::as_const(m.chol_factor).triangularView<Eigen::Lower>();
    m.dual_coeffs = L.transpose().solve(L.solve(m.train_targets));
}

} // namespace detail

/// Fits an exact GP: standardizes the data, then maximizes the log marginal
/// likelihood from `init` (standardized units) and `restarts` random starts.
inline GprModel fit(const FlatDataset &data, const KernelSpec &init, double init_noise, const OptConfig &cfg = {}) {
    if (data.rows() == 0) throw DataError("fit: empty dataset");
    data.validate();
    init.validate();
    if (init.dim() != data.dim()) {
        throw InvalidArgument("dimension mismatch: kernel has " + std::to_string(init.dim()) +
                              " length scales, data has " + std::to_string(data.dim()) + " features");
    }
    if (!(init_noise > 0.0) || !std::isfinite(init_noise)) throw InvalidArgument("init_noise must be positive");
    if (cfg.max_iters < 0 || cfg.restarts < 0) throw InvalidArgument("max_iters and restarts must be >= 0");

    GprModel m;
    m.standardizer = standardize_fit(data);
    m.train_inputs = m.standardizer.apply_rows(data.inputs);
    m.train_targets = m.standardizer.apply_targets(data.targets);
    m.feature_names = data.feature_names;
    m.target_name = data.target_name;
    m.kernel = init;
    m.noise_variance = std::max(init_noise, kNoiseFloor);

    if (cfg.max_iters == 0) {
        detail::finalize(m);
        m.report.lml = log_marginal_likelihood(m.kernel, m.noise_variance, m.train_inputs, m.train_targets).value;
        m.report.start_lmls = {m.report.lml};
        return m;
    }

    const Eigen::Index np = init.num_params();
    std::vector<Vector> starts;
    Vector p0(np + 1);
    p0.head(np) = init.log_params();
    p0(np) = 0.5 * std::log(m.noise_variance);
    starts.push_back(p0);
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto log_uniform = [&](double lo, double hi) { return std::log(lo) + u01(rng) * (std::log(hi) - std::log(lo)); };
    for (int r = 0; r < cfg.restarts; ++r) {
        Vector p(np + 1);
        for (Eigen::Index i = 0; i < np; ++i) p(i) = log_uniform(0.1, 10.0);
        p(np) = 0.5 * log_uniform(1e-6, 1e-1);
        starts.push_back(p);
    }

    std::optional<detail::AscentResult> best;
    for (const auto &s : starts) {
        detail::AscentResult r;
        try {
            r = detail::maximize_lml(init, m.train_inputs, m.train_targets, s, cfg);
        } catch (const NumericalError &) {
            if (&s == &starts.front()) throw;
            m.report.start_lmls.push_back(-std::numeric_limits<double>::infinity());
            continue;
        }
        m.report.start_lmls.push_back(r.value);
        if (!best || r.value > best->value) best = std::move(r);
    }
    m.kernel = init.with_log_params(best->params.head(np));
    m.noise_variance = std::max(std::exp(2.0 * best->params(np)), kNoiseFloor);
    m.report.lml = best->value;
    m.report.iterations = best->iterations;
    m.report.converged = best->converged;
    detail::finalize(m);
    return m;
}

/// Posterior predictive in standardized units; variance includes the noise term.
template <typename Derived>
Prediction predict_standardized(const GprModel &m, const Eigen::MatrixBase<Derived> &z) {
    const Vector k = kernel_cross(m.kernel, m.train_inputs, z);
    const double mean = m.prior_mean_const + k.dot(m.dual_coeffs);
    const Vector v = m.chol_factor.triangularView<Eigen::Lower>().solve(k);
    const double prior = m.kernel.sigma_f * m.kernel.sigma_f;
    const double var = std::max(prior - v.squaredNorm(), 0.0) + m.noise_variance;
    return {mean, var};
}

template <typename Derived>
Prediction predict(const GprModel &m, const Eigen::MatrixBase<Derived> &xstar) {
    if (xstar.size() != m.dim()) {
        throw InvalidArgument("dimension mismatch: model expects " + std::to_string(m.dim()) + " features, got " +
                              std::to_string(xstar.size()));
    }
    if (!xstar.allFinite()) throw InvalidArgument("prediction input contains non-finite values");
    const Vector z = m.standardizer.apply(xstar);
    const Prediction p = predict_standardized(m, z);
    const double sy = m.standardizer.target_scale;
    return {m.standardizer.invert_target(p.mean), p.variance * sy * sy};
}

/// Means and variances for many rows at once (natural units).
inline std::pair<Vector, Vector> predict_batch(const GprModel &m, const Matrix &X) {
    if (X.cols() != m.dim()) {
        throw InvalidArgument("dimension mismatch: model expects " + std::to_string(m.dim()) + " features, got " +
                              std::to_string(X.cols()));
    }
    const Matrix Z = m.standardizer.apply_rows(X);
    Matrix Ks(m.size(), Z.rows());
    for (Eigen::Index r = 0; r < Z.rows(); ++r) Ks.col(r) = kernel_cross(m.kernel, m.train_inputs, Z.row(r));
    const Vector mean_s = (Ks.transpose() * m.dual_coeffs).array() + m.prior_mean_const;
    const Matrix V = m.chol_factor.triangularView<Eigen::Lower>().solve(Ks);
    const double prior = m.kernel.sigma_f * m.kernel.sigma_f;
    const double sy = m.standardizer.target_scale;
    Vector var = ((prior - V.colwise().squaredNorm().array()).max(0.0) + m.noise_variance) * sy * sy;
    return {m.standardizer.invert_targets(mean_s), var};
}

struct ProfileWithCI {
    std::vector<double> sweep_values;
    std::vector<double> means;
    std::vector<double> variances;
    std::vector<double> ci_lower;
    std::vector<double> ci_upper;
    double z = 2.0;
};

/// Assembles a feature vector in model order from named values plus one sweep feature.
inline Vector assemble_features(const std::vector<std::string> &feature_names,
                                const std::map<std::string, double> &fixed, const std::string &sweep_feature) {
    if (std::find(feature_names.begin(), feature_names.end(), sweep_feature) == feature_names.end()) {
        throw InvalidArgument("unknown sweep feature '" + sweep_feature + "'");
    }
    Vector x(static_cast<Eigen::Index>(feature_names.size()));
    std::vector<std::string> missing;
    for (std::size_t k = 0; k < feature_names.size(); ++k) {
        if (feature_names[k] == sweep_feature) {
            x(static_cast<Eigen::Index>(k)) = 0.0;
            continue;
        }
        auto it = fixed.find(feature_names[k]);
        if (it == fixed.end()) {
            missing.push_back(feature_names[k]);
            continue;
        }
        if (!std::isfinite(it->second)) throw InvalidArgument("feature '" + it->first + "' is not finite");
        x(static_cast<Eigen::Index>(k)) = it->second;
    }
    if (!missing.empty()) {
        std::string msg = "missing feature(s):";
        for (const auto &n : missing) msg += " " + n;
        throw InvalidArgument(msg);
    }
    for (const auto &[name, v] : fixed) {
        if (name != sweep_feature &&
            std::find(feature_names.begin(), feature_names.end(), name) == feature_names.end()) {
            throw InvalidArgument("unknown feature '" + name + "'");
        }
    }
    return x;
}

inline CellDesign design_from_features(const std::map<std::string, double> &fixed) {
    CellDesign d;
    for (const auto &[name, v] : fixed) {
        if (is_design_feature(name)) d.set(name, v);
    }
    return d;
}

inline std::map<std::string, double> features_from_design(const CellDesign &design) {
    std::map<std::string, double> out;
    const auto v = design.values();
    for (std::size_t i = 0; i < v.size(); ++i) out[kDesignFeatureNames[i]] = v[i];
    return out;
}

/// One prediction per grid value of sweep_feature, other features held fixed.
inline ProfileWithCI predict_profile(const GprModel &m, const std::map<std::string, double> &fixed,
                                     const std::string &sweep_feature, const std::vector<double> &grid,
                                     double z = 2.0) {
    if (grid.empty()) throw InvalidArgument("sweep grid is empty");
    if (!std::isfinite(z) || z < 0.0) throw InvalidArgument("z must be finite and >= 0");
    for (double g : grid) {
        if (!std::isfinite(g)) throw InvalidArgument("sweep grid contains non-finite values");
    }
    Vector x = assemble_features(m.feature_names, fixed, sweep_feature);
    const Eigen::Index s = m.feature_index(sweep_feature);
    ProfileWithCI out;
    out.z = z;
    for (double g : grid) {
        x(s) = g;
        const Prediction p = predict(m, x);
        const double half = z * std::sqrt(p.variance);
        out.sweep_values.push_back(g);
        out.means.push_back(p.mean);
        out.variances.push_back(p.variance);
        out.ci_lower.push_back(p.mean - half);
        out.ci_upper.push_back(p.mean + half);
    }
    return out;
}

/// count points from start to stop inclusive; endpoints are exact.
inline std::vector<double> linspace(double start, double stop, std::size_t count) {
    if (count == 0) throw InvalidArgument("linspace count must be >= 1");
    if (count == 1) return {start};
    std::vector<double> v(count);
    const double step = (stop - start) / static_cast<double>(count - 1);
    for (std::size_t i = 0; i < count; ++i) v[i] = start + step * static_cast<double>(i);
    v.back() = stop;
    return v;
}

} // namespace gpsurr
