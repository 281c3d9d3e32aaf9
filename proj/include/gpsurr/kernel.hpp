#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpsurr/error.hpp"

namespace gpsurr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class KernelFamily { SquaredExponential, RationalQuadratic };

inline std::string to_string(KernelFamily family) {
    return family == KernelFamily::SquaredExponential ? "se" : "rq";
}

inline KernelFamily kernel_family_from_string(const std::string &name) {
    if (name == "se") return KernelFamily::SquaredExponential;
    if (name == "rq") return KernelFamily::RationalQuadratic;
    throw InvalidArgument("unknown kernel family '" + name + "' (expected 'se' or 'rq')");
}

/// Stationary kernel with one length scale per input feature.
///
/// Squared exponential:   k = sigma_f^2 exp(-r^2 / 2)
/// Rational quadratic:    k = sigma_f^2 (1 + r^2 / (2 alpha))^(-alpha)
/// with r^2 = sum_k ((x_k - x2_k) / length_scale_k)^2.
///
/// Hyperparameters are exposed in log space in the order
/// [sigma_f, length_scales..., rq_alpha?].
struct KernelSpec {
    KernelFamily family = KernelFamily::SquaredExponential;
    double sigma_f = 1.0;
    std::vector<double> length_scales;
    std::optional<double> rq_alpha;

    static KernelSpec squared_exponential(double sigma_f, std::vector<double> length_scales) {
        KernelSpec spec{KernelFamily::SquaredExponential, sigma_f, std::move(length_scales), std::nullopt};
        spec.validate();
        return spec;
    }

    static KernelSpec rational_quadratic(double sigma_f, std::vector<double> length_scales, double alpha) {
        KernelSpec spec{KernelFamily::RationalQuadratic, sigma_f, std::move(length_scales), alpha};
        spec.validate();
        return spec;
    }

    [[nodiscard]] Eigen::Index dim() const { return static_cast<Eigen::Index>(length_scales.size()); }

    [[nodiscard]] Eigen::Index num_params() const {
        return 1 + dim() + (family == KernelFamily::RationalQuadratic ? 1 : 0);
    }

    void validate() const {
        if (!(sigma_f > 0.0) || !std::isfinite(sigma_f)) {
            throw InvalidArgument("kernel sigma_f must be positive and finite");
        }
        if (length_scales.empty()) {
            throw InvalidArgument("kernel needs at least one length scale");
        }
        for (double l : length_scales) {
            if (!(l > 0.0) || !std::isfinite(l)) {
                throw InvalidArgument("kernel length scales must be positive and finite");
            }
        }
        if (family == KernelFamily::RationalQuadratic) {
            if (!rq_alpha || !(*rq_alpha > 0.0) || !std::isfinite(*rq_alpha)) {
                throw InvalidArgument("rational quadratic kernel needs a positive rq_alpha");
            }
        } else if (rq_alpha) {
            throw InvalidArgument("rq_alpha is only valid for the rational quadratic kernel");
        }
    }

    [[nodiscard]] Vector log_params() const {
        Vector p(num_params());
        p(0) = std::log(sigma_f);
        for (Eigen::Index k = 0; k < dim(); ++k) p(1 + k) = std::log(length_scales[k]);
        if (family == KernelFamily::RationalQuadratic) p(1 + dim()) = std::log(*rq_alpha);
        return p;
    }

    [[nodiscard]] KernelSpec with_log_params(const Eigen::Ref<const Vector> &p) const {
        if (p.size() != num_params()) {
            throw InvalidArgument("expected " + std::to_string(num_params()) + " log hyperparameters, got " +
                                  std::to_string(p.size()));
        }
        KernelSpec out = *this;
        out.sigma_f = std::exp(p(0));
        for (Eigen::Index k = 0; k < dim(); ++k) out.length_scales[k] = std::exp(p(1 + k));
        if (family == KernelFamily::RationalQuadratic) out.rq_alpha = std::exp(p(1 + dim()));
        return out;
    }

    [[nodiscard]] std::vector<std::string> param_names() const {
        std::vector<std::string> names{"sigma_f"};
        for (Eigen::Index k = 0; k < dim(); ++k) names.push_back("length_scale[" + std::to_string(k) + "]");
        if (family == KernelFamily::RationalQuadratic) names.emplace_back("rq_alpha");
        return names;
    }

    bool operator==(const KernelSpec &) const = default;
};

namespace detail {

inline void check_dim(const KernelSpec &spec, Eigen::Index got) {
    if (got != spec.dim()) {
        throw InvalidArgument("dimension mismatch: kernel has " + std::to_string(spec.dim()) +
                              " length scales but input has " + std::to_string(got) + " features");
    }
}

template <typename A, typename B>
double scaled_sqdist(const KernelSpec &spec, const A &x, const B &x2) {
    double r2 = 0.0;
    for (Eigen::Index k = 0; k < spec.dim(); ++k) {
        const double d = (x[k] - x2[k]) / spec.length_scales[k];
        r2 += d * d;
    }
    return r2;
}

inline double kernel_from_sqdist(const KernelSpec &spec, double r2) {
    const double s2 = spec.sigma_f * spec.sigma_f;
    if (spec.family == KernelFamily::SquaredExponential) return s2 * std::exp(-0.5 * r2);
    const double a = *spec.rq_alpha;
    return s2 * std::pow(1.0 + r2 / (2.0 * a), -a);
}

} // namespace detail

/// k(x, x2). Symmetric in its arguments.
template <typename A, typename B>
double kernel_eval(const KernelSpec &spec, const Eigen::MatrixBase<A> &x, const Eigen::MatrixBase<B> &x2) {
    if (x.size() != x2.size()) {
        throw InvalidArgument("dimension mismatch: x has " + std::to_string(x.size()) + " features, x2 has " +
                              std::to_string(x2.size()));
    }
    detail::check_dim(spec, x.size());
    return detail::kernel_from_sqdist(spec, detail::scaled_sqdist(spec, x.derived(), x2.derived()));
}

/// Gram matrix over the rows of X. Each off-diagonal pair is computed once and mirrored.
inline Matrix kernel_matrix(const KernelSpec &spec, const Eigen::Ref<const Matrix> &X) {
    detail::check_dim(spec, X.cols());
    const Eigen::Index n = X.rows();
    const double diag = spec.sigma_f * spec.sigma_f;
    Matrix K(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        K(j, j) = diag;
        for (Eigen::Index i = j + 1; i < n; ++i) {
            const double v = detail::kernel_from_sqdist(spec, detail::scaled_sqdist(spec, X.row(i), X.row(j)));
            K(i, j) = v;
            K(j, i) = v;
        }
    }
    return K;
}

/// Cross-covariance between the rows of X and a single query point.
template <typename B>
Vector kernel_cross(const KernelSpec &spec, const Eigen::Ref<const Matrix> &X, const Eigen::MatrixBase<B> &xstar) {
    detail::check_dim(spec, X.cols());
    detail::check_dim(spec, xstar.size());
    Vector k(X.rows());
    for (Eigen::Index j = 0; j < X.rows(); ++j) {
        k(j) = detail::kernel_from_sqdist(spec, detail::scaled_sqdist(spec, xstar.derived(), X.row(j)));
    }
    return k;
}

/// dK/d(log h) for each hyperparameter h, ordered like KernelSpec::log_params().
inline std::vector<Matrix> kernel_matrix_grads(const KernelSpec &spec, const Eigen::Ref<const Matrix> &X) {
    detail::check_dim(spec, X.cols());
    const Eigen::Index n = X.rows();
    const Eigen::Index d = spec.dim();
    const double s2 = spec.sigma_f * spec.sigma_f;
    const bool rq = spec.family == KernelFamily::RationalQuadratic;
    const double a = rq ? *spec.rq_alpha : 0.0;

    std::vector<Matrix> grads(static_cast<std::size_t>(spec.num_params()), Matrix::Zero(n, n));
    std::vector<double> scaled(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = j; i < n; ++i) {
            double r2 = 0.0;
            for (Eigen::Index k = 0; k < d; ++k) {
                const double t = (X(i, k) - X(j, k)) / spec.length_scales[k];
                scaled[k] = t * t;
                r2 += scaled[k];
            }
            const double kv = detail::kernel_from_sqdist(spec, r2);
            // dK/dr2 * (-2) gives the common factor for length-scale derivatives.
            const double ls_factor = rq ? s2 * std::pow(1.0 + r2 / (2.0 * a), -a - 1.0) : kv;

            auto put = [&](std::size_t p, double v) {
                grads[p](i, j) = v;
                grads[p](j, i) = v;
            };
            put(0, 2.0 * kv);
            for (Eigen::Index k = 0; k < d; ++k) put(1 + k, ls_factor * scaled[k]);
            if (rq) {
                const double base = 1.0 + r2 / (2.0 * a);
                put(1 + d, kv * (-a * std::log(base) + r2 / (2.0 * base)));
            }
        }
    }
    return grads;
}

inline void to_json(nlohmann::json &j, const KernelSpec &spec) {
    j = nlohmann::json{{"family", to_string(spec.family)},
                       {"sigma_f", spec.sigma_f},
                       {"length_scales", spec.length_scales}};
    if (spec.rq_alpha) j["rq_alpha"] = *spec.rq_alpha;
}

inline void from_json(const nlohmann::json &j, KernelSpec &spec) {
    spec.family = kernel_family_from_string(j.at("family").get<std::string>());
    spec.sigma_f = j.at("sigma_f").get<double>();
    spec.length_scales = j.at("length_scales").get<std::vector<double>>();
    spec.rq_alpha.reset();
    if (j.contains("rq_alpha") && !j.at("rq_alpha").is_null()) spec.rq_alpha = j.at("rq_alpha").get<double>();
    spec.validate();
}

} // namespace gpsurr
