#pragma once

#include <cmath>

#include <Eigen/Dense>

#include "gpsurr/error.hpp"

namespace gpsurr {

/// Coefficient of determination, 1 - SS_res / SS_tot.
inline double r2_score(const Eigen::VectorXd &truth, const Eigen::VectorXd &pred) {
    if (truth.size() != pred.size() || truth.size() == 0) throw InvalidArgument("r2_score: size mismatch or empty");
    const double ss_res = (truth - pred).squaredNorm();
    const double ss_tot = (truth.array() - truth.mean()).square().sum();
    return ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
}

inline double rmse(const Eigen::VectorXd &truth, const Eigen::VectorXd &pred) {
    if (truth.size() != pred.size() || truth.size() == 0) throw InvalidArgument("rmse: size mismatch or empty");
    return std::sqrt((truth - pred).squaredNorm() / static_cast<double>(truth.size()));
}

} // namespace gpsurr
