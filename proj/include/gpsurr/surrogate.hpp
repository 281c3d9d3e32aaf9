#pragma once

// Model-kind-agnostic prediction helpers shared by the CLI and the service,
// so both produce identical numbers for identical requests.

#include <algorithm>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpsurr/format.hpp"
#include "gpsurr/model_io.hpp"

namespace gpsurr {

/// Point prediction; baselines report no variance.
struct AnyPrediction {
    double mean = 0.0;
    std::optional<double> variance;
};

inline AnyPrediction predict_any(const AnyModel &m, const Vector &x) {
    if (const auto *g = std::get_if<GprModel>(&m)) {
        const Prediction p = predict(*g, x);
        return {p.mean, p.variance};
    }
    if (!x.allFinite()) throw InvalidArgument("prediction input contains non-finite values");
    if (const auto *f = std::get_if<ForestModel>(&m)) return {rf_predict(*f, x), std::nullopt};
    return {mlp_predict(std::get<MlpModel>(m), x), std::nullopt};
}

/// Profile along one feature. For baselines variances and CI bounds stay empty.
inline ProfileWithCI predict_profile_any(const AnyModel &m, const std::map<std::string, double> &fixed,
                                         const std::string &sweep_feature, const std::vector<double> &grid,
                                         double z = 2.0) {
    if (const auto *g = std::get_if<GprModel>(&m)) return predict_profile(*g, fixed, sweep_feature, grid, z);
    if (grid.empty()) throw InvalidArgument("sweep grid is empty");
    if (!std::isfinite(z) || z < 0.0) throw InvalidArgument("z must be finite and >= 0");
    const auto &names = model_feature_names(m);
    Vector x = assemble_features(names, fixed, sweep_feature);
    const auto s = static_cast<Eigen::Index>(std::find(names.begin(), names.end(), sweep_feature) - names.begin());
    ProfileWithCI out;
    out.z = z;
    for (double v : grid) {
        if (!std::isfinite(v)) throw InvalidArgument("sweep grid contains non-finite values");
        x(s) = v;
        out.sweep_values.push_back(v);
        out.means.push_back(predict_any(m, x).mean);
    }
    return out;
}

/// JSON body of a profile response; empty variance arrays become null.
inline nlohmann::json profile_to_json(const ProfileWithCI &p, const std::string &sweep_feature) {
    nlohmann::json j{{"sweep_feature", sweep_feature}, {"sweep_values", p.sweep_values}, {"means", p.means}, {"z", p.z}};
    const bool has_var = !p.variances.empty();
    j["variances"] = has_var ? nlohmann::json(p.variances) : nlohmann::json(nullptr);
    j["ci_lower"] = has_var ? nlohmann::json(p.ci_lower) : nlohmann::json(nullptr);
    j["ci_upper"] = has_var ? nlohmann::json(p.ci_upper) : nlohmann::json(nullptr);
    return j;
}

/// CSV with a header row; baseline columns without variance are left empty.
/// truth, when non-empty, adds an oracle column.
inline void write_profile_csv(std::ostream &os, const ProfileWithCI &p, const std::string &sweep_feature,
                              const std::vector<double> &truth = {}) {
    os << sweep_feature << ",mean,variance,ci_lower,ci_upper" << (truth.empty() ? "" : ",oracle") << '\n';
    const bool has_var = !p.variances.empty();
    for (std::size_t i = 0; i < p.sweep_values.size(); ++i) {
        os << format_double(p.sweep_values[i]) << ',' << format_double(p.means[i]) << ',';
        if (has_var) {
            os << format_double(p.variances[i]) << ',' << format_double(p.ci_lower[i]) << ','
               << format_double(p.ci_upper[i]);
        } else {
            os << ",,";
        }
        if (!truth.empty()) os << ',' << format_double(truth[i]);
        os << '\n';
    }
}

/// The conventional sweep feature for a model's features, or "" if none applies.
inline std::string default_sweep_feature(const std::vector<std::string> &features) {
    for (const char *name : {"wavelength_nm", "depth_um"}) {
        if (std::find(features.begin(), features.end(), name) != features.end()) return name;
    }
    return "";
}

} // namespace gpsurr
