#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "gpsurr/baselines.hpp"
#include "gpsurr/error.hpp"
#include "gpsurr/gpr.hpp"
#include "gpsurr/sha256.hpp"

// Model files are UTF-8 JSON envelopes:
//   {schema_version, kind, created_at, content_sha256, metadata, ...payload}
// content_sha256 covers every numeric payload value (little-endian IEEE-754
// bit patterns, in a fixed order per kind), so any edit to the numbers is
// detected on load.

namespace gpsurr {

inline constexpr int kModelSchemaVersion = 1;

/// Free-form provenance stored alongside the payload.
struct ModelMetadata {
    std::string sweep_feature;
    std::string config_hash;
    std::uint64_t seed = 0;
};

using AnyModel = std::variant<GprModel, ForestModel, MlpModel>;

inline std::string model_kind(const AnyModel &m) {
    switch (m.index()) {
    case 0: return "gpr";
    case 1: return "rf";
    default: return "mlp";
    }
}

inline const std::vector<std::string> &model_feature_names(const AnyModel &m) {
    return std::visit([](const auto &x) -> const std::vector<std::string> & { return x.feature_names; }, m);
}

inline const std::string &model_target_name(const AnyModel &m) {
    return std::visit([](const auto &x) -> const std::string & { return x.target_name; }, m);
}

namespace detail {

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::vector<double> row_major(const Matrix &m) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
    return out;
}

inline std::vector<double> lower_row_major(const Matrix &m) {
    std::vector<double> out;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j <= i; ++j) out.push_back(m(i, j));
    return out;
}

inline std::vector<double> to_std(const Vector &v) { return {v.data(), v.data() + v.size()}; }

inline Vector to_eigen(const std::vector<double> &v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

[[noreturn]] inline void corrupt(const std::string &what) { throw CorruptFile("corrupt model file: " + what); }

inline Matrix from_row_major(const std::vector<double> &v, Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<Eigen::Index>(v.size()) != rows * cols) corrupt("matrix payload has wrong length");
    Matrix m(rows, cols);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = v[k++];
    return m;
}

inline Matrix from_lower_row_major(const std::vector<double> &v, Eigen::Index n) {
    if (static_cast<Eigen::Index>(v.size()) != n * (n + 1) / 2) corrupt("triangular payload has wrong length");
    Matrix m = Matrix::Zero(n, n);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) m(i, j) = v[k++];
    return m;
}

inline nlohmann::json standardizer_json(const Standardizer &s) {
    return {{"means", to_std(s.means)},
            {"scales", to_std(s.scales)},
            {"target_mean", s.target_mean},
            {"target_scale", s.target_scale}};
}

inline Standardizer standardizer_from_json(const nlohmann::json &j) {
    Standardizer s;
    s.means = to_eigen(j.at("means").get<std::vector<double>>());
    s.scales = to_eigen(j.at("scales").get<std::vector<double>>());
    s.target_mean = j.at("target_mean").get<double>();
    s.target_scale = j.at("target_scale").get<double>();
    s.constant_features.assign(static_cast<std::size_t>(s.means.size()), false);
    if (s.means.size() != s.scales.size()) corrupt("standardizer means/scales length mismatch");
    if (!(s.scales.array() > 0.0).all() || !(s.target_scale > 0.0)) corrupt("standardizer scales must be positive");
    return s;
}

inline void hash_standardizer(Sha256 &h, const Standardizer &s) {
    h.update_all(s.means.reshaped()).update_all(s.scales.reshaped()).update(s.target_mean).update(s.target_scale);
}

inline std::string gpr_content_hash(const GprModel &m) {
    Sha256 h;
    h.update(m.kernel.sigma_f).update_all(m.kernel.length_scales);
    if (m.kernel.rq_alpha) h.update(*m.kernel.rq_alpha);
    h.update(m.noise_variance).update(m.prior_mean_const);
    hash_standardizer(h, m.standardizer);
    h.update_all(row_major(m.train_inputs)).update_all(m.train_targets.reshaped());
    h.update_all(m.dual_coeffs.reshaped()).update_all(lower_row_major(m.chol_factor));
    return h.hex();
}

inline std::string rf_content_hash(const ForestModel &m) {
    Sha256 h;
    for (const auto &t : m.trees) {
        for (const auto &n : t.nodes) {
            h.update(static_cast<double>(n.feature)).update(n.threshold);
            h.update(static_cast<double>(n.left)).update(static_cast<double>(n.right));
            h.update(n.value).update(static_cast<double>(n.count));
        }
    }
    return h.hex();
}

inline std::string mlp_content_hash(const MlpModel &m) {
    Sha256 h;
    for (const auto &l : m.layers) h.update_all(row_major(l.weights)).update_all(l.biases.reshaped());
    hash_standardizer(h, m.standardizer);
    return h.hex();
}

inline nlohmann::json envelope(const std::string &kind, const ModelMetadata &meta,
                               const std::vector<std::string> &features, const std::string &target) {
    return {{"schema_version", kModelSchemaVersion},
            {"kind", kind},
            {"created_at", utc_timestamp()},
            {"feature_names", features},
            {"target_name", target},
            {"metadata",
             {{"sweep_feature", meta.sweep_feature}, {"config_hash", meta.config_hash}, {"seed", meta.seed}}}};
}

} // namespace detail

inline nlohmann::json model_to_json(const GprModel &m, const ModelMetadata &meta = {}) {
    nlohmann::json j = detail::envelope("gpr", meta, m.feature_names, m.target_name);
    j["kernel"] = m.kernel;
    j["noise_variance"] = m.noise_variance;
    j["prior_mean_const"] = m.prior_mean_const;
    j["standardizer"] = detail::standardizer_json(m.standardizer);
    j["n_train"] = m.size();
    j["train_inputs"] = detail::row_major(m.train_inputs);
    j["train_targets"] = detail::to_std(m.train_targets);
    j["dual_coeffs"] = detail::to_std(m.dual_coeffs);
    j["chol_factor"] = detail::lower_row_major(m.chol_factor);
    j["fit"] = {{"lml", m.report.lml}, {"iterations", m.report.iterations}, {"converged", m.report.converged}};
    j["content_sha256"] = detail::gpr_content_hash(m);
    return j;
}

inline nlohmann::json model_to_json(const ForestModel &m, const ModelMetadata &meta = {}) {
    nlohmann::json j = detail::envelope("rf", meta, m.feature_names, m.target_name);
    j["config"] = {{"n_trees", m.config.n_trees},
                   {"max_depth", m.config.max_depth},
                   {"min_leaf", m.config.min_leaf},
                   {"bootstrap", m.config.bootstrap},
                   {"seed", m.config.seed}};
    nlohmann::json trees = nlohmann::json::array();
    for (const auto &t : m.trees) {
        nlohmann::json feature = nlohmann::json::array(), threshold = nlohmann::json::array(),
                       left = nlohmann::json::array(), right = nlohmann::json::array(),
                       value = nlohmann::json::array(), count = nlohmann::json::array();
        for (const auto &n : t.nodes) {
            feature.push_back(n.feature);
            threshold.push_back(n.threshold);
            left.push_back(n.left);
            right.push_back(n.right);
            value.push_back(n.value);
            count.push_back(n.count);
        }
        trees.push_back({{"feature", feature},
                         {"threshold", threshold},
                         {"left", left},
                         {"right", right},
                         {"value", value},
                         {"count", count}});
    }
    j["trees"] = std::move(trees);
    j["content_sha256"] = detail::rf_content_hash(m);
    return j;
}

inline nlohmann::json model_to_json(const MlpModel &m, const ModelMetadata &meta = {}) {
    nlohmann::json j = detail::envelope("mlp", meta, m.feature_names, m.target_name);
    j["config"] = {{"h1", m.config.h1},       {"h2", m.config.h2},     {"epochs", m.config.epochs},
                   {"step", m.config.step},   {"decay", m.config.decay}, {"batch", m.config.batch},
                   {"seed", m.config.seed}};
    j["layer_sizes"] = m.layer_sizes();
    nlohmann::json layers = nlohmann::json::array();
    for (const auto &l : m.layers) {
        layers.push_back({{"weights", detail::row_major(l.weights)}, {"biases", detail::to_std(l.biases)}});
    }
    j["layers"] = std::move(layers);
    j["standardizer"] = detail::standardizer_json(m.standardizer);
    j["content_sha256"] = detail::mlp_content_hash(m);
    return j;
}

inline nlohmann::json model_to_json(const AnyModel &m, const ModelMetadata &meta = {}) {
    return std::visit([&](const auto &x) { return model_to_json(x, meta); }, m);
}

namespace detail {

inline GprModel gpr_from_json(const nlohmann::json &j) {
    GprModel m;
    m.kernel = j.at("kernel").get<KernelSpec>();
    m.noise_variance = j.at("noise_variance").get<double>();
    m.prior_mean_const = j.value("prior_mean_const", 0.0);
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.target_name = j.at("target_name").get<std::string>();
    m.standardizer = standardizer_from_json(j.at("standardizer"));
    const auto n = j.at("n_train").get<Eigen::Index>();
    const auto d = static_cast<Eigen::Index>(m.feature_names.size());
    if (n < 1 || d < 1) corrupt("empty training set");
    if (m.kernel.dim() != d || m.standardizer.means.size() != d) corrupt("feature dimension mismatch");
    m.train_inputs = from_row_major(j.at("train_inputs").get<std::vector<double>>(), n, d);
    m.train_targets = to_eigen(j.at("train_targets").get<std::vector<double>>());
    m.dual_coeffs = to_eigen(j.at("dual_coeffs").get<std::vector<double>>());
    m.chol_factor = from_lower_row_major(j.at("chol_factor").get<std::vector<double>>(), n);
    if (m.train_targets.size() != n || m.dual_coeffs.size() != n) corrupt("vector payload has wrong length");
    if (!(m.noise_variance > 0.0)) corrupt("noise_variance must be positive");
    if (!(m.chol_factor.diagonal().array() > 0.0).all()) corrupt("Cholesky factor has non-positive diagonal");
    if (j.contains("fit")) {
        m.report.lml = j["fit"].value("lml", 0.0);
        m.report.iterations = j["fit"].value("iterations", 0);
        m.report.converged = j["fit"].value("converged", false);
    }
    if (gpr_content_hash(m) != j.at("content_sha256").get<std::string>()) corrupt("content checksum mismatch");
    return m;
}

inline ForestModel rf_from_json(const nlohmann::json &j) {
    ForestModel m;
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.target_name = j.at("target_name").get<std::string>();
    const auto &c = j.at("config");
    m.config.n_trees = c.at("n_trees").get<int>();
    m.config.max_depth = c.at("max_depth").get<int>();
    m.config.min_leaf = c.at("min_leaf").get<int>();
    m.config.bootstrap = c.value("bootstrap", true);
    m.config.seed = c.at("seed").get<std::uint64_t>();
    for (const auto &t : j.at("trees")) {
        RegressionTree tree;
        const auto feature = t.at("feature").get<std::vector<int>>();
        const auto threshold = t.at("threshold").get<std::vector<double>>();
        const auto left = t.at("left").get<std::vector<int>>();
        const auto right = t.at("right").get<std::vector<int>>();
        const auto value = t.at("value").get<std::vector<double>>();
        const auto count = t.at("count").get<std::vector<int>>();
        const std::size_t n = feature.size();
        if (n == 0 || threshold.size() != n || left.size() != n || right.size() != n || value.size() != n ||
            count.size() != n) {
            corrupt("tree arrays differ in length");
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (feature[i] >= static_cast<int>(m.feature_names.size())) corrupt("tree feature index out of range");
            if (feature[i] >= 0 && (left[i] <= static_cast<int>(i) || right[i] <= static_cast<int>(i) ||
                                    left[i] >= static_cast<int>(n) || right[i] >= static_cast<int>(n))) {
                corrupt("tree child index out of range");
            }
            tree.nodes.push_back({feature[i], threshold[i], left[i], right[i], value[i], count[i]});
        }
        m.trees.push_back(std::move(tree));
    }
    if (m.trees.empty()) corrupt("forest has no trees");
    if (rf_content_hash(m) != j.at("content_sha256").get<std::string>()) corrupt("content checksum mismatch");
    return m;
}

inline MlpModel mlp_from_json(const nlohmann::json &j) {
    MlpModel m;
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    m.target_name = j.at("target_name").get<std::string>();
    const auto &c = j.at("config");
    m.config.h1 = c.at("h1").get<int>();
    m.config.h2 = c.at("h2").get<int>();
    m.config.epochs = c.at("epochs").get<int>();
    m.config.step = c.at("step").get<double>();
    m.config.decay = c.at("decay").get<double>();
    m.config.batch = c.at("batch").get<int>();
    m.config.seed = c.at("seed").get<std::uint64_t>();
    const auto sizes = j.at("layer_sizes").get<std::vector<int>>();
    const auto &layers = j.at("layers");
    if (sizes.size() != 4 || layers.size() != 3) corrupt("mlp must have exactly three layers");
    if (sizes.front() != static_cast<int>(m.feature_names.size()) || sizes.back() != 1) {
        corrupt("mlp layer sizes do not match features");
    }
    for (std::size_t k = 0; k < 3; ++k) {
        MlpLayer l;
        l.weights = from_row_major(layers[k].at("weights").get<std::vector<double>>(), sizes[k + 1], sizes[k]);
        l.biases = to_eigen(layers[k].at("biases").get<std::vector<double>>());
        if (l.biases.size() != sizes[k + 1]) corrupt("mlp bias length mismatch");
        m.layers.push_back(std::move(l));
    }
    m.standardizer = standardizer_from_json(j.at("standardizer"));
    if (m.standardizer.means.size() != sizes.front()) corrupt("standardizer width mismatch");
    if (mlp_content_hash(m) != j.at("content_sha256").get<std::string>()) corrupt("content checksum mismatch");
    return m;
}

} // namespace detail

struct LoadedModel {
    AnyModel model;
    ModelMetadata metadata;
    std::string created_at;
    /// SHA-256 of the file bytes.
    std::string file_sha256;
};

inline LoadedModel model_from_json_text(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error &e) {
        throw CorruptFile(std::string("corrupt model file: ") + e.what());
    }
    if (!j.is_object()) detail::corrupt("top level is not an object");
    try {
        if (!j.contains("schema_version")) detail::corrupt("missing schema_version");
        const int version = j.at("schema_version").get<int>();
        if (version != kModelSchemaVersion) {
            throw VersionMismatch("model schema_version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kModelSchemaVersion) + ")");
        }
        LoadedModel out;
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "gpr") {
            out.model = detail::gpr_from_json(j);
        } else if (kind == "rf") {
            out.model = detail::rf_from_json(j);
        } else if (kind == "mlp") {
            out.model = detail::mlp_from_json(j);
        } else {
            detail::corrupt("unknown model kind '" + kind + "'");
        }
        out.created_at = j.value("created_at", "");
        if (j.contains("metadata")) {
            const auto &m = j["metadata"];
            out.metadata.sweep_feature = m.value("sweep_feature", "");
            out.metadata.config_hash = m.value("config_hash", "");
            out.metadata.seed = m.value("seed", std::uint64_t{0});
        }
        out.file_sha256 = sha256_hex(text);
        return out;
    } catch (const nlohmann::json::exception &e) {
        throw CorruptFile(std::string("corrupt model file: ") + e.what());
    } catch (const InvalidArgument &e) {
        throw CorruptFile(std::string("corrupt model file: ") + e.what());
    }
}

inline void save_model(const AnyModel &m, const std::string &path, const ModelMetadata &meta = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << model_to_json(m, meta).dump(1) << '\n';
    if (!os) throw IoError("failed writing '" + path + "'");
}

inline LoadedModel load_any_model(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return model_from_json_text(text);
}

inline void save_model(const GprModel &m, const std::string &path, const ModelMetadata &meta = {}) {
    save_model(AnyModel{m}, path, meta);
}

inline GprModel load_model(const std::string &path) {
    LoadedModel l = load_any_model(path);
    if (auto *g = std::get_if<GprModel>(&l.model)) return std::move(*g);
    throw InvalidArgument("'" + path + "' holds a " + model_kind(l.model) + " model, not a gpr model");
}

} // namespace gpsurr
