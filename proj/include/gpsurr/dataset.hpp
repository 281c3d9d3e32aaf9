#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpsurr/error.hpp"
#include "gpsurr/format.hpp"

namespace gpsurr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr std::array<const char *, 6> kDesignFeatureNames{
    "wafer_thickness_um",        "substrate_doping_cm3", "pyramid_angle_deg",
    "rear_contact_thickness_um", "arc_thickness_nm",     "back_reflectivity_frac"};

inline bool is_design_feature(const std::string &name) {
    return std::find(kDesignFeatureNames.begin(), kDesignFeatureNames.end(), name) != kDesignFeatureNames.end();
}

/// The six optical simulation inputs of a cell.
struct CellDesign {
    double wafer_thickness_um = 180.0;
    double substrate_doping_cm3 = 1e16;
    double pyramid_angle_deg = 54.74;
    double rear_contact_thickness_um = 2.0;
    double arc_thickness_nm = 75.0;
    double back_reflectivity_frac = 0.9;

    [[nodiscard]] std::array<double, 6> values() const {
        return {wafer_thickness_um,        substrate_doping_cm3, pyramid_angle_deg,
                rear_contact_thickness_um, arc_thickness_nm,     back_reflectivity_frac};
    }

    static CellDesign from_values(const std::array<double, 6> &v) {
        return CellDesign{v[0], v[1], v[2], v[3], v[4], v[5]};
    }

    [[nodiscard]] double get(const std::string &name) const {
        const auto v = values();
        for (std::size_t i = 0; i < kDesignFeatureNames.size(); ++i) {
            if (name == kDesignFeatureNames[i]) return v[i];
        }
        throw InvalidArgument("unknown design parameter '" + name + "'");
    }

    void set(const std::string &name, double value) {
        auto v = values();
        for (std::size_t i = 0; i < kDesignFeatureNames.size(); ++i) {
            if (name == kDesignFeatureNames[i]) {
                v[i] = value;
                *this = from_values(v);
                return;
            }
        }
        throw InvalidArgument("unknown design parameter '" + name + "'");
    }

    /// Empty string when valid, otherwise a description of the first violation.
    [[nodiscard]] std::string violation() const {
        auto finite_pos = [](double v) { return std::isfinite(v) && v > 0.0; };
        if (!finite_pos(wafer_thickness_um)) return "wafer_thickness_um must be > 0";
        if (!finite_pos(substrate_doping_cm3)) return "substrate_doping_cm3 must be > 0";
        if (!std::isfinite(pyramid_angle_deg) || pyramid_angle_deg <= 0.0 || pyramid_angle_deg >= 90.0)
            return "pyramid_angle_deg must be in (0, 90)";
        if (!std::isfinite(rear_contact_thickness_um) || rear_contact_thickness_um < 0.0)
            return "rear_contact_thickness_um must be >= 0";
        if (!finite_pos(arc_thickness_nm)) return "arc_thickness_nm must be > 0";
        if (!std::isfinite(back_reflectivity_frac) || back_reflectivity_frac < 0.0 || back_reflectivity_frac > 1.0)
            return "back_reflectivity_frac must be in [0, 1]";
        return {};
    }

    void validate() const {
        if (auto v = violation(); !v.empty()) throw InvalidArgument("invalid cell design: " + v);
    }

    bool operator==(const CellDesign &) const = default;
};

enum class CurveKind { Reflectance, Generation };

inline std::string to_string(CurveKind kind) {
    return kind == CurveKind::Reflectance ? "reflectance" : "generation";
}

inline CurveKind curve_kind_from_string(const std::string &s) {
    if (s == "reflectance") return CurveKind::Reflectance;
    if (s == "generation") return CurveKind::Generation;
    throw InvalidArgument("unknown curve kind '" + s + "'");
}

inline std::string sweep_name(CurveKind kind) {
    return kind == CurveKind::Reflectance ? "wavelength_nm" : "depth_um";
}

/// One simulated curve: a design and its (sweep, value) profile.
struct SimulationRun {
    CellDesign design;
    CurveKind curve_kind = CurveKind::Reflectance;
    std::vector<double> sweep;
    std::vector<double> values;

    [[nodiscard]] std::string violation() const {
        if (auto v = design.violation(); !v.empty()) return v;
        if (sweep.empty()) return "run has no sweep points";
        if (sweep.size() != values.size()) return "sweep and values differ in length";
        for (std::size_t i = 0; i < sweep.size(); ++i) {
            if (!std::isfinite(sweep[i]) || !std::isfinite(values[i])) return "non-finite sweep or value";
            if (i > 0 && !(sweep[i] > sweep[i - 1])) return "sweep is not strictly increasing";
        }
        if (curve_kind == CurveKind::Reflectance) {
            for (double v : values) {
                if (v < 0.0 || v > 1.0) return "reflectance value outside [0, 1]";
            }
        } else {
            for (double v : values) {
                if (v < 0.0) return "negative generation value";
            }
            if (std::abs(sweep.back() - design.wafer_thickness_um) > 1e-9) {
                return "last depth point differs from wafer thickness";
            }
        }
        return {};
    }

    void validate() const {
        if (auto v = violation(); !v.empty()) throw DataError("invalid simulation run: " + v);
    }

    bool operator==(const SimulationRun &) const = default;
};

/// Flattened regression table: one row per (run, sweep point).
struct FlatDataset {
    Matrix inputs;
    Vector targets;
    std::vector<std::string> feature_names;
    std::string target_name;
    /// Source run of each row; used for grouped splitting and regrouping.
    std::vector<std::int64_t> run_index;

    [[nodiscard]] Eigen::Index rows() const { return inputs.rows(); }
    [[nodiscard]] Eigen::Index dim() const { return inputs.cols(); }

    [[nodiscard]] Eigen::Index feature_index(const std::string &name) const {
        auto it = std::find(feature_names.begin(), feature_names.end(), name);
        if (it == feature_names.end()) throw InvalidArgument("unknown feature '" + name + "'");
        return static_cast<Eigen::Index>(it - feature_names.begin());
    }

    void validate() const {
        if (inputs.rows() != targets.size()) throw DataError("inputs and targets differ in row count");
        if (static_cast<Eigen::Index>(feature_names.size()) != inputs.cols())
            throw DataError("feature_names does not match input width");
        if (!run_index.empty() && static_cast<Eigen::Index>(run_index.size()) != inputs.rows())
            throw DataError("run_index does not match row count");
        if (!inputs.allFinite() || !targets.allFinite()) throw DataError("dataset contains non-finite values");
    }

    /// Rows selected by index, preserving the given order.
    [[nodiscard]] FlatDataset take(const std::vector<Eigen::Index> &idx) const {
        FlatDataset out;
        out.feature_names = feature_names;
        out.target_name = target_name;
        out.inputs.resize(static_cast<Eigen::Index>(idx.size()), inputs.cols());
        out.targets.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            out.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(idx[r]);
            out.targets(static_cast<Eigen::Index>(r)) = targets(idx[r]);
            if (!run_index.empty()) out.run_index.push_back(run_index[static_cast<std::size_t>(idx[r])]);
        }
        return out;
    }

    bool operator==(const FlatDataset &o) const {
        return inputs == o.inputs && targets == o.targets && feature_names == o.feature_names &&
               target_name == o.target_name && run_index == o.run_index;
    }
};

/// Runs of sweep length s each contribute s rows: six design values plus the sweep value.
inline FlatDataset flatten(const std::vector<SimulationRun> &runs) {
    if (runs.empty()) throw DataError("flatten: no runs");
    const CurveKind kind = runs.front().curve_kind;
    std::size_t n = 0;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        if (runs[r].curve_kind != kind) throw DataError("flatten: mixed curve kinds (run " + std::to_string(r) + ")");
        if (auto v = runs[r].violation(); !v.empty()) {
            throw DataError("flatten: run " + std::to_string(r) + ": " + v);
        }
        n += runs[r].sweep.size();
    }
    FlatDataset out;
    out.feature_names.assign(kDesignFeatureNames.begin(), kDesignFeatureNames.end());
    out.feature_names.push_back(sweep_name(kind));
    out.target_name = to_string(kind);
    out.inputs.resize(static_cast<Eigen::Index>(n), 7);
    out.targets.resize(static_cast<Eigen::Index>(n));
    out.run_index.reserve(n);
    Eigen::Index row = 0;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto design = runs[r].design.values();
        for (std::size_t s = 0; s < runs[r].sweep.size(); ++s, ++row) {
            for (Eigen::Index k = 0; k < 6; ++k) out.inputs(row, k) = design[static_cast<std::size_t>(k)];
            out.inputs(row, 6) = runs[r].sweep[s];
            out.targets(row) = runs[r].values[s];
            out.run_index.push_back(static_cast<std::int64_t>(r));
        }
    }
    return out;
}

/// Inverse of flatten for an unmodified flattened dataset.
inline std::vector<SimulationRun> regroup(const FlatDataset &data, CurveKind kind) {
    if (data.dim() != 7 || data.run_index.size() != static_cast<std::size_t>(data.rows())) {
        throw DataError("regroup: dataset is not a flattened run table");
    }
    std::vector<SimulationRun> runs;
    std::int64_t current = -1;
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        if (data.run_index[static_cast<std::size_t>(i)] != current) {
            current = data.run_index[static_cast<std::size_t>(i)];
            SimulationRun run;
            run.curve_kind = kind;
            std::array<double, 6> v{};
            for (std::size_t k = 0; k < 6; ++k) v[k] = data.inputs(i, static_cast<Eigen::Index>(k));
            run.design = CellDesign::from_values(v);
            runs.push_back(std::move(run));
        }
        runs.back().sweep.push_back(data.inputs(i, 6));
        runs.back().values.push_back(data.targets(i));
    }
    return runs;
}

/// Per-feature affine map to zero mean and unit (population) standard deviation.
struct Standardizer {
    Vector means;
    Vector scales;
    double target_mean = 0.0;
    double target_scale = 1.0;
    /// Features whose spread was zero; their scale is forced to 1.
    std::vector<bool> constant_features;
    bool constant_target = false;

    [[nodiscard]] bool any_constant() const {
        return constant_target || std::find(constant_features.begin(), constant_features.end(), true) !=
                                      constant_features.end();
    }

    template <typename Derived>
    [[nodiscard]] Vector apply(const Eigen::MatrixBase<Derived> &x) const {
        if (x.size() != means.size()) {
            throw InvalidArgument("dimension mismatch: standardizer has " + std::to_string(means.size()) +
                                  " features, input has " + std::to_string(x.size()));
        }
        const Vector xv = x; // accepts row or column vectors
        return ((xv.array() - means.array()) / scales.array()).matrix();
    }

    [[nodiscard]] Matrix apply_rows(const Matrix &X) const {
        if (X.cols() != means.size()) {
            throw InvalidArgument("dimension mismatch: standardizer has " + std::to_string(means.size()) +
                                  " features, input has " + std::to_string(X.cols()));
        }
        return ((X.rowwise() - means.transpose()).array().rowwise() / scales.transpose().array()).matrix();
    }

    [[nodiscard]] Matrix invert_rows(const Matrix &Z) const {
        return ((Z.array().rowwise() * scales.transpose().array()).rowwise() + means.transpose().array()).matrix();
    }

    [[nodiscard]] double apply_target(double y) const { return (y - target_mean) / target_scale; }
    [[nodiscard]] double invert_target(double z) const { return z * target_scale + target_mean; }

    [[nodiscard]] Vector apply_targets(const Vector &y) const {
        return ((y.array() - target_mean) / target_scale).matrix();
    }
    [[nodiscard]] Vector invert_targets(const Vector &z) const {
        return (z.array() * target_scale + target_mean).matrix();
    }
};

inline Standardizer standardize_fit(const FlatDataset &data) {
    const Eigen::Index n = data.rows();
    if (n < 2) throw DataError("standardize_fit needs at least 2 rows, got " + std::to_string(n));
    Standardizer s;
    s.means = data.inputs.colwise().mean().transpose();
    s.scales.resize(data.dim());
    s.constant_features.assign(static_cast<std::size_t>(data.dim()), false);
    for (Eigen::Index k = 0; k < data.dim(); ++k) {
        const double var = (data.inputs.col(k).array() - s.means(k)).square().mean();
        const double sd = std::sqrt(var);
        if (sd > 0.0 && std::isfinite(sd)) {
            s.scales(k) = sd;
        } else {
            s.scales(k) = 1.0;
            s.constant_features[static_cast<std::size_t>(k)] = true;
        }
    }
    s.target_mean = data.targets.mean();
    const double tsd = std::sqrt((data.targets.array() - s.target_mean).square().mean());
    if (tsd > 0.0 && std::isfinite(tsd)) {
        s.target_scale = tsd;
    } else {
        s.target_scale = 1.0;
        s.constant_target = true;
    }
    return s;
}

/// Train/test split. With group_by_run every run lands wholly on one side.
inline std::pair<FlatDataset, FlatDataset> split(const FlatDataset &data, double test_fraction, std::uint64_t seed,
                                                 bool group_by_run) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw InvalidArgument("test_fraction must be in (0, 1), got " + format_double(test_fraction));
    }
    std::mt19937_64 rng(seed);
    std::vector<Eigen::Index> train_idx;
    std::vector<Eigen::Index> test_idx;
    if (group_by_run) {
        if (data.run_index.size() != static_cast<std::size_t>(data.rows())) {
            throw DataError("grouped split needs per-row run indices");
        }
        std::vector<std::int64_t> ids = data.run_index;
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        std::shuffle(ids.begin(), ids.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
        std::vector<std::int64_t> test_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));
        std::sort(test_ids.begin(), test_ids.end());
        for (Eigen::Index i = 0; i < data.rows(); ++i) {
            const bool in_test =
                std::binary_search(test_ids.begin(), test_ids.end(), data.run_index[static_cast<std::size_t>(i)]);
            (in_test ? test_idx : train_idx).push_back(i);
        }
    } else {
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(data.rows()));
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
        test_idx.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
        train_idx.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
        std::sort(test_idx.begin(), test_idx.end());
        std::sort(train_idx.begin(), train_idx.end());
    }
    return {data.take(train_idx), data.take(test_idx)};
}

/// Uniform random subset of at most max_rows rows, kept in original order.
inline FlatDataset subsample(const FlatDataset &data, Eigen::Index max_rows, std::uint64_t seed) {
    if (max_rows <= 0 || data.rows() <= max_rows) return data;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(data.rows()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(max_rows));
    std::sort(idx.begin(), idx.end());
    return data.take(idx);
}

template <typename Pred>
FlatDataset filter_rows(const FlatDataset &data, Pred keep) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < data.rows(); ++i) {
        if (keep(data.inputs.row(i), data.targets(i))) idx.push_back(i);
    }
    return data.take(idx);
}

/// Keeps only the named feature columns, in the given order.
inline FlatDataset select_features(const FlatDataset &data, const std::vector<std::string> &names) {
    if (names.empty()) throw InvalidArgument("feature selection is empty");
    FlatDataset out;
    out.inputs.resize(data.rows(), static_cast<Eigen::Index>(names.size()));
    for (std::size_t k = 0; k < names.size(); ++k) {
        if (std::count(names.begin(), names.end(), names[k]) > 1) {
            throw InvalidArgument("feature '" + names[k] + "' selected twice");
        }
        out.inputs.col(static_cast<Eigen::Index>(k)) = data.inputs.col(data.feature_index(names[k]));
    }
    out.targets = data.targets;
    out.feature_names = names;
    out.target_name = data.target_name;
    out.run_index = data.run_index;
    return out;
}

/// Swaps a feature column with the target column (and their names).
inline FlatDataset make_inverse_dataset(const FlatDataset &data, const std::string &new_target) {
    const Eigen::Index k = data.feature_index(new_target);
    FlatDataset out = data;
    out.inputs.col(k) = data.targets;
    out.targets = data.inputs.col(k);
    out.feature_names[static_cast<std::size_t>(k)] = data.target_name;
    out.target_name = new_target;
    return out;
}

// ---------------------------------------------------------------------------
// Runs CSV

inline constexpr const char *kRunsCsvHeader =
    "run_id,curve_kind,wafer_thickness_um,substrate_doping_cm3,pyramid_angle_deg,"
    "rear_contact_thickness_um,arc_thickness_nm,back_reflectivity_frac,sweep,value";

inline void write_runs(std::ostream &os, const std::vector<SimulationRun> &runs,
                       const std::vector<std::string> &comment_lines = {}) {
    for (const auto &c : comment_lines) os << "# " << c << '\n';
    os << kRunsCsvHeader << '\n';
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto &run = runs[r];
        std::string prefix = std::to_string(r) + "," + to_string(run.curve_kind);
        for (double v : run.design.values()) prefix += "," + format_double(v);
        for (std::size_t s = 0; s < run.sweep.size(); ++s) {
            os << prefix << ',' << format_double(run.sweep[s]) << ',' << format_double(run.values[s]) << '\n';
        }
    }
}

inline void write_runs(const std::vector<SimulationRun> &runs, const std::string &path,
                       const std::vector<std::string> &comment_lines = {}) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    write_runs(os, runs, comment_lines);
    if (!os) throw IoError("failed writing '" + path + "'");
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string &line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

} // namespace detail

inline std::vector<SimulationRun> read_runs(std::istream &is, const std::string &source = "<stream>") {
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    std::vector<SimulationRun> runs;
    std::map<std::string, std::size_t> seen_ids;
    std::string current_id;
    auto fail = [&](const std::string &msg) -> DataError {
        return DataError(source + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (!have_header) {
            if (line != kRunsCsvHeader) throw fail("bad header, expected: " + std::string(kRunsCsvHeader));
            have_header = true;
            continue;
        }
        auto f = detail::split_csv_line(line);
        if (f.size() != 10) throw fail("expected 10 columns, got " + std::to_string(f.size()));
        CurveKind kind{};
        try {
            kind = curve_kind_from_string(f[1]);
        } catch (const InvalidArgument &e) {
            throw fail(e.what());
        }
        std::array<double, 8> num{};
        for (std::size_t k = 0; k < 8; ++k) {
            if (!parse_double(f[2 + k], num[k]) || !std::isfinite(num[k])) {
                throw fail("non-numeric field '" + f[2 + k] + "' in column " + std::to_string(3 + k));
            }
        }
        const CellDesign design = CellDesign::from_values({num[0], num[1], num[2], num[3], num[4], num[5]});
        if (f[0].empty()) throw fail("empty run_id");
        if (f[0] != current_id) {
            if (seen_ids.count(f[0])) throw fail("rows of run '" + f[0] + "' are not contiguous");
            if (!runs.empty()) {
                if (auto v = runs.back().violation(); !v.empty()) throw fail("previous run: " + v);
            }
            if (auto v = design.violation(); !v.empty()) throw fail(v);
            seen_ids[f[0]] = runs.size();
            current_id = f[0];
            SimulationRun run;
            run.design = design;
            run.curve_kind = kind;
            runs.push_back(std::move(run));
        } else {
            if (!(design == runs.back().design)) throw fail("design values change within run '" + f[0] + "'");
            if (kind != runs.back().curve_kind) throw fail("curve kind changes within run '" + f[0] + "'");
            if (!(num[6] > runs.back().sweep.back())) throw fail("sweep is not strictly increasing");
        }
        if (kind == CurveKind::Reflectance && (num[7] < 0.0 || num[7] > 1.0)) {
            throw fail("reflectance value outside [0, 1]");
        }
        if (kind == CurveKind::Generation && num[7] < 0.0) throw fail("negative generation value");
        runs.back().sweep.push_back(num[6]);
        runs.back().values.push_back(num[7]);
    }
    if (!have_header) throw DataError(source + ": empty input (no header)");
    if (runs.empty()) throw DataError(source + ": empty input (no data rows)");
    if (auto v = runs.back().violation(); !v.empty()) throw DataError(source + ": last run: " + v);
    return runs;
}

inline std::vector<SimulationRun> read_runs(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    return read_runs(is, path);
}

} // namespace gpsurr
