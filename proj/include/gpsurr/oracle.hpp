#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gpsurr/dataset.hpp"
#include "gpsurr/error.hpp"
#include "gpsurr/sha256.hpp"

// Analytic optical model of a textured silicon cell. It is a ground-truth
// generator with the qualitative parameter dependencies of a PERC cell, not
// a physically calibrated simulator:
//   - single-layer ARC interference at normal incidence (air / ARC / Si),
//   - a scalar texture factor lowering front reflection with pyramid angle,
//   - rear reflection of weakly absorbed light escaping through the front,
//   - free-carrier absorption growing with doping and wavelength,
//   - Beer-Lambert generation with one rear bounce.
// Rear contact thickness is accepted and ignored.

namespace gpsurr::oracle {

inline constexpr int kOracleVersion = 1;

/// Angle at which the texture factor bottoms out (KOH pyramid facet angle).
inline constexpr double kTextureSaturationDeg = 54.74;
inline constexpr double kTextureFloor = 0.25;
/// Free-carrier absorption: alpha_fca = coeff * N * (lambda_nm / 1000)^2 [cm^-1].
inline constexpr double kFcaCoefficient = 5e-18;

struct AbsorptionPoint {
    double wavelength_nm;
    double alpha_per_cm;
};

/// Crystalline silicon at 300 K, one entry per default grid wavelength.
inline std::vector<AbsorptionPoint> default_absorption_table() {
    return {{300, 1.73e6}, {350, 1.04e6}, {400, 9.52e4}, {450, 2.55e4}, {500, 1.11e4}, {550, 6.39e3},
            {600, 4.14e3}, {650, 2.81e3}, {700, 1.90e3}, {750, 1.30e3}, {800, 8.50e2}, {850, 5.35e2},
            {900, 3.06e2}, {950, 1.57e2}, {1000, 6.40e1}, {1050, 1.63e1}, {1100, 3.50}, {1150, 0.30}};
}

/// 18 points, 300 to 1150 nm in 50 nm steps.
inline std::vector<double> default_wavelength_grid() {
    std::vector<double> grid;
    for (int i = 0; i < 18; ++i) grid.push_back(300.0 + 50.0 * i);
    return grid;
}

struct OpticalConstants {
    double si_refractive_index = 3.8;
    double arc_refractive_index = 2.0;
    std::vector<AbsorptionPoint> absorption_table = default_absorption_table();
    /// Peak photon flux of the incident spectrum [cm^-2 s^-1 per grid band].
    double photon_flux_scale = 1e17;

    void validate() const {
        if (!(si_refractive_index > 1.0) || !(arc_refractive_index > 1.0)) {
            throw InvalidArgument("refractive indices must exceed 1");
        }
        if (!(photon_flux_scale > 0.0)) throw InvalidArgument("photon_flux_scale must be > 0");
        if (absorption_table.size() < 2) throw InvalidArgument("absorption table needs at least 2 entries");
        for (std::size_t i = 0; i < absorption_table.size(); ++i) {
            if (!(absorption_table[i].alpha_per_cm > 0.0)) throw InvalidArgument("absorption must be > 0");
            if (i > 0) {
                if (!(absorption_table[i].wavelength_nm > absorption_table[i - 1].wavelength_nm))
                    throw InvalidArgument("absorption table wavelengths must increase");
                if (!(absorption_table[i].alpha_per_cm < absorption_table[i - 1].alpha_per_cm))
                    throw InvalidArgument("absorption must decrease with wavelength");
            }
        }
    }

    /// Interband absorption, log-linear interpolation between table entries.
    [[nodiscard]] double absorption(double wavelength_nm) const {
        const auto &t = absorption_table;
        if (!(wavelength_nm >= t.front().wavelength_nm && wavelength_nm <= t.back().wavelength_nm)) {
            throw InvalidArgument("wavelength " + format_double(wavelength_nm) + " nm outside absorption table [" +
                                  format_double(t.front().wavelength_nm) + ", " +
                                  format_double(t.back().wavelength_nm) + "]");
        }
        auto hi = std::lower_bound(t.begin(), t.end(), wavelength_nm,
                                   [](const AbsorptionPoint &p, double w) { return p.wavelength_nm < w; });
        if (hi->wavelength_nm == wavelength_nm) return hi->alpha_per_cm;
        auto lo = hi - 1;
        const double f = (wavelength_nm - lo->wavelength_nm) / (hi->wavelength_nm - lo->wavelength_nm);
        return std::exp((1.0 - f) * std::log(lo->alpha_per_cm) + f * std::log(hi->alpha_per_cm));
    }

    /// Relative photon flux of a 5778 K black body, normalized to 1 at its peak (~ 635 nm per nm^-1 photon basis).
    [[nodiscard]] double photon_flux(double wavelength_nm) const {
        constexpr double hc_over_kT_nm = 1.4387769e7 / 5778.0;
        auto shape = [&](double w) { return 1.0 / (std::pow(w, 4) * std::expm1(hc_over_kT_nm / w)); };
        // photon-flux maximum: x = hc/(lambda k T) solves x = 4 (1 - e^-x), x ~ 3.9207
        const double peak = hc_over_kT_nm / 3.920690395;
        return photon_flux_scale * shape(wavelength_nm) / shape(peak);
    }
};

// ---------------------------------------------------------------------------
// Pieces of the optical model, exposed for tests.

/// Normal-incidence reflectance of air / film / substrate.
inline double thin_film_reflectance(double wavelength_nm, double film_thickness_nm, double n_film, double n_substrate) {
    const double r01 = (1.0 - n_film) / (1.0 + n_film);
    const double r12 = (n_film - n_substrate) / (n_film + n_substrate);
    const double phase = 4.0 * std::numbers::pi * n_film * film_thickness_nm / wavelength_nm;
    const double c = std::cos(phase);
    return (r01 * r01 + r12 * r12 + 2.0 * r01 * r12 * c) / (1.0 + r01 * r01 * r12 * r12 + 2.0 * r01 * r12 * c);
}

/// 1 at a flat surface, falling linearly to 0.25 at 54.74 degrees, flat beyond.
inline double texture_factor(double pyramid_angle_deg) {
    const double a = std::clamp(pyramid_angle_deg, 0.0, kTextureSaturationDeg);
    return 1.0 - (1.0 - kTextureFloor) * a / kTextureSaturationDeg;
}

inline double path_factor(double pyramid_angle_deg) {
    return 1.0 / std::cos(pyramid_angle_deg * std::numbers::pi / 180.0);
}

inline double free_carrier_absorption(double doping_cm3, double wavelength_nm) {
    const double l = wavelength_nm / 1000.0;
    return kFcaCoefficient * doping_cm3 * l * l;
}

inline double front_reflectance(const CellDesign &design, double wavelength_nm, const OpticalConstants &c) {
    return texture_factor(design.pyramid_angle_deg) *
           thin_film_reflectance(wavelength_nm, design.arc_thickness_nm, c.arc_refractive_index,
                                 c.si_refractive_index);
}

/// Light reflected at the rear that leaves through the front.
inline double escape_reflectance(const CellDesign &design, double wavelength_nm, const OpticalConstants &c) {
    const double rf = front_reflectance(design, wavelength_nm, c);
    const double alpha = c.absorption(wavelength_nm) + free_carrier_absorption(design.substrate_doping_cm3, wavelength_nm);
    const double w_cm = design.wafer_thickness_um * 1e-4;
    return (1.0 - rf) * (1.0 - rf) * design.back_reflectivity_frac *
           std::exp(-2.0 * alpha * w_cm * path_factor(design.pyramid_angle_deg));
}

inline double reflectance(const CellDesign &design, double wavelength_nm, const OpticalConstants &c) {
    const double r = front_reflectance(design, wavelength_nm, c) + escape_reflectance(design, wavelength_nm, c);
    return std::clamp(r, 0.0, 1.0);
}

inline SimulationRun simulate_reflectance(const CellDesign &design, const std::vector<double> &wavelengths,
                                          const OpticalConstants &constants) {
    design.validate();
    if (wavelengths.empty()) throw InvalidArgument("wavelength grid is empty");
    SimulationRun run;
    run.design = design;
    run.curve_kind = CurveKind::Reflectance;
    run.sweep = wavelengths;
    run.values.reserve(wavelengths.size());
    for (double w : wavelengths) run.values.push_back(reflectance(design, w, constants));
    return run;
}

/// Depth-resolved generation, summed over the wavelength grid.
inline SimulationRun simulate_generation(const CellDesign &design, std::size_t n_depth_points,
                                         const OpticalConstants &constants,
                                         const std::vector<double> &wavelengths = default_wavelength_grid()) {
    design.validate();
    if (n_depth_points < 2) throw InvalidArgument("simulate_generation needs at least 2 depth points");
    const double f_path = path_factor(design.pyramid_angle_deg);
    const double w_cm = design.wafer_thickness_um * 1e-4;

    struct Band {
        double weight; // flux * (1 - R_front) * alpha_band * f_path
        double alpha;  // total attenuation
    };
    std::vector<Band> bands;
    for (double w : wavelengths) {
        const double alpha_band = constants.absorption(w);
        const double alpha = alpha_band + free_carrier_absorption(design.substrate_doping_cm3, w);
        const double entering = 1.0 - front_reflectance(design, w, constants);
        bands.push_back({constants.photon_flux(w) * entering * alpha_band * f_path, alpha});
    }

    SimulationRun run;
    run.design = design;
    run.curve_kind = CurveKind::Generation;
    run.sweep.resize(n_depth_points);
    run.values.resize(n_depth_points);
    const double step = design.wafer_thickness_um / static_cast<double>(n_depth_points - 1);
    for (std::size_t i = 0; i < n_depth_points; ++i) {
        run.sweep[i] = i + 1 == n_depth_points ? design.wafer_thickness_um : step * static_cast<double>(i);
        const double z_cm = run.sweep[i] * 1e-4;
        double g = 0.0;
        for (const auto &b : bands) {
            const double k = b.alpha * f_path;
            g += b.weight * (std::exp(-k * z_cm) + design.back_reflectivity_frac * std::exp(-k * (2.0 * w_cm - z_cm)));
        }
        run.values[i] = g;
    }
    return run;
}

// ---------------------------------------------------------------------------
// Database generation

struct GridSpec {
    std::vector<double> wafer_thickness_um{120, 160, 200, 240};
    std::vector<double> substrate_doping_cm3{1e16, 1e18};
    std::vector<double> pyramid_angle_deg{15, 30, 45, 54.74};
    std::vector<double> rear_contact_thickness_um{1, 5};
    std::vector<double> arc_thickness_nm{60, 70, 80, 90};
    std::vector<double> back_reflectivity_frac{0.6, 0.8, 0.95};
    std::vector<double> wavelengths_nm = default_wavelength_grid();
    std::size_t depth_points = 50;

    [[nodiscard]] std::vector<std::pair<std::string, const std::vector<double> *>> design_lists() const {
        return {{"wafer_thickness_um", &wafer_thickness_um},
                {"substrate_doping_cm3", &substrate_doping_cm3},
                {"pyramid_angle_deg", &pyramid_angle_deg},
                {"rear_contact_thickness_um", &rear_contact_thickness_um},
                {"arc_thickness_nm", &arc_thickness_nm},
                {"back_reflectivity_frac", &back_reflectivity_frac}};
    }

    [[nodiscard]] std::size_t num_runs() const {
        std::size_t n = 1;
        for (const auto &[name, list] : design_lists()) n *= list->size();
        return n;
    }

    [[nodiscard]] std::size_t sweep_length(CurveKind kind) const {
        return kind == CurveKind::Reflectance ? wavelengths_nm.size() : depth_points;
    }

    void validate() const {
        for (const auto &[name, list] : design_lists()) {
            if (list->empty()) throw InvalidArgument("grid." + name + " is empty");
        }
        if (wavelengths_nm.empty()) throw InvalidArgument("grid.wavelengths_nm is empty");
        for (std::size_t i = 1; i < wavelengths_nm.size(); ++i) {
            if (!(wavelengths_nm[i] > wavelengths_nm[i - 1]))
                throw InvalidArgument("grid.wavelengths_nm must be strictly increasing");
        }
        if (depth_points < 2) throw InvalidArgument("grid.depth_points must be >= 2");
    }

    /// Designs of the full Cartesian product; the first parameter varies slowest.
    [[nodiscard]] std::vector<CellDesign> designs() const {
        validate();
        std::vector<CellDesign> out;
        out.reserve(num_runs());
        for (double w : wafer_thickness_um)
            for (double n : substrate_doping_cm3)
                for (double a : pyramid_angle_deg)
                    for (double r : rear_contact_thickness_um)
                        for (double arc : arc_thickness_nm)
                            for (double b : back_reflectivity_frac) out.push_back(CellDesign{w, n, a, r, arc, b});
        return out;
    }
};

inline constexpr std::size_t kMaxDatabaseRows = 1'000'000;

/// Every design of the grid simulated, plus optional seeded Gaussian noise.
/// Each run draws from its own stream, so results do not depend on evaluation order.
inline std::vector<SimulationRun> generate_database(const GridSpec &grid, CurveKind kind,
                                                    const OpticalConstants &constants, double noise_sd,
                                                    std::uint64_t seed) {
    grid.validate();
    constants.validate();
    if (!(noise_sd >= 0.0) || !std::isfinite(noise_sd)) throw InvalidArgument("noise_sd must be >= 0");
    const std::size_t rows = grid.num_runs() * grid.sweep_length(kind);
    if (rows > kMaxDatabaseRows) {
        throw InvalidArgument("grid would produce " + std::to_string(rows) + " rows, above the limit of " +
                              std::to_string(kMaxDatabaseRows));
    }
    const auto designs = grid.designs();
    std::vector<SimulationRun> runs;
    runs.reserve(designs.size());
    for (std::size_t r = 0; r < designs.size(); ++r) {
        SimulationRun run = kind == CurveKind::Reflectance
                                ? simulate_reflectance(designs[r], grid.wavelengths_nm, constants)
                                : simulate_generation(designs[r], grid.depth_points, constants, grid.wavelengths_nm);
        if (noise_sd > 0.0) {
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(r >> 32)};
            std::mt19937_64 rng(seq);
            std::normal_distribution<double> noise(0.0, noise_sd);
            for (double &v : run.values) {
                v += noise(rng);
                v = kind == CurveKind::Reflectance ? std::clamp(v, 0.0, 1.0) : std::max(v, 0.0);
            }
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

// ---------------------------------------------------------------------------
// JSON config

inline void to_json(nlohmann::json &j, const OpticalConstants &c) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto &p : c.absorption_table) table.push_back({p.wavelength_nm, p.alpha_per_cm});
    j = {{"si_refractive_index", c.si_refractive_index},
         {"arc_refractive_index", c.arc_refractive_index},
         {"absorption_table", table},
         {"photon_flux_scale", c.photon_flux_scale}};
}

inline void from_json(const nlohmann::json &j, OpticalConstants &c) {
    c = OpticalConstants{};
    if (j.contains("si_refractive_index")) c.si_refractive_index = j.at("si_refractive_index").get<double>();
    if (j.contains("arc_refractive_index")) c.arc_refractive_index = j.at("arc_refractive_index").get<double>();
    if (j.contains("photon_flux_scale")) c.photon_flux_scale = j.at("photon_flux_scale").get<double>();
    if (j.contains("absorption_table")) {
        c.absorption_table.clear();
        for (const auto &row : j.at("absorption_table")) {
            c.absorption_table.push_back({row.at(0).get<double>(), row.at(1).get<double>()});
        }
    }
    c.validate();
}

inline void to_json(nlohmann::json &j, const GridSpec &g) {
    j = nlohmann::json::object();
    for (const auto &[name, list] : g.design_lists()) j[name] = *list;
    j["wavelengths_nm"] = g.wavelengths_nm;
    j["depth_points"] = g.depth_points;
}

inline void from_json(const nlohmann::json &j, GridSpec &g) {
    g = GridSpec{};
    auto read_list = [&](const char *name, std::vector<double> &dst) {
        if (!j.contains(name)) return;
        const auto &v = j.at(name);
        if (!v.is_array()) throw InvalidArgument(std::string("grid.") + name + " must be an array");
        dst = v.get<std::vector<double>>();
        if (dst.empty()) throw InvalidArgument(std::string("grid.") + name + " is empty");
    };
    read_list("wafer_thickness_um", g.wafer_thickness_um);
    read_list("substrate_doping_cm3", g.substrate_doping_cm3);
    read_list("pyramid_angle_deg", g.pyramid_angle_deg);
    read_list("rear_contact_thickness_um", g.rear_contact_thickness_um);
    read_list("arc_thickness_nm", g.arc_thickness_nm);
    read_list("back_reflectivity_frac", g.back_reflectivity_frac);
    read_list("wavelengths_nm", g.wavelengths_nm);
    if (j.contains("depth_points")) g.depth_points = j.at("depth_points").get<std::size_t>();
    g.validate();
}

/// Hash of the canonical (sorted-key) JSON form of a generation config.
inline std::string config_hash(const GridSpec &grid, const OpticalConstants &constants, CurveKind kind,
                               double noise_sd, std::uint64_t seed) {
    nlohmann::json j{{"grid", grid},
                     {"constants", constants},
                     {"curve_kind", to_string(kind)},
                     {"noise_sd", noise_sd},
                     {"seed", seed},
                     {"oracle_version", kOracleVersion}};
    return sha256_hex(j.dump());
}

} // namespace gpsurr::oracle
