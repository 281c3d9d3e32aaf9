#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "gpsurr/dataset.hpp"
#include "oracles.hpp"

using namespace gpsurr;
namespace gt = gpsurr::testing;

namespace {

SimulationRun random_run(std::mt19937_64 &rng, CurveKind kind, std::size_t s) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SimulationRun run;
    run.curve_kind = kind;
    run.design.wafer_thickness_um = 100.0 + 150.0 * u(rng);
    run.design.substrate_doping_cm3 = std::pow(10.0, 15.0 + 4.0 * u(rng));
    run.design.pyramid_angle_deg = 10.0 + 50.0 * u(rng);
    run.design.rear_contact_thickness_um = 5.0 * u(rng);
    run.design.arc_thickness_nm = 50.0 + 50.0 * u(rng);
    run.design.back_reflectivity_frac = u(rng);
    double x = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
        x += 0.1 + u(rng);
        run.sweep.push_back(x);
        run.values.push_back(kind == CurveKind::Reflectance ? u(rng) : 1e20 * u(rng));
    }
    if (kind == CurveKind::Generation) {
        const double scale = run.design.wafer_thickness_um / run.sweep.back();
        for (auto &z : run.sweep) z *= scale;
        run.sweep.back() = run.design.wafer_thickness_um;
    }
    return run;
}

std::vector<SimulationRun> random_runs(std::uint64_t seed, std::size_t count, std::size_t s,
                                       CurveKind kind = CurveKind::Reflectance) {
    std::mt19937_64 rng(seed);
    std::vector<SimulationRun> runs;
    for (std::size_t r = 0; r < count; ++r) runs.push_back(random_run(rng, kind, s));
    return runs;
}

std::string csv_with(const std::vector<std::string> &rows) {
    std::string s = std::string(kRunsCsvHeader) + "\n";
    for (const auto &r : rows) s += r + "\n";
    return s;
}

void expect_read_error(const std::string &text, const std::string &needle) {
    std::istringstream is(text);
    try {
        (void)read_runs(is, "in.csv");
        FAIL() << "expected DataError containing " << needle;
    } catch (const DataError &e) {
        EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
}

} // namespace

TEST(Flatten, RowCountIsSumOfSweepLengths) {
    const auto runs = random_runs(1, 768, 18);
    const FlatDataset d = flatten(runs);
    EXPECT_EQ(d.rows(), 13824);
    EXPECT_EQ(d.dim(), 7);
    EXPECT_EQ(d.feature_names.back(), "wavelength_nm");
    EXPECT_EQ(d.target_name, "reflectance");
}

TEST(Flatten, SingleRunSingleSweepPoint) {
    const FlatDataset d = flatten(random_runs(2, 1, 1));
    EXPECT_EQ(d.rows(), 1);
    EXPECT_EQ(d.dim(), 7);
}

TEST(Flatten, GenerationRunPadsDesignValues) {
    const auto runs = random_runs(3, 1, 9, CurveKind::Generation);
    const FlatDataset d = flatten(runs);
    ASSERT_EQ(d.rows(), 9);
    EXPECT_EQ(d.feature_names.back(), "depth_um");
    const auto v = runs[0].design.values();
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        for (Eigen::Index k = 0; k < 6; ++k) EXPECT_EQ(d.inputs(i, k), v[static_cast<std::size_t>(k)]);
        EXPECT_EQ(d.inputs(i, 6), runs[0].sweep[static_cast<std::size_t>(i)]);
    }
}

TEST(Flatten, RegroupReconstructsRunsExactly) {
    const auto runs = random_runs(4, 25, 7);
    EXPECT_EQ(regroup(flatten(runs), CurveKind::Reflectance), runs);
}

TEST(Flatten, RejectsMixedKindsAndInvalidRuns) {
    auto runs = random_runs(5, 2, 3);
    runs[1].curve_kind = CurveKind::Generation;
    EXPECT_THROW((void)flatten(runs), DataError);
    runs = random_runs(5, 2, 3);
    runs[0].values[1] = 1.5;
    EXPECT_THROW((void)flatten(runs), DataError);
    EXPECT_THROW((void)flatten({}), DataError);
}

TEST(SimulationRun, GenerationLastDepthMustEqualThickness) {
    auto run = random_runs(6, 1, 5, CurveKind::Generation)[0];
    EXPECT_NO_THROW(run.validate());
    run.sweep.back() += 1e-6;
    EXPECT_THROW(run.validate(), DataError);
}

TEST(CellDesign, FieldConstraints) {
    CellDesign d;
    EXPECT_NO_THROW(d.validate());
    d.pyramid_angle_deg = 90.0;
    EXPECT_THROW(d.validate(), InvalidArgument);
    d = {};
    d.back_reflectivity_frac = 1.01;
    EXPECT_THROW(d.validate(), InvalidArgument);
    d = {};
    d.rear_contact_thickness_um = 0.0;
    EXPECT_NO_THROW(d.validate());
    d.wafer_thickness_um = 0.0;
    EXPECT_THROW(d.validate(), InvalidArgument);
    EXPECT_THROW(d.set("bogus", 1.0), InvalidArgument);
}

TEST(Standardizer, TwoRowExample) {
    FlatDataset d;
    d.inputs = Matrix{{0.0}, {2.0}};
    d.targets = Vector{{5.0, 7.0}};
    d.feature_names = {"x"};
    d.target_name = "y";
    const Standardizer s = standardize_fit(d);
    EXPECT_EQ(s.means(0), 1.0);
    EXPECT_EQ(s.scales(0), 1.0);
    const Matrix z = s.apply_rows(d.inputs);
    EXPECT_EQ(z(0, 0), -1.0);
    EXPECT_EQ(z(1, 0), 1.0);
    EXPECT_FALSE(s.any_constant());
}

TEST(Standardizer, ConstantColumnIsFlagged) {
    FlatDataset d;
    d.inputs = Matrix{{3.0, 1.0}, {3.0, 2.0}, {3.0, 4.0}};
    d.targets = Vector{{1.0, 1.0, 1.0}};
    d.feature_names = {"a", "b"};
    d.target_name = "y";
    const Standardizer s = standardize_fit(d);
    EXPECT_EQ(s.scales(0), 1.0);
    EXPECT_TRUE(s.constant_features[0]);
    EXPECT_FALSE(s.constant_features[1]);
    EXPECT_TRUE(s.constant_target);
    EXPECT_EQ(s.target_scale, 1.0);
}

TEST(Standardizer, ApplyThenInvertIsIdentity) {
    std::mt19937_64 rng(7);
    FlatDataset d;
    d.inputs = gt::random_matrix(rng, 50, 4, -1e3, 1e3);
    d.targets = gt::random_vector(rng, 50, -5.0, 5.0);
    d.feature_names = {"a", "b", "c", "d"};
    d.target_name = "y";
    const Standardizer s = standardize_fit(d);
    const Matrix back = s.invert_rows(s.apply_rows(d.inputs));
    EXPECT_LT(((back - d.inputs).array() / d.inputs.array().abs().max(1.0)).abs().maxCoeff(), 1e-12);
    EXPECT_LT((s.invert_targets(s.apply_targets(d.targets)) - d.targets).cwiseAbs().maxCoeff(), 1e-12);
    const Matrix z = s.apply_rows(d.inputs);
    EXPECT_LT(z.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((z.array().square().colwise().mean() - 1.0).abs().maxCoeff(), 1e-12);
}

TEST(Standardizer, NeedsTwoRows) {
    FlatDataset d;
    d.inputs = Matrix{{1.0}};
    d.targets = Vector{{1.0}};
    d.feature_names = {"x"};
    EXPECT_THROW((void)standardize_fit(d), DataError);
}

TEST(Split, GroupedQuarterOf768Runs) {
    const FlatDataset d = flatten(random_runs(8, 768, 3));
    const auto [train, test] = split(d, 0.25, 42, true);
    std::set<std::int64_t> test_runs(test.run_index.begin(), test.run_index.end());
    std::set<std::int64_t> train_runs(train.run_index.begin(), train.run_index.end());
    EXPECT_EQ(test_runs.size(), 192u);
    EXPECT_EQ(train_runs.size(), 576u);
    for (auto r : test_runs) EXPECT_EQ(train_runs.count(r), 0u);
    EXPECT_EQ(train.rows() + test.rows(), d.rows());
}

TEST(Split, DeterministicForSeed) {
    const FlatDataset d = flatten(random_runs(9, 40, 4));
    EXPECT_EQ(split(d, 0.3, 5, true), split(d, 0.3, 5, true));
    EXPECT_EQ(split(d, 0.3, 5, false), split(d, 0.3, 5, false));
    EXPECT_FALSE(split(d, 0.3, 5, true).second == split(d, 0.3, 6, true).second);
}

TEST(Split, UngroupedRowCount) {
    const FlatDataset d = flatten(random_runs(10, 10, 10));
    const auto [train, test] = split(d, 0.2, 1, false);
    EXPECT_EQ(test.rows(), 20);
    EXPECT_EQ(train.rows(), 80);
}

TEST(Split, FractionOutOfRange) {
    const FlatDataset d = flatten(random_runs(11, 4, 2));
    EXPECT_THROW((void)split(d, 0.0, 1, false), InvalidArgument);
    EXPECT_THROW((void)split(d, 1.0, 1, false), InvalidArgument);
}

TEST(InverseDataset, SwapIsAnInvolution) {
    const FlatDataset d = flatten(random_runs(12, 6, 5));
    const FlatDataset inv = make_inverse_dataset(d, "wafer_thickness_um");
    EXPECT_EQ(inv.dim(), 7);
    EXPECT_EQ(inv.target_name, "wafer_thickness_um");
    EXPECT_EQ(inv.feature_names[0], "reflectance");
    EXPECT_EQ(make_inverse_dataset(inv, "reflectance"), d);
    EXPECT_THROW((void)make_inverse_dataset(d, "nope"), InvalidArgument);
}

TEST(SelectFeatures, KeepsNamedColumnsInOrder) {
    const FlatDataset d = flatten(random_runs(13, 3, 4));
    const FlatDataset s = select_features(d, {"wavelength_nm", "arc_thickness_nm"});
    EXPECT_EQ(s.inputs.col(0), d.inputs.col(6));
    EXPECT_EQ(s.inputs.col(1), d.inputs.col(4));
    EXPECT_THROW((void)select_features(d, {"arc_thickness_nm", "arc_thickness_nm"}), InvalidArgument);
    EXPECT_THROW((void)select_features(d, {"zzz"}), InvalidArgument);
}

TEST(RunsCsv, WriteReadRoundTrip) {
    for (auto kind : {CurveKind::Reflectance, CurveKind::Generation}) {
        const auto runs = random_runs(14, 10, 6, kind);
        std::stringstream ss;
        write_runs(ss, runs, {"oracle_version=1", "config_sha256=abc"});
        EXPECT_EQ(ss.str().rfind("# oracle_version=1\n", 0), 0u);
        EXPECT_EQ(read_runs(ss), runs); // shortest round-trip text is exact
    }
}

TEST(RunsCsv, DecreasingSweepNamesLine) {
    expect_read_error(csv_with({"0,reflectance,180,1e16,54.74,2,75,0.9,400,0.1",
                                "0,reflectance,180,1e16,54.74,2,75,0.9,350,0.1"}),
                      "in.csv:3:");
}

TEST(RunsCsv, MalformedRows) {
    expect_read_error(csv_with({"0,reflectance,180,1e16,54.74,2,75,0.9,400"}), "in.csv:2: expected 10 columns");
    expect_read_error(csv_with({"0,reflectance,180,abc,54.74,2,75,0.9,400,0.1"}), "non-numeric");
    expect_read_error(csv_with({"0,reflectance,180,1e16,54.74,2,75,0.9,400,1.2"}), "outside [0, 1]");
    expect_read_error(csv_with({"0,reflectance,-1,1e16,54.74,2,75,0.9,400,0.1"}), "wafer_thickness_um");
    expect_read_error(csv_with({"0,reflectance,180,1e16,54.74,2,75,0.9,400,0.1",
                                "1,reflectance,180,1e16,54.74,2,75,0.9,400,0.1",
                                "0,reflectance,180,1e16,54.74,2,75,0.9,500,0.1"}),
                      "not contiguous");
    expect_read_error("run_id,sweep\n", "bad header");
}

TEST(RunsCsv, EmptyInput) {
    expect_read_error("", "empty input");
    expect_read_error(csv_with({}), "empty input");
}
