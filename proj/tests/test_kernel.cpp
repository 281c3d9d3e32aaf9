#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gpsurr/kernel.hpp"
#include "oracles.hpp"

using namespace gpsurr;
using gpsurr::testing::random_kernel;
using gpsurr::testing::random_matrix;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

} // namespace

TEST(KernelEval, SquaredExponentialSelfIsSignalVariance) {
    const auto k = KernelSpec::squared_exponential(1.0, {1.0});
    EXPECT_DOUBLE_EQ(kernel_eval(k, vec({0.3}), vec({0.3})), 1.0);
}

TEST(KernelEval, SquaredExponentialUnitDistance) {
    const auto k = KernelSpec::squared_exponential(1.0, {1.0});
    EXPECT_NEAR(kernel_eval(k, vec({0.0}), vec({1.0})), std::exp(-0.5), 1e-15);
    EXPECT_NEAR(kernel_eval(k, vec({0.0}), vec({1.0})), 0.606531, 1e-6);
}

TEST(KernelEval, RationalQuadraticUnitDistance) {
    const auto k = KernelSpec::rational_quadratic(2.0, {1.0}, 1.0);
    EXPECT_NEAR(kernel_eval(k, vec({0.0}), vec({1.0})), 4.0 / 1.5, 1e-15);
    EXPECT_NEAR(kernel_eval(k, vec({0.0}), vec({1.0})), 2.666667, 1e-6);
}

TEST(KernelEval, DimensionMismatchNamesBothLengths) {
    const auto k = KernelSpec::squared_exponential(1.0, {1.0, 2.0});
    try {
        (void)kernel_eval(k, vec({0.0}), vec({1.0}));
        FAIL() << "expected InvalidArgument";
    } catch (const InvalidArgument &e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('2'), std::string::npos);
        EXPECT_NE(msg.find('1'), std::string::npos);
    }
    EXPECT_THROW((void)kernel_eval(k, vec({0.0, 1.0}), vec({1.0})), InvalidArgument);
}

TEST(KernelSpecTest, RejectsInvalidHyperparameters) {
    EXPECT_THROW(KernelSpec::squared_exponential(0.0, {1.0}), InvalidArgument);
    EXPECT_THROW(KernelSpec::squared_exponential(1.0, {-1.0}), InvalidArgument);
    EXPECT_THROW(KernelSpec::squared_exponential(1.0, {}), InvalidArgument);
    EXPECT_THROW(KernelSpec::rational_quadratic(1.0, {1.0}, 0.0), InvalidArgument);
}

TEST(KernelSpecTest, JsonRoundTrip) {
    const auto rq = KernelSpec::rational_quadratic(1.5, {0.1, 2.0}, 0.7);
    nlohmann::json j = rq;
    EXPECT_EQ(j["family"], "rq");
    EXPECT_EQ(j.get<KernelSpec>(), rq);
    const auto se = KernelSpec::squared_exponential(1.5, {0.1});
    nlohmann::json js = se;
    EXPECT_FALSE(js.contains("rq_alpha"));
    EXPECT_EQ(js.get<KernelSpec>(), se);
    EXPECT_THROW((nlohmann::json{{"family", "matern"}, {"sigma_f", 1.0}, {"length_scales", {1.0}}}.get<KernelSpec>()),
                 InvalidArgument);
}

TEST(KernelMatrix, SingleRow) {
    const auto k = KernelSpec::squared_exponential(1.7, {1.0, 1.0});
    const Matrix K = kernel_matrix(k, Matrix::Ones(1, 2));
    ASSERT_EQ(K.rows(), 1);
    EXPECT_DOUBLE_EQ(K(0, 0), 1.7 * 1.7);
}

TEST(KernelMatrix, IdenticalRows) {
    const auto k = KernelSpec::rational_quadratic(0.8, {1.0}, 2.0);
    Matrix X(2, 1);
    X << 0.4, 0.4;
    const Matrix K = kernel_matrix(k, X);
    EXPECT_TRUE((K.array() == 0.8 * 0.8).all());
}

TEST(KernelMatrix, MatchesPairwiseLoop) {
    std::mt19937_64 rng(7);
    for (auto fam : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
        const auto k = random_kernel(rng, fam, 3);
        const Matrix X = random_matrix(rng, 5, 3);
        const Matrix K = kernel_matrix(k, X);
        const Matrix R = gpsurr::testing::reference_gram(k, X);
        EXPECT_LT((K - R).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_TRUE(K == K.transpose());
        for (Eigen::Index i = 0; i < 5; ++i) EXPECT_EQ(K(i, i), k.sigma_f * k.sigma_f);
    }
}

TEST(KernelCross, MatchesLoopAndSelf) {
    std::mt19937_64 rng(8);
    for (auto fam : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
        const auto k = random_kernel(rng, fam, 4);
        const Matrix X = random_matrix(rng, 6, 4);
        const Vector xs = gpsurr::testing::random_vector(rng, 4);
        const Vector c = kernel_cross(k, X, xs);
        for (Eigen::Index j = 0; j < 6; ++j) {
            EXPECT_NEAR(c(j), gpsurr::testing::reference_kernel(k, xs, X.row(j)), 1e-12);
        }
        const Vector self = kernel_cross(k, X, Vector(X.row(2)));
        EXPECT_DOUBLE_EQ(self(2), k.sigma_f * k.sigma_f);
    }
}

TEST(KernelCross, FarPointDecays) {
    const auto k = KernelSpec::squared_exponential(2.0, {0.5, 1.0});
    std::mt19937_64 rng(9);
    const Matrix X = random_matrix(rng, 10, 2);
    const Vector far = Vector::Constant(2, 100.0);
    EXPECT_TRUE((kernel_cross(k, X, far).array() < 1e-8 * 4.0).all());
}

TEST(KernelCross, DimensionMismatch) {
    const auto k = KernelSpec::squared_exponential(1.0, {1.0, 1.0});
    EXPECT_THROW(kernel_cross(k, Matrix::Zero(3, 3), Vector::Zero(3)), InvalidArgument);
    EXPECT_THROW(kernel_cross(k, Matrix::Zero(3, 2), Vector::Zero(3)), InvalidArgument);
    EXPECT_THROW(kernel_matrix(k, Matrix::Zero(3, 1)), InvalidArgument);
}

TEST(KernelGrads, SignalGradientIsTwiceK) {
    std::mt19937_64 rng(10);
    for (auto fam : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
        const auto k = random_kernel(rng, fam, 2);
        const Matrix X = random_matrix(rng, 5, 2);
        const auto g = kernel_matrix_grads(k, X);
        ASSERT_EQ(static_cast<Eigen::Index>(g.size()), k.num_params());
        EXPECT_LT((g[0] - 2.0 * kernel_matrix(k, X)).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(KernelGrads, LengthScaleGradientVanishesOnDiagonal) {
    std::mt19937_64 rng(11);
    for (auto fam : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
        const auto k = random_kernel(rng, fam, 3);
        const auto g = kernel_matrix_grads(k, random_matrix(rng, 4, 3));
        for (Eigen::Index p = 1; p <= 3; ++p) EXPECT_TRUE((g[static_cast<std::size_t>(p)].diagonal().array() == 0.0).all());
    }
}

TEST(KernelGrads, MatchFiniteDifferences) {
    std::mt19937_64 rng(12);
    constexpr double h = 1e-5;
    for (auto fam : {KernelFamily::SquaredExponential, KernelFamily::RationalQuadratic}) {
        const auto k = random_kernel(rng, fam, 2);
        const Matrix X = random_matrix(rng, 6, 2);
        const auto grads = kernel_matrix_grads(k, X);
        const Vector p = k.log_params();
        for (Eigen::Index i = 0; i < p.size(); ++i) {
            Vector a = p, b = p;
            a(i) += h;
            b(i) -= h;
            const Matrix fd = (gpsurr::testing::reference_gram(k.with_log_params(a), X) -
                               gpsurr::testing::reference_gram(k.with_log_params(b), X)) /
                              (2.0 * h);
            const Matrix &an = grads[static_cast<std::size_t>(i)];
            for (Eigen::Index r = 0; r < 6; ++r) {
                for (Eigen::Index c = 0; c < 6; ++c) {
                    if (std::abs(fd(r, c)) < 1e-9 && std::abs(an(r, c)) < 1e-9) continue;
                    EXPECT_LT(gpsurr::testing::rel_err(an(r, c), fd(r, c)), 1e-5)
                        << "param " << i << " entry " << r << "," << c;
                }
            }
        }
    }
}

// Property checks over random inputs.

TEST(KernelProperties, Symmetry) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        const auto fam = trial % 2 ? KernelFamily::SquaredExponential : KernelFamily::RationalQuadratic;
        const auto k = random_kernel(rng, fam, 3);
        const Vector a = gpsurr::testing::random_vector(rng, 3, -5, 5);
        const Vector b = gpsurr::testing::random_vector(rng, 3, -5, 5);
        EXPECT_EQ(kernel_eval(k, a, b), kernel_eval(k, b, a));
        const double v = kernel_eval(k, a, b);
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, k.sigma_f * k.sigma_f);
    }
}

TEST(KernelProperties, PositiveSemidefinite) {
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 40; ++trial) {
        const auto fam = trial % 2 ? KernelFamily::SquaredExponential : KernelFamily::RationalQuadratic;
        const Eigen::Index n = 2 + trial % 19;
        const auto k = random_kernel(rng, fam, 3);
        const Matrix K = kernel_matrix(k, random_matrix(rng, n, 3));
        const double min_eig = Eigen::SelfAdjointEigenSolver<Matrix>(K).eigenvalues().minCoeff();
        EXPECT_GE(min_eig, -1e-10 * static_cast<double>(n) * k.sigma_f * k.sigma_f);
    }
}

TEST(KernelProperties, RationalQuadraticApproachesSquaredExponential) {
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 20; ++trial) {
        const auto se = random_kernel(rng, KernelFamily::SquaredExponential, 3);
        const auto rq = KernelSpec::rational_quadratic(se.sigma_f, se.length_scales, 1e6);
        const Matrix X = random_matrix(rng, 8, 3);
        const double diff = (kernel_matrix(rq, X) - kernel_matrix(se, X)).cwiseAbs().maxCoeff();
        EXPECT_LT(diff, 1e-4 * se.sigma_f * se.sigma_f);
    }
}

TEST(KernelProperties, SquaredExponentialDecaysMonotonically) {
    const auto k = KernelSpec::squared_exponential(1.3, {0.7});
    double prev = kernel_eval(k, vec({0.0}), vec({0.0}));
    for (int i = 1; i <= 60; ++i) {
        const double cur = kernel_eval(k, vec({0.0}), vec({0.05 * i}));
        EXPECT_LT(cur, prev);
        prev = cur;
    }
}
