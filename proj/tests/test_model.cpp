#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>

#include "oracles.hpp"
#include "vagam/model.hpp"
#include "vagam/vafit.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using vagam::Family;

TEST_CASE("design validation") {
    const int n = 40;
    MatrixXd X = MatrixXd::Ones(n, 1);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    VectorXd u(n);
    for (int i = 0; i < n; ++i) u[i] = unif(rng);

    SECTION("bernoulli rejects values outside {0,1}") {
        VectorXd y = VectorXd::Zero(n);
        y[7] = 2.0;
        REQUIRE_THROWS_AS(vagam::make_design(y, X, {u}, {4}, Family::bernoulli),
                          vagam::DataError);
    }
    SECTION("poisson rejects negative and fractional counts") {
        VectorXd y = VectorXd::Ones(n);
        y[3] = -1.0;
        REQUIRE_THROWS_AS(vagam::make_design(y, X, {u}, {4}, Family::poisson), vagam::DataError);
        y[3] = 1.5;
        REQUIRE_THROWS_AS(vagam::make_design(y, X, {u}, {4}, Family::poisson), vagam::DataError);
    }
    SECTION("rank-deficient X is rejected") {
        MatrixXd X2(n, 2);
        X2.col(0).setOnes();
        X2.col(1).setOnes();
        VectorXd y = VectorXd::Ones(n);
        REQUIRE_THROWS_AS(vagam::make_design(y, X2, {u}, {4}, Family::poisson),
                          vagam::DataError);
    }
}

TEST_CASE("linear predictor") {
    auto inst = oracles::make_test_instance(Family::normal, 50, 1, 4, 9);
    const auto& design = inst.design;

    SECTION("intercept only") {
        VectorXd kappa(2);
        kappa << 2.5, 0.0;
        const VectorXd eta =
            vagam::linear_predictor(design, kappa, VectorXd::Zero(design.d));
        REQUIRE((eta.array() - 2.5).abs().maxCoeff() == 0.0);
    }
    SECTION("matches the direct matrix product") {
        std::mt19937_64 rng(2);
        std::normal_distribution<double> nd;
        VectorXd kappa(2), coefs(design.d);
        for (int i = 0; i < 2; ++i) kappa[i] = nd(rng);
        for (int i = 0; i < design.d; ++i) coefs[i] = nd(rng);
        const VectorXd eta = vagam::linear_predictor(design, kappa, coefs);
        const VectorXd direct = design.X * kappa + design.Z * coefs;
        REQUIRE((eta - direct).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("dimension mismatch throws") {
        REQUIRE_THROWS_AS(
            vagam::linear_predictor(design, VectorXd::Zero(3), VectorXd::Zero(design.d)),
            vagam::DataError);
    }
}

TEST_CASE("quadratic form offsets") {
    auto inst = oracles::make_test_instance(Family::normal, 30, 1, 4, 12);
    const auto& design = inst.design;
    const int d = design.d;

    SECTION("identity covariance gives half squared row norms") {
        const VectorXd off = vagam::quadratic_form_offsets(design, MatrixXd::Identity(d, d));
        for (int i = 0; i < design.n; ++i)
            REQUIRE(off[i] == Catch::Approx(0.5 * design.Z.row(i).squaredNorm()).margin(1e-14));
    }
    SECTION("vanishing covariance gives vanishing offsets") {
        const VectorXd off =
            vagam::quadratic_form_offsets(design, 1e-30 * MatrixXd::Identity(d, d));
        REQUIRE(off.maxCoeff() < 1e-25);
        REQUIRE(off.minCoeff() >= 0.0);
    }
    SECTION("random SPD matrix matches an explicit row loop") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> nd;
        MatrixXd Lrand(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) Lrand(i, j) = (j <= i) ? nd(rng) : 0.0;
        Lrand.diagonal() = Lrand.diagonal().cwiseAbs().array() + 0.5;
        const MatrixXd A = Lrand * Lrand.transpose();
        const VectorXd off = vagam::quadratic_form_offsets(design, A);
        for (int i = 0; i < design.n; ++i) {
            double s = 0.0;
            for (int r = 0; r < d; ++r)
                for (int c = 0; c < d; ++c) s += design.Z(i, r) * A(r, c) * design.Z(i, c);
            REQUIRE(off[i] == Catch::Approx(0.5 * s).epsilon(1e-10));
        }
    }
    SECTION("non positive definite covariance throws") {
        MatrixXd A = -MatrixXd::Identity(d, d);
        REQUIRE_THROWS_AS(vagam::quadratic_form_offsets(design, A), vagam::NumericalError);
    }
}

TEST_CASE("block-diagonal variational parameters give the same bound") {
    auto inst = oracles::make_test_instance(Family::poisson, 60, 2, 4, 21);
    const auto& design = inst.design;
    const int d = design.d;

    // block-diagonal covariance assembled per smooth
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    MatrixXd A = MatrixXd::Zero(d, d);
    for (int j = 0; j < design.q; ++j) {
        const int off = design.block_offset[static_cast<size_t>(j)];
        const int dj = design.block_dim(j);
        MatrixXd Lj(dj, dj);
        for (int r = 0; r < dj; ++r)
            for (int c = 0; c < dj; ++c) Lj(r, c) = (c <= r) ? 0.2 * nd(rng) : 0.0;
        Lj.diagonal() = Lj.diagonal().cwiseAbs().array() + 0.3;
        A.block(off, off, dj, dj) = Lj * Lj.transpose();
    }
    VectorXd a(d);
    for (int i = 0; i < d; ++i) a[i] = 0.1 * nd(rng);

    const auto vp_block = vagam::VariationalParams::from_covariance(
        a, A, vagam::VariationalParams::Structure::block_diagonal);
    const auto vp_unstruc = vagam::VariationalParams::from_covariance(
        a, A, vagam::VariationalParams::Structure::unstructured);

    vagam::ModelParams params;
    params.kappa = VectorXd::Zero(2);
    params.kappa << -0.5, 0.4;
    params.lambda = VectorXd::Constant(design.q, 2.0);

    const double b1 = vagam::lower_bound(design, params, vp_block);
    const double b2 = vagam::lower_bound(design, params, vp_unstruc);
    REQUIRE(b1 == Catch::Approx(b2).margin(1e-10));
}
