#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <set>
#include <sstream>

#include "vagam/simstudy.hpp"

using Eigen::VectorXd;
using vagam::Family;
using vagam::SimScenario;

TEST_CASE("simulated dataset structure") {
    SimScenario sc;
    sc.family = Family::poisson;
    sc.n = 100;
    sc.seed = 11;
    const auto data = vagam::simulate_dataset(sc, 0);

    SECTION("fourth smooth contributes exactly zero") {
        REQUIRE(data.s.col(3).cwiseAbs().maxCoeff() == 0.0);
    }
    SECTION("third smooth vanishes at the endpoints before centering") {
        REQUIRE(vagam::detail::sim_smooth(2, 0.0) == 0.0);
        REQUIRE(vagam::detail::sim_smooth(2, 1.0) == 0.0);
    }
    SECTION("linear predictor assembles the truth") {
        for (int i = 0; i < sc.n; ++i) {
            const double eta = -1.0 + 0.5 * data.X(i, 1) + data.s.row(i).sum();
            REQUIRE(data.eta[i] == Catch::Approx(eta).margin(1e-12));
        }
        // treatment indicator splits the sample in half
        REQUIRE(data.X.col(1).sum() == sc.n / 2);
    }
    SECTION("smooth covariates stay in range") {
        REQUIRE(data.u.minCoeff() >= 0.0);
        REQUIRE(data.u.maxCoeff() <= 1.0);
    }
    SECTION("deterministic given seed and replicate") {
        const auto again = vagam::simulate_dataset(sc, 0);
        REQUIRE((data.y - again.y).cwiseAbs().maxCoeff() == 0.0);
        REQUIRE((data.u - again.u).cwiseAbs().maxCoeff() == 0.0);
        const auto other = vagam::simulate_dataset(sc, 1);
        REQUIRE((data.y - other.y).cwiseAbs().maxCoeff() > 0.0);
    }
    SECTION("responses respect the family support") {
        for (int i = 0; i < sc.n; ++i) {
            REQUIRE(data.y[i] >= 0.0);
            REQUIRE(std::floor(data.y[i]) == data.y[i]);
        }
    }
}

TEST_CASE("interval score arithmetic") {
    VectorXd y(1), l(1), u(1);
    y << 5.0;
    l << 4.0;
    u << 6.0;
    REQUIRE(vagam::interval_score(y, l, u, 0.05) == Catch::Approx(2.0));

    y << 7.0;
    REQUIRE(vagam::interval_score(y, l, u, 0.05) == Catch::Approx(42.0));

    VectorXd y10 = VectorXd::Zero(10), l10 = VectorXd::Constant(10, -1.5),
             u10 = VectorXd::Constant(10, 1.5);
    REQUIRE(vagam::interval_score(y10, l10, u10, 0.05) == Catch::Approx(30.0));

    VectorXd bad_l(1), bad_u(1);
    bad_l << 2.0;
    bad_u << 1.0;
    REQUIRE_THROWS_AS(vagam::interval_score(y, bad_l, bad_u, 0.05), vagam::DataError);
}

TEST_CASE("scenario validation") {
    SimScenario sc;
    sc.n = 101;
    REQUIRE_THROWS_AS(sc.validate(), vagam::DataError);
    sc.n = 100;
    sc.n_replicates = 0;
    REQUIRE_THROWS_AS(sc.validate(), vagam::DataError);
    sc.n_replicates = 1;
    sc.n_holdout = 100;
    REQUIRE_THROWS_AS(sc.validate(), vagam::DataError);
}

TEST_CASE("single-replicate aggregation is the identity") {
    SimScenario sc;
    sc.family = Family::normal;
    sc.n = 60;
    sc.n_replicates = 1;
    sc.seed = 3;
    const auto result = vagam::run_scenario(sc);
    REQUIRE(result.n_valid == 1);
    const auto& m = result.replicates[0].metrics;
    REQUIRE(vagam::scenario_aggregate(result, "mse_eta").mean == Catch::Approx(m.mse_eta));
    REQUIRE(vagam::scenario_aggregate(result, "mse_eta").median == Catch::Approx(m.mse_eta));
    REQUIRE(vagam::scenario_aggregate(result, "mse_eta").sd == 0.0);
    REQUIRE(vagam::scenario_aggregate(result, "interval_score").mean ==
            Catch::Approx(m.interval_score));
}

TEST_CASE("holdout rows never appear in training and runs are reproducible") {
    SimScenario sc;
    sc.family = Family::normal;
    sc.n = 60;
    sc.n_replicates = 3;
    sc.seed = 17;

    std::vector<std::pair<std::vector<int>, std::vector<int>>> splits;
    auto hook = [&](const vagam::ReplicateContext& ctx) {
        splits.emplace_back(ctx.train_rows, ctx.holdout_rows);
    };
    const auto r1 = vagam::run_scenario(sc, hook);
    for (const auto& [train, holdout] : splits) {
        REQUIRE(train.size() + holdout.size() == 60);
        std::set<int> t(train.begin(), train.end());
        for (int h : holdout) REQUIRE(t.count(h) == 0);
    }

    const auto r2 = vagam::run_scenario(sc);
    std::ostringstream a1, a2, m1, m2;
    vagam::write_aggregate_csv(a1, r1);
    vagam::write_aggregate_csv(a2, r2);
    vagam::write_replicates_csv(m1, r1);
    vagam::write_replicates_csv(m2, r2);
    REQUIRE(a1.str() == a2.str());
    REQUIRE(m1.str() == m2.str());
    REQUIRE(vagam::scenario_to_json(r1).dump(2) == vagam::scenario_to_json(r2).dump(2));
}
