#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vagam/csv.hpp"
#include "vagam/errors.hpp"
#include "vagam/inference.hpp"
#include "vagam/model.hpp"
#include "vagam/rng.hpp"
#include "vagam/vafit.hpp"

namespace vagam {

/// One simulation scenario: generator family and size plus the fitting and
/// inference settings used for every replicate.
struct SimScenario {
    Family family = Family::poisson;
    int n = 100;
    int n_replicates = 200;
    int n_holdout = 10;
    std::uint64_t seed = 1;
    double level = 0.95;
    int louis_mc_samples = 1000;
    int predict_draws = 10000;
    // amplitude of the centered smooth signal entering the linear
    // predictor (the generator family's scale convention)
    double smooth_scale = 1.0 / 3.0;
    FitSettings fit_settings;

    static constexpr double kappa1_true = -1.0;
    static constexpr double kappa2_true = 0.5;

    void validate() const {
        if (n < 2 || n % 2 != 0) throw DataError("scenario: n must be even and positive");
        if (n_replicates < 1) throw DataError("scenario: need at least one replicate");
        if (n_holdout < 0 || n_holdout >= n) throw DataError("scenario: invalid holdout size");
    }
};

/// Raw draws of one replicate plus the generating truth.
struct SimulatedData {
    Eigen::MatrixXd u;  // n x 4 smooth covariates
    Eigen::MatrixXd s;  // n x 4 centered smooth values
    Eigen::MatrixXd X;  // n x 2, intercept and treatment indicator
    Eigen::VectorXd eta;
    Eigen::VectorXd mu;
    Eigen::VectorXd y;
    GamDesign design;  // built on the full data
};

namespace detail {

inline double sim_smooth(int j, double u) {
    switch (j) {
        case 0: return 2.0 * std::sin(M_PI * u);
        case 1: return std::exp(2.0 * u);
        case 2: {
            const double a = 0.2 * std::pow(u, 11.0) * std::pow(10.0 * (1.0 - u), 6.0);
            const double b = 10.0 * std::pow(10.0 * u, 3.0) * std::pow(1.0 - u, 10.0);
            return a + b;
        }
        default: return 0.0;
    }
}

// substream layout per replicate: 0 data, 1 holdout, 2 information matrix,
// 3 prediction draws
inline std::uint64_t sub_seed(std::uint64_t seed, int replicate, int which) {
    return seed + 0x9E3779B97F4A7C15ULL * (16ull * static_cast<unsigned>(replicate) +
                                           static_cast<unsigned>(which));
}

}  // namespace detail

/// Generate one replicate of the simulation design: four smooth covariates
/// (two of them correlated with the first pair), sample-centered smooth
/// contributions, an intercept plus a half/half treatment indicator, and
/// responses from the scenario family. Deterministic given (seed, replicate).
inline SimulatedData simulate_dataset(const SimScenario& scenario, int replicate) {
    scenario.validate();
    const int n = scenario.n;
    auto rng = make_rng(detail::sub_seed(scenario.seed, replicate, 0), 0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SimulatedData data;
    data.u.resize(n, 4);
    data.s.resize(n, 4);
    data.X.resize(n, 2);
    data.eta.resize(n);
    data.mu.resize(n);
    data.y.resize(n);

    for (int i = 0; i < n; ++i) {
        const double u1 = unif(rng);
        const double u3 = unif(rng);
        const double e1 = 0.3 * unif(rng);
        const double e2 = 0.1 * unif(rng);
        data.u(i, 0) = u1;
        data.u(i, 1) = 0.7 * u1 + e1;
        data.u(i, 2) = u3;
        data.u(i, 3) = 0.9 * u3 + e2;
    }
    for (int j = 0; j < 4; ++j) {
        for (int i = 0; i < n; ++i) data.s(i, j) = detail::sim_smooth(j, data.u(i, j));
        data.s.col(j).array() -= data.s.col(j).mean();
        data.s.col(j) *= scenario.smooth_scale;
    }
    for (int i = 0; i < n; ++i) {
        data.X(i, 0) = 1.0;
        data.X(i, 1) = (i < n / 2) ? 1.0 : 0.0;
        data.eta[i] = SimScenario::kappa1_true + SimScenario::kappa2_true * data.X(i, 1) +
                      data.s.row(i).sum();
        data.mu[i] = inverse_link(scenario.family, data.eta[i]);
    }
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        switch (scenario.family) {
            case Family::normal:
                data.y[i] = data.eta[i] + nd(rng);
                break;
            case Family::poisson: {
                std::poisson_distribution<long> pd(data.mu[i]);
                data.y[i] = static_cast<double>(pd(rng));
                break;
            }
            case Family::bernoulli: {
                std::bernoulli_distribution bd(data.mu[i]);
                data.y[i] = bd(rng) ? 1.0 : 0.0;
                break;
            }
        }
    }

    const int K = knot_count_rule(n);
    std::vector<Eigen::VectorXd> smooth_cols;
    for (int j = 0; j < 4; ++j) smooth_cols.push_back(data.u.col(j));
    data.design = make_design(data.y, data.X, smooth_cols, std::vector<int>(4, K),
                              scenario.family);
    return data;
}

/// Interval score for central (1-alpha) prediction intervals, summed over
/// the evaluation points. Lower is better.
inline double interval_score(const Eigen::VectorXd& y, const Eigen::VectorXd& lower,
                             const Eigen::VectorXd& upper, double alpha) {
    if (y.size() != lower.size() || y.size() != upper.size())
        throw DataError("interval_score: length mismatch");
    double s = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (lower[i] > upper[i]) throw DataError("interval_score: crossed bounds at point " +
                                                 std::to_string(i));
        s += upper[i] - lower[i];
        if (y[i] > upper[i]) s += 2.0 / alpha * (1.0);
        if (y[i] < lower[i]) s += 2.0 / alpha * (1.0);
    }
    return s;
}

struct ReplicateMetrics {
    double mse_eta = 0.0;
    double mse_mu = 0.0;
    double mse_kappa2 = 0.0;
    double bias_kappa2 = 0.0;
    bool ci_covered_kappa2 = false;
    double ci_width_kappa2 = 0.0;
    double interval_score = 0.0;
    double interval_width_mean = 0.0;
    double fit_seconds = 0.0;
    bool converged = false;
};

struct ReplicateRecord {
    ReplicateMetrics metrics;
    bool valid = false;      // fit produced estimates
    bool ci_valid = false;   // information matrix inverted
    bool pred_valid = false; // holdout prediction succeeded
    std::string note;
};

/// Callback run once per replicate with full access to the fitted objects.
/// `fit` is the full-data fit that the error and coverage metrics come
/// from; `holdout_fit` is the reduced fit behind the out-of-sample
/// prediction intervals.
struct ReplicateContext {
    int replicate = 0;
    const SimulatedData& data;
    const std::vector<int>& train_rows;
    const std::vector<int>& holdout_rows;
    const FitResult& fit;
    const InformationMatrix* info;        // null if inversion failed
    const FitResult* holdout_fit;         // null if prediction skipped or failed
    const GamDesign* holdout_design;      // training design of the holdout fit
    const PredictionResult* prediction;   // null if prediction failed
};
using ReplicateHook = std::function<void(const ReplicateContext&)>;

struct Aggregate {
    double mean = 0.0;
    double sd = 0.0;
    double median = 0.0;
};

struct ScenarioResult {
    SimScenario scenario;
    std::vector<ReplicateRecord> replicates;
    int n_failed = 0;
    int n_converged = 0;
    int n_valid = 0;
    int n_ci_valid = 0;
    double ci_coverage_kappa2 = 0.0;
    double converged_prop = 0.0;
    std::vector<std::pair<std::string, Aggregate>> aggregates;
};

namespace detail {

inline Aggregate aggregate_values(std::vector<double> v) {
    Aggregate agg;
    if (v.empty()) return agg;
    const double n = static_cast<double>(v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    agg.mean = sum / n;
    double ss = 0.0;
    for (double x : v) ss += (x - agg.mean) * (x - agg.mean);
    agg.sd = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    std::sort(v.begin(), v.end());
    const size_t m = v.size() / 2;
    agg.median = v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
    return agg;
}

inline ReplicateRecord run_replicate(const SimScenario& scenario, int replicate,
                                     const ReplicateHook& hook, std::mutex* hook_mutex) {
    ReplicateRecord rec;
    try {
        const SimulatedData data = simulate_dataset(scenario, replicate);
        const int n = scenario.n;

        // Estimation metrics come from a fit of the full dataset; the
        // holdout protocol below only drives the out-of-sample interval
        // metrics.
        const auto t0 = std::chrono::steady_clock::now();
        const FitResult fit = vagam::fit(data.design, scenario.fit_settings);
        const auto t1 = std::chrono::steady_clock::now();
        rec.metrics.fit_seconds = std::chrono::duration<double>(t1 - t0).count();
        rec.metrics.converged = fit.converged;
        rec.valid = fit.params.kappa.size() == 2 && fit.params.kappa.allFinite();
        if (!rec.valid) {
            rec.note = "fit produced no usable estimates";
            return rec;
        }

        const Eigen::VectorXd eta_hat =
            data.design.X * fit.params.kappa + data.design.Z * fit.vparams.a;
        double se_eta = 0.0, se_mu = 0.0;
        for (int i = 0; i < n; ++i) {
            const double de = eta_hat[i] - data.eta[i];
            const double dm = inverse_link(scenario.family, eta_hat[i]) - data.mu[i];
            se_eta += de * de;
            se_mu += dm * dm;
        }
        rec.metrics.mse_eta = se_eta / n;
        rec.metrics.mse_mu = se_mu / n;
        rec.metrics.bias_kappa2 = fit.params.kappa[1] - SimScenario::kappa2_true;
        rec.metrics.mse_kappa2 = rec.metrics.bias_kappa2 * rec.metrics.bias_kappa2;

        InformationMatrix info;
        bool have_info = false;
        try {
            info = louis_information(fit, data.design, scenario.louis_mc_samples,
                                     detail::sub_seed(scenario.seed, replicate, 2));
            const auto wald = parametric_wald(fit, info, scenario.level);
            rec.metrics.ci_covered_kappa2 = wald[1].ci_lower <= SimScenario::kappa2_true &&
                                            SimScenario::kappa2_true <= wald[1].ci_upper;
            rec.metrics.ci_width_kappa2 = wald[1].ci_upper - wald[1].ci_lower;
            rec.ci_valid = true;
            have_info = true;
        } catch (const NumericalError& e) {
            rec.note += std::string("information matrix failed: ") + e.what() + "; ";
        }

        // holdout selection: partial Fisher-Yates on the row indices
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        auto rng = make_rng(detail::sub_seed(scenario.seed, replicate, 1), 0);
        for (int k = 0; k < scenario.n_holdout; ++k) {
            std::uniform_int_distribution<int> pick(k, n - 1);
            std::swap(idx[static_cast<size_t>(k)], idx[static_cast<size_t>(pick(rng))]);
        }
        std::vector<int> holdout(idx.begin(), idx.begin() + scenario.n_holdout);
        std::vector<int> train(idx.begin() + scenario.n_holdout, idx.end());
        std::sort(holdout.begin(), holdout.end());
        std::sort(train.begin(), train.end());

        FitResult holdout_fit;
        GamDesign train_design;
        PredictionResult pred;
        bool have_pred = false;
        try {
            const int nh = scenario.n_holdout;
            if (nh > 0) {
                const int nt = static_cast<int>(train.size());
                Eigen::VectorXd y_tr(nt);
                Eigen::MatrixXd X_tr(nt, 2);
                std::vector<Eigen::VectorXd> u_tr(4, Eigen::VectorXd(nt));
                for (int i = 0; i < nt; ++i) {
                    const int r = train[static_cast<size_t>(i)];
                    y_tr[i] = data.y[r];
                    X_tr.row(i) = data.X.row(r);
                    for (int j = 0; j < 4; ++j) u_tr[static_cast<size_t>(j)][i] = data.u(r, j);
                }
                const int K = knot_count_rule(scenario.n);
                train_design =
                    make_design(y_tr, X_tr, u_tr, std::vector<int>(4, K), scenario.family);
                holdout_fit = vagam::fit(train_design, scenario.fit_settings);
                rec.metrics.converged = rec.metrics.converged && holdout_fit.converged;

                Eigen::MatrixXd X_ho(nh, 2);
                Eigen::VectorXd y_ho(nh);
                Eigen::MatrixXd Z_ho(nh, train_design.d);
                for (int i = 0; i < nh; ++i) {
                    const int r = holdout[static_cast<size_t>(i)];
                    X_ho.row(i) = data.X.row(r);
                    y_ho[i] = data.y[r];
                }
                for (int j = 0; j < 4; ++j) {
                    Eigen::VectorXd uh(nh);
                    for (int i = 0; i < nh; ++i)
                        uh[i] = data.u(holdout[static_cast<size_t>(i)], j);
                    Z_ho.middleCols(train_design.block_offset[static_cast<size_t>(j)],
                                    train_design.block_dim(j)) =
                        evaluate_basis(train_design.bases[static_cast<size_t>(j)], uh);
                }
                pred = predict(holdout_fit, X_ho, Z_ho, scenario.level, scenario.predict_draws,
                               detail::sub_seed(scenario.seed, replicate, 3));
                rec.metrics.interval_score =
                    interval_score(y_ho, pred.lower, pred.upper, 1.0 - scenario.level);
                rec.metrics.interval_width_mean = (pred.upper - pred.lower).mean();
                rec.pred_valid = true;
                have_pred = true;
            }
        } catch (const std::exception& e) {
            rec.note += std::string("prediction failed: ") + e.what() + "; ";
        }

        if (hook) {
            ReplicateContext ctx{replicate,
                                 data,
                                 train,
                                 holdout,
                                 fit,
                                 have_info ? &info : nullptr,
                                 have_pred ? &holdout_fit : nullptr,
                                 have_pred ? &train_design : nullptr,
                                 have_pred ? &pred : nullptr};
            if (hook_mutex) {
                std::lock_guard<std::mutex> lock(*hook_mutex);
                hook(ctx);
            } else {
                hook(ctx);
            }
        }
    } catch (const std::exception& e) {
        rec.valid = false;
        rec.note += e.what();
    }
    return rec;
}

}  // namespace detail

/// Run every replicate of a scenario (in parallel when hardware allows;
/// results are identical to sequential execution because each replicate
/// draws from its own substreams) and aggregate the metrics.
inline ScenarioResult run_scenario(const SimScenario& scenario, const ReplicateHook& hook = {}) {
    scenario.validate();
    ScenarioResult result;
    result.scenario = scenario;
    result.replicates.resize(static_cast<size_t>(scenario.n_replicates));

    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned n_threads =
        std::min<unsigned>(hw, static_cast<unsigned>(scenario.n_replicates));
    std::mutex hook_mutex;
    if (n_threads <= 1) {
        for (int r = 0; r < scenario.n_replicates; ++r)
            result.replicates[static_cast<size_t>(r)] =
                detail::run_replicate(scenario, r, hook, nullptr);
    } else {
        std::atomic<int> next{0};
        auto worker = [&]() {
            for (;;) {
                const int r = next.fetch_add(1);
                if (r >= scenario.n_replicates) break;
                result.replicates[static_cast<size_t>(r)] =
                    detail::run_replicate(scenario, r, hook, &hook_mutex);
            }
        };
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::vector<double> mse_eta, mse_mu, mse_k2, bias_k2, width_k2, iscore, iwidth, seconds;
    int covered = 0;
    for (const auto& rec : result.replicates) {
        if (!rec.valid) {
            ++result.n_failed;
            continue;
        }
        ++result.n_valid;
        if (rec.metrics.converged) ++result.n_converged;
        mse_eta.push_back(rec.metrics.mse_eta);
        mse_mu.push_back(rec.metrics.mse_mu);
        mse_k2.push_back(rec.metrics.mse_kappa2);
        bias_k2.push_back(rec.metrics.bias_kappa2);
        seconds.push_back(rec.metrics.fit_seconds);
        if (rec.ci_valid) {
            ++result.n_ci_valid;
            if (rec.metrics.ci_covered_kappa2) ++covered;
            width_k2.push_back(rec.metrics.ci_width_kappa2);
        }
        if (rec.pred_valid) {
            iscore.push_back(rec.metrics.interval_score);
            iwidth.push_back(rec.metrics.interval_width_mean);
        }
    }
    result.ci_coverage_kappa2 =
        result.n_ci_valid > 0 ? static_cast<double>(covered) / result.n_ci_valid : 0.0;
    result.converged_prop =
        result.n_valid > 0 ? static_cast<double>(result.n_converged) / result.n_valid : 0.0;
    result.aggregates = {
        {"mse_eta", detail::aggregate_values(mse_eta)},
        {"mse_mu", detail::aggregate_values(mse_mu)},
        {"mse_kappa2", detail::aggregate_values(mse_k2)},
        {"bias_kappa2", detail::aggregate_values(bias_k2)},
        {"ci_width_kappa2", detail::aggregate_values(width_k2)},
        {"interval_score", detail::aggregate_values(iscore)},
        {"interval_width_mean", detail::aggregate_values(iwidth)},
        {"fit_seconds", detail::aggregate_values(seconds)},
    };
    return result;
}

inline const Aggregate& scenario_aggregate(const ScenarioResult& result,
                                           const std::string& name) {
    for (const auto& [key, agg] : result.aggregates)
        if (key == name) return agg;
    throw DataError("unknown aggregate metric: " + name);
}

/// Aggregated table as CSV rows (metric, mean, sd, median) plus the
/// proportion rows.
inline void write_aggregate_csv(std::ostream& out, const ScenarioResult& result) {
    std::vector<std::vector<double>> rows;
    std::vector<std::string> names;
    for (const auto& [name, agg] : result.aggregates) {
        if (name == "fit_seconds") continue;  // wall clock would break byte reproducibility
        names.push_back(name);
        rows.push_back({agg.mean, agg.sd, agg.median});
    }
    names.push_back("ci_coverage_kappa2");
    rows.push_back({result.ci_coverage_kappa2, 0.0, result.ci_coverage_kappa2});
    names.push_back("converged_prop");
    rows.push_back({result.converged_prop, 0.0, result.converged_prop});
    names.push_back("n_failed");
    rows.push_back({static_cast<double>(result.n_failed), 0.0,
                    static_cast<double>(result.n_failed)});

    out << "metric,mean,sd,median\n";
    for (size_t i = 0; i < rows.size(); ++i) {
        out << names[i];
        for (double v : rows[i]) out << ',' << format_double(v);
        out << '\n';
    }
}

/// Per-replicate raw metrics as CSV (plot-ready).
inline void write_replicates_csv(std::ostream& out, const ScenarioResult& result) {
    out << "replicate,valid,converged,mse_eta,mse_mu,mse_kappa2,bias_kappa2,"
           "ci_valid,ci_covered_kappa2,ci_width_kappa2,pred_valid,interval_score,"
           "interval_width_mean\n";
    for (size_t r = 0; r < result.replicates.size(); ++r) {
        const auto& rec = result.replicates[r];
        const auto& m = rec.metrics;
        out << r << ',' << rec.valid << ',' << m.converged << ',' << format_double(m.mse_eta)
            << ',' << format_double(m.mse_mu) << ',' << format_double(m.mse_kappa2) << ','
            << format_double(m.bias_kappa2) << ',' << rec.ci_valid << ','
            << m.ci_covered_kappa2 << ',' << format_double(m.ci_width_kappa2) << ','
            << rec.pred_valid << ',' << format_double(m.interval_score) << ','
            << format_double(m.interval_width_mean) << '\n';
    }
}

/// Aggregated results and scenario echo as JSON.
inline nlohmann::json scenario_to_json(const ScenarioResult& result) {
    nlohmann::json j;
    j["scenario"] = {
        {"family", family_name(result.scenario.family)},
        {"n", result.scenario.n},
        {"n_replicates", result.scenario.n_replicates},
        {"n_holdout", result.scenario.n_holdout},
        {"seed", result.scenario.seed},
        {"level", result.scenario.level},
        {"knots", knot_count_rule(result.scenario.n)},
        {"max_outer_iters", result.scenario.fit_settings.max_outer_iters},
        {"tol_lowerbound", result.scenario.fit_settings.tol_lowerbound},
        {"tol_params", result.scenario.fit_settings.tol_params},
    };
    nlohmann::json aggs;
    for (const auto& [name, agg] : result.aggregates) {
        if (name == "fit_seconds") continue;
        aggs[name] = {{"mean", agg.mean}, {"sd", agg.sd}, {"median", agg.median}};
    }
    j["aggregates"] = aggs;
    j["ci_coverage_kappa2"] = result.ci_coverage_kappa2;
    j["converged_prop"] = result.converged_prop;
    j["n_failed"] = result.n_failed;
    j["n_valid"] = result.n_valid;
    return j;
}

}  // namespace vagam
