#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "vagam/errors.hpp"
#include "vagam/model.hpp"
#include "vagam/rng.hpp"
#include "vagam/stats.hpp"
#include "vagam/vafit.hpp"

namespace vagam {

/// Variational observed information matrix over the stacked parameter
/// vector (kappa, phi if present, lambda).
struct InformationMatrix {
    Eigen::MatrixXd matrix;
    int mc_samples = 0;
    std::uint64_t seed = 0;
    std::vector<std::string> parameter_labels;
    std::vector<std::string> warnings;
    int p = 0;
    bool has_phi = false;
    int q = 0;

    /// kappa block of the inverse. The inversion is carried out after an
    /// exact diagonal rescaling of the lambda coordinates (equivalent to
    /// working in log-lambda), which keeps the system well conditioned when
    /// a smoothing parameter is very large.
    Eigen::MatrixXd kappa_covariance(const Eigen::VectorXd& lambda_hat) const {
        const auto t = matrix.rows();
        Eigen::VectorXd scale = Eigen::VectorXd::Ones(t);
        for (int j = 0; j < q; ++j)
            scale[t - q + j] = lambda_hat[j];
        Eigen::MatrixXd J = scale.asDiagonal() * matrix * scale.asDiagonal();
        Eigen::FullPivLU<Eigen::MatrixXd> lu(J);
        if (!lu.isInvertible()) {
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
            const auto& sv = svd.singularValues();
            const double cond = sv[0] / std::max(sv[sv.size() - 1], 1e-300);
            throw NumericalError("information matrix is singular (condition number " +
                                 std::to_string(cond) + ")");
        }
        Eigen::MatrixXd inv = lu.inverse();
        Eigen::MatrixXd cov = inv.topLeftCorner(p, p);
        cov = 0.5 * (cov + cov.transpose());
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) {
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
            const auto& sv = svd.singularValues();
            const double cond = sv[0] / std::max(sv[sv.size() - 1], 1e-300);
            throw NumericalError(
                "kappa block of the inverse information is not positive definite "
                "(condition number " + std::to_string(cond) + ")");
        }
        return cov;
    }
};

namespace detail {

/// Scores that are quadratic polynomials in beta are written, after
/// centering at the variational mean (beta = a + eps), as
///   s = c + b'eps + 0.5 eps'H eps.
/// Products of two such scores have closed-form expectations under
/// eps ~ N(0, A).
struct QuadScore {
    double c = 0.0;
    Eigen::VectorXd b;
    Eigen::MatrixXd H;  // empty means zero
};

inline double quad_score_mean(const QuadScore& s, const Eigen::MatrixXd& A) {
    double m = s.c;
    if (s.H.size() > 0) m += 0.5 * s.H.cwiseProduct(A).sum();
    return m;
}

inline double quad_score_product_mean(const QuadScore& s1, const QuadScore& s2,
                                      const Eigen::MatrixXd& A) {
    double r = s1.c * s2.c;
    if (s1.b.size() > 0 && s2.b.size() > 0) r += s1.b.dot(A * s2.b);
    const bool h1 = s1.H.size() > 0, h2 = s2.H.size() > 0;
    const double t1 = h1 ? s1.H.cwiseProduct(A).sum() : 0.0;
    const double t2 = h2 ? s2.H.cwiseProduct(A).sum() : 0.0;
    r += 0.5 * (s1.c * t2 + s2.c * t1) + 0.25 * t1 * t2;
    if (h1 && h2) r += 0.5 * (s1.H * A * s2.H * A).trace();
    return r;
}

}  // namespace detail

/// Louis-method variational observed information matrix: the expectation of
/// the negative complete-data Hessian minus the second moment of the
/// complete-data score, both under the fitted variational normal law.
/// Expectations with a closed form under that law are computed analytically
/// (all normal-family terms, all smoothing-parameter terms, Poisson terms
/// through the log-normal moment); the Bernoulli mean-function terms use
/// seeded Monte Carlo with mc_samples draws.
inline InformationMatrix louis_information(const FitResult& fit, const GamDesign& design,
                                           int mc_samples = 1000, std::uint64_t seed = 1) {
    const int p = design.p;
    const int q = design.q;
    const int d = design.d;
    const bool with_phi = has_dispersion(design.family);
    const int t = p + (with_phi ? 1 : 0) + q;
    const int l0 = p + (with_phi ? 1 : 0);  // first lambda index

    InformationMatrix info;
    info.p = p;
    info.has_phi = with_phi;
    info.q = q;
    info.mc_samples = design.family == Family::bernoulli ? mc_samples : 0;
    info.seed = seed;
    for (int k = 0; k < p; ++k) info.parameter_labels.push_back("kappa_" + std::to_string(k + 1));
    if (with_phi) info.parameter_labels.push_back("phi");
    for (int j = 0; j < q; ++j) info.parameter_labels.push_back("lambda_" + std::to_string(j + 1));
    if (!fit.converged)
        info.warnings.push_back("information matrix evaluated at a non-converged fit");

    const Eigen::VectorXd& a = fit.vparams.a;
    const Eigen::MatrixXd A = fit.vparams.A();
    const Eigen::VectorXd& kappa = fit.params.kappa;
    const Eigen::VectorXd& lambda = fit.params.lambda;
    const double phi = fit.params.phi;
    const Eigen::VectorXd eta_bar = design.X * kappa + design.Z * a;

    // penalty blocks embedded in the full coefficient space
    std::vector<Eigen::MatrixXd> S_embed(static_cast<size_t>(q));
    for (int j = 0; j < q; ++j) {
        const int dj = design.block_dim(j);
        S_embed[static_cast<size_t>(j)] = Eigen::MatrixXd::Zero(d, d);
        S_embed[static_cast<size_t>(j)].block(design.block_offset[static_cast<size_t>(j)],
                                              design.block_offset[static_cast<size_t>(j)], dj, dj) =
            design.bases[static_cast<size_t>(j)].penalty;
    }

    // smoothing-parameter scores are quadratic in beta for every family
    std::vector<detail::QuadScore> lambda_scores(static_cast<size_t>(q));
    for (int j = 0; j < q; ++j) {
        auto& s = lambda_scores[static_cast<size_t>(j)];
        const auto& Sj = S_embed[static_cast<size_t>(j)];
        s.c = 0.5 * design.block_dim(j) / lambda[j] - 0.5 * a.dot(Sj * a);
        s.b = -(Sj * a);
        s.H = -Sj;
    }

    Eigen::MatrixXd Hbar = Eigen::MatrixXd::Zero(t, t);  // E[-d^2 l_com]
    Eigen::MatrixXd Sm = Eigen::MatrixXd::Zero(t, t);    // E[s s']

    for (int j = 0; j < q; ++j)
        Hbar(l0 + j, l0 + j) = 0.5 * design.block_dim(j) / (lambda[j] * lambda[j]);
    for (int j = 0; j < q; ++j)
        for (int k = 0; k <= j; ++k) {
            const double v = detail::quad_score_product_mean(
                lambda_scores[static_cast<size_t>(j)], lambda_scores[static_cast<size_t>(k)], A);
            Sm(l0 + j, l0 + k) = v;
            Sm(l0 + k, l0 + j) = v;
        }

    if (design.family == Family::normal) {
        const Eigen::VectorXd r = design.y - design.X * kappa;
        const Eigen::VectorXd resid = r - design.Z * a;
        const double quad_sum =
            d > 0 ? (design.Z * A).cwiseProduct(design.Z).sum() : 0.0;

        Hbar.topLeftCorner(p, p) = design.X.transpose() * design.X / phi;
        Hbar.block(0, p, p, 1) = design.X.transpose() * resid / (phi * phi);
        Hbar.block(p, 0, 1, p) = Hbar.block(0, p, p, 1).transpose();
        Hbar(p, p) = -0.5 * design.n / (phi * phi) +
                     (resid.squaredNorm() + quad_sum) / (phi * phi * phi);

        std::vector<detail::QuadScore> scores(static_cast<size_t>(t));
        const Eigen::MatrixXd ZtX = design.Z.transpose() * design.X;
        for (int k = 0; k < p; ++k) {
            scores[static_cast<size_t>(k)].c = design.X.col(k).dot(resid) / phi;
            scores[static_cast<size_t>(k)].b = -ZtX.col(k) / phi;
        }
        scores[static_cast<size_t>(p)].c =
            -0.5 * design.n / phi + 0.5 * resid.squaredNorm() / (phi * phi);
        scores[static_cast<size_t>(p)].b = -(design.Z.transpose() * resid) / (phi * phi);
        {
            Eigen::MatrixXd ZtZ = Eigen::MatrixXd::Zero(d, d);
            if (d > 0) {
                ZtZ.selfadjointView<Eigen::Lower>().rankUpdate(design.Z.transpose());
                ZtZ = ZtZ.selfadjointView<Eigen::Lower>();
            }
            scores[static_cast<size_t>(p)].H = ZtZ / (phi * phi);
        }
        for (int j = 0; j < q; ++j) scores[static_cast<size_t>(l0 + j)] = lambda_scores[static_cast<size_t>(j)];

        for (int s = 0; s < t; ++s)
            for (int u = 0; u <= s; ++u) {
                if (s >= l0 && u >= l0) continue;  // lambda-lambda already done
                const double v = detail::quad_score_product_mean(scores[static_cast<size_t>(s)],
                                                                 scores[static_cast<size_t>(u)], A);
                Sm(s, u) = v;
                Sm(u, s) = v;
            }
    } else if (design.family == Family::poisson) {
        // tilted-normal moments: E[e^{eta_i} g(beta)] = m_i E[g] under a
        // mean shift of A z_i
        const Eigen::MatrixXd V = d > 0 ? Eigen::MatrixXd(design.Z * A * design.Z.transpose())
                                        : Eigen::MatrixXd::Zero(design.n, design.n);
        Eigen::VectorXd m(design.n);
        for (int i = 0; i < design.n; ++i) m[i] = std::exp(eta_bar[i] + 0.5 * V(i, i));
        if (!m.allFinite())
            throw NumericalError("louis_information: overflow in expected Poisson mean");

        Hbar.topLeftCorner(p, p) = design.X.transpose() * m.asDiagonal() * design.X;

        Eigen::MatrixXd M(design.n, design.n);
        for (int i = 0; i < design.n; ++i)
            for (int k2 = 0; k2 < design.n; ++k2)
                M(i, k2) = (design.y[i] - m[i]) * (design.y[k2] - m[k2]) +
                           m[i] * m[k2] * std::expm1(V(i, k2));
        Sm.topLeftCorner(p, p) = design.X.transpose() * M * design.X;

        const Eigen::MatrixXd Delta = d > 0 ? Eigen::MatrixXd(A * design.Z.transpose())
                                            : Eigen::MatrixXd::Zero(0, design.n);  // d x n
        for (int j = 0; j < q; ++j) {
            const auto& s = lambda_scores[static_cast<size_t>(j)];
            const double s_mean = detail::quad_score_mean(s, A);
            Eigen::VectorXd e(design.n);
            for (int i = 0; i < design.n; ++i) {
                const auto delta_i = Delta.col(i);
                const double tilt = s.b.dot(delta_i) + 0.5 * delta_i.dot(s.H * delta_i);
                e[i] = (design.y[i] - m[i]) * s_mean - m[i] * tilt;
            }
            const Eigen::VectorXd cross = design.X.transpose() * e;
            Sm.block(0, l0 + j, p, 1) = cross;
            Sm.block(l0 + j, 0, 1, p) = cross.transpose();
        }
    } else {  // bernoulli
        const int G = mc_samples;
        auto rng = make_rng(seed, 0);
        std::normal_distribution<double> nd(0.0, 1.0);
        Eigen::MatrixXd xi(d, G);
        for (int g = 0; g < G; ++g)
            for (int i = 0; i < d; ++i) xi(i, g) = nd(rng);
        const Eigen::MatrixXd B = fit.vparams.L * xi;  // centered draws, d x G
        Eigen::MatrixXd etaG = design.Z * B;           // n x G
        etaG.colwise() += eta_bar;
        Eigen::MatrixXd sig = etaG.unaryExpr([](double x) { return detail::logistic(x); });

        // E[-Hess] kappa block: X' diag(mean sigma(1-sigma)) X
        const Eigen::VectorXd wbar =
            (sig.array() * (1.0 - sig.array())).rowwise().mean().matrix();
        Hbar.topLeftCorner(p, p) = design.X.transpose() * wbar.asDiagonal() * design.X;

        // per-draw scores for kappa and lambda
        Eigen::MatrixXd Sk(p, G);
        for (int g = 0; g < G; ++g)
            Sk.col(g) = design.X.transpose() * (design.y - sig.col(g));
        Eigen::MatrixXd Sl(q, G);
        for (int j = 0; j < q; ++j) {
            const int off = design.block_offset[static_cast<size_t>(j)];
            const int dj = design.block_dim(j);
            const auto& Sj = design.bases[static_cast<size_t>(j)].penalty;
            for (int g = 0; g < G; ++g) {
                const Eigen::VectorXd bj = a.segment(off, dj) + B.block(off, g, dj, 1);
                Sl(j, g) = 0.5 * dj / lambda[j] - 0.5 * bj.dot(Sj * bj);
            }
        }

        auto mc_entry = [&](const Eigen::ArrayXd& per_draw, double& se) {
            const double mean = per_draw.mean();
            const double var = (per_draw - mean).square().sum() / (G - 1);
            se = std::sqrt(var / G);
            return mean;
        };
        double max_rel_se = 0.0;
        const auto note_se = [&](double value, double se) {
            if (std::abs(value) > 1e-8) max_rel_se = std::max(max_rel_se, se / std::abs(value));
        };
        for (int s = 0; s < p; ++s)
            for (int u = 0; u <= s; ++u) {
                double se;
                const double v = mc_entry(
                    (Sk.row(s).array() * Sk.row(u).array()).transpose(), se);
                note_se(v, se);
                Sm(s, u) = v;
                Sm(u, s) = v;
            }
        for (int j = 0; j < q; ++j)
            for (int s = 0; s < p; ++s) {
                double se;
                const double v = mc_entry(
                    (Sk.row(s).array() * Sl.row(j).array()).transpose(), se);
                note_se(v, se);
                Sm(s, l0 + j) = v;
                Sm(l0 + j, s) = v;
            }
        if (max_rel_se > 0.05)
            info.warnings.push_back(
                "Monte Carlo standard error exceeds 5% of an information entry; "
                "consider more samples (max relative SE " + std::to_string(max_rel_se) + ")");
    }

    info.matrix = Hbar - Sm;
    info.matrix = 0.5 * (info.matrix + info.matrix.transpose());
    return info;
}

struct WaldRow {
    std::string label;
    double estimate = 0.0;
    double se = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double p_value = 1.0;
};

/// Wald estimates, standard errors, confidence intervals and two-sided
/// p-values for the parametric coefficients.
inline std::vector<WaldRow> parametric_wald(const FitResult& fit, const InformationMatrix& info,
                                            double level) {
    const Eigen::MatrixXd cov = info.kappa_covariance(fit.params.lambda);
    const double z = normal_quantile(0.5 + 0.5 * level);
    std::vector<WaldRow> rows;
    for (int k = 0; k < info.p; ++k) {
        WaldRow row;
        row.label = info.parameter_labels[static_cast<size_t>(k)];
        row.estimate = fit.params.kappa[k];
        const double v = cov(k, k);
        if (!(v > 0.0) || !std::isfinite(v))
            throw NumericalError("parametric_wald: degenerate (zero-width) interval for " +
                                 row.label);
        row.se = std::sqrt(v);
        row.ci_lower = row.estimate - z * row.se;
        row.ci_upper = row.estimate + z * row.se;
        row.p_value = 2.0 * normal_cdf(-std::abs(row.estimate / row.se));
        rows.push_back(row);
    }
    return rows;
}

struct SmoothTestResult {
    int covariate_index = 0;
    double wald_stat = 0.0;
    int dof = 0;
    double p_value = 1.0;
};

/// Wald test of the null that smooth j is identically zero:
/// W = a_j' (A^{-1})_j a_j compared to chi^2 with d_j degrees of freedom,
/// where (A^{-1})_j is the j-th diagonal block of the inverse variational
/// covariance.
inline SmoothTestResult smooth_wald_test(const FitResult& fit, const GamDesign& design, int j) {
    Eigen::LLT<Eigen::MatrixXd> llt(fit.vparams.A());
    if (llt.info() != Eigen::Success)
        throw NumericalError("smooth_wald_test: variational covariance is singular");
    const Eigen::MatrixXd Ainv = llt.solve(Eigen::MatrixXd::Identity(design.d, design.d));
    const int off = design.block_offset[static_cast<size_t>(j)];
    const int dj = design.block_dim(j);
    const auto aj = fit.vparams.a.segment(off, dj);

    SmoothTestResult res;
    res.covariate_index = j;
    res.dof = dj;
    res.wald_stat = aj.dot(Ainv.block(off, off, dj, dj) * aj);
    res.p_value = chi_squared_sf(res.wald_stat, dj);
    return res;
}

struct BandResult {
    enum class Kind { pointwise, simultaneous };
    Eigen::VectorXd grid;
    Eigen::VectorXd center;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    Kind kind = Kind::pointwise;
    double level = 0.95;
    double critical_value = 0.0;
};

namespace detail {

inline Eigen::VectorXd band_sd(const Eigen::MatrixXd& Zg, const Eigen::MatrixXd& Aj) {
    return ((Zg * Aj).cwiseProduct(Zg).rowwise().sum()).cwiseSqrt();
}

}  // namespace detail

/// Pointwise confidence band for smooth j on the linear-predictor scale.
inline BandResult pointwise_band(const FitResult& fit, const GamDesign& design, int j,
                                 const Eigen::VectorXd& grid, double level) {
    const int off = design.block_offset[static_cast<size_t>(j)];
    const int dj = design.block_dim(j);
    const Eigen::MatrixXd Zg = evaluate_basis(design.bases[static_cast<size_t>(j)], grid);
    const Eigen::MatrixXd Aj = fit.vparams.A().block(off, off, dj, dj);

    BandResult band;
    band.kind = BandResult::Kind::pointwise;
    band.level = level;
    band.grid = grid;
    band.center = Zg * fit.vparams.a.segment(off, dj);
    band.critical_value = normal_quantile(0.5 + 0.5 * level);
    const Eigen::VectorXd sd = detail::band_sd(Zg, Aj);
    band.lower = band.center - band.critical_value * sd;
    band.upper = band.center + band.critical_value * sd;
    return band;
}

/// Simultaneous confidence band for smooth j: simulate G draws from the
/// variational law, take the max over the grid of the absolute standardized
/// deviation from the center, and use its empirical (1-alpha/2) quantile as
/// the critical multiplier.
inline BandResult simultaneous_band(const FitResult& fit, const GamDesign& design, int j,
                                    const Eigen::VectorXd& grid, double level, int G,
                                    std::uint64_t seed) {
    if (G < 1000) throw DataError("simultaneous_band: need at least 1000 simulation draws");
    const int off = design.block_offset[static_cast<size_t>(j)];
    const int dj = design.block_dim(j);
    const Eigen::MatrixXd Zg = evaluate_basis(design.bases[static_cast<size_t>(j)], grid);
    const Eigen::MatrixXd Aj = fit.vparams.A().block(off, off, dj, dj);
    const Eigen::VectorXd sd = detail::band_sd(Zg, Aj);

    auto rng = make_rng(seed, 0);
    std::normal_distribution<double> nd(0.0, 1.0);
    const int d = design.d;
    Eigen::MatrixXd xi(d, G);
    for (int g = 0; g < G; ++g)
        for (int i = 0; i < d; ++i) xi(i, g) = nd(rng);
    const Eigen::MatrixXd dev = fit.vparams.L * xi;            // beta - a, d x G
    const Eigen::MatrixXd T = Zg * dev.middleRows(off, dj);    // M x G

    std::vector<double> C(static_cast<size_t>(G));
    for (int g = 0; g < G; ++g) {
        double m = 0.0;
        for (Eigen::Index l = 0; l < grid.size(); ++l)
            m = std::max(m, std::abs(T(l, g)) / sd[l]);
        C[static_cast<size_t>(g)] = m;
    }

    BandResult band;
    band.kind = BandResult::Kind::simultaneous;
    band.level = level;
    band.grid = grid;
    band.center = Zg * fit.vparams.a.segment(off, dj);
    band.critical_value = empirical_quantile(C, 0.5 + 0.5 * level);
    band.lower = band.center - band.critical_value * sd;
    band.upper = band.center + band.critical_value * sd;
    return band;
}

struct PredictionResult {
    Eigen::VectorXd eta;
    Eigen::VectorXd mu;
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
};

/// Mean inverse link per family.
inline double inverse_link(Family family, double eta) {
    switch (family) {
        case Family::poisson: return std::exp(eta);
        case Family::normal: return eta;
        case Family::bernoulli: return detail::logistic(eta);
    }
    return eta;
}

/// Point predictions with posterior-predictive intervals: draw coefficients
/// from the variational law, draw responses from the family at the implied
/// mean, and take empirical quantiles.
inline PredictionResult predict(const FitResult& fit, const Eigen::MatrixXd& X_new,
                                const Eigen::MatrixXd& Z_new, double level, int draws = 10000,
                                std::uint64_t seed = 1) {
    const auto n_new = X_new.rows();
    const int d = static_cast<int>(Z_new.cols());
    PredictionResult out;
    out.eta = X_new * fit.params.kappa + Z_new * fit.vparams.a;
    out.mu.resize(n_new);
    for (Eigen::Index i = 0; i < n_new; ++i) out.mu[i] = inverse_link(fit.family, out.eta[i]);
    out.lower.resize(n_new);
    out.upper.resize(n_new);
    if (n_new == 0) return out;

    auto rng = make_rng(seed, 0);
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::MatrixXd xi(d, draws);
    for (int g = 0; g < draws; ++g)
        for (int i = 0; i < d; ++i) xi(i, g) = nd(rng);
    const Eigen::MatrixXd etaG =
        (Z_new * (fit.vparams.L * xi)).colwise() + out.eta;  // n_new x draws

    const double alpha = 1.0 - level;
    std::vector<double> sample(static_cast<size_t>(draws));
    const double sd_obs = std::sqrt(fit.params.phi);
    for (Eigen::Index i = 0; i < n_new; ++i) {
        for (int g = 0; g < draws; ++g) {
            const double eta = etaG(i, g);
            double ystar = 0.0;
            switch (fit.family) {
                case Family::normal:
                    ystar = eta + sd_obs * nd(rng);
                    break;
                case Family::poisson: {
                    const double mu = std::exp(eta);
                    if (!std::isfinite(mu) || mu > 1e15)
                        throw NumericalError("predict: Poisson mean overflow at row " +
                                             std::to_string(i));
                    std::poisson_distribution<long> pd(mu);
                    ystar = static_cast<double>(pd(rng));
                    break;
                }
                case Family::bernoulli: {
                    std::bernoulli_distribution bd(detail::logistic(eta));
                    ystar = bd(rng) ? 1.0 : 0.0;
                    break;
                }
            }
            sample[static_cast<size_t>(g)] = ystar;
        }
        std::vector<double> tmp = sample;
        out.lower[i] = empirical_quantile(tmp, 0.5 * alpha);
        tmp = sample;
        out.upper[i] = empirical_quantile(tmp, 1.0 - 0.5 * alpha);
    }
    return out;
}

}  // namespace vagam
