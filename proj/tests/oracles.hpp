// Independent oracles used by the test suites: a plain Newton GLM solver, an
// importance-sampling estimate of the exact marginal log-likelihood, the
// analytic Gaussian posterior for normal responses, the exact normal marginal
// log-likelihood, and finite-difference helpers. None of these share code
// with the estimation path they check.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "vagam/model.hpp"
#include "vagam/rng.hpp"

namespace oracles {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Unpenalized GLM by textbook Newton iteration.
inline VectorXd newton_glm(const MatrixXd& M, const VectorXd& y, vagam::Family family,
                           int iters = 100) {
    VectorXd beta = VectorXd::Zero(M.cols());
    for (int it = 0; it < iters; ++it) {
        const VectorXd eta = M * beta;
        VectorXd mu(y.size()), w(y.size());
        for (Eigen::Index i = 0; i < y.size(); ++i) {
            switch (family) {
                case vagam::Family::poisson:
                    mu[i] = std::exp(eta[i]);
                    w[i] = mu[i];
                    break;
                case vagam::Family::bernoulli:
                    mu[i] = 1.0 / (1.0 + std::exp(-eta[i]));
                    w[i] = mu[i] * (1.0 - mu[i]);
                    break;
                case vagam::Family::normal:
                    mu[i] = eta[i];
                    w[i] = 1.0;
                    break;
            }
        }
        const VectorXd g = M.transpose() * (y - mu);
        const MatrixXd H = M.transpose() * w.asDiagonal() * M;
        const VectorXd step = H.ldlt().solve(g);
        beta += step;
        if (step.cwiseAbs().maxCoeff() < 1e-12) break;
    }
    return beta;
}

// ---------------------------------------------------------------------------
// Exact data log-likelihood of one observation (constants included).
inline double data_loglik(vagam::Family family, double y, double eta, double phi) {
    switch (family) {
        case vagam::Family::poisson:
            return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
        case vagam::Family::normal:
            return -0.5 * std::log(2.0 * M_PI * phi) - 0.5 * (y - eta) * (y - eta) / phi;
        case vagam::Family::bernoulli:
            return y * eta - (eta > 0 ? eta + std::log1p(std::exp(-eta))
                                      : std::log1p(std::exp(eta)));
    }
    return 0.0;
}

struct McMarginal {
    double estimate = 0.0;
    double se = 0.0;
};

// Importance-sampling estimate of the marginal log-likelihood
// ln integral prod_i f(y_i|beta) prod_j N(beta_j; 0, (lambda_j S_j)^{-1}) dbeta
// with a N(a_prop, A_prop) proposal.
inline McMarginal mc_marginal_loglik(const vagam::GamDesign& design,
                                     const VectorXd& kappa, double phi, const VectorXd& lambda,
                                     const VectorXd& a_prop, const MatrixXd& A_prop, int n_draws,
                                     std::uint64_t seed) {
    const int d = design.d;
    Eigen::LLT<MatrixXd> llt(A_prop);
    const MatrixXd L = llt.matrixL();
    double log_det_prop = 0.0;
    for (int i = 0; i < d; ++i) log_det_prop += 2.0 * std::log(L(i, i));

    double log_prior_const = 0.0;
    for (int j = 0; j < design.q; ++j) {
        const auto& S = design.bases[static_cast<size_t>(j)].penalty;
        const int dj = static_cast<int>(S.rows());
        Eigen::LLT<MatrixXd> lltS(S);
        double log_det_S = 0.0;
        for (int i = 0; i < dj; ++i) log_det_S += 2.0 * std::log(lltS.matrixL()(i, i));
        log_prior_const += -0.5 * dj * std::log(2.0 * M_PI) + 0.5 * dj * std::log(lambda[j]) +
                           0.5 * log_det_S;
    }

    const VectorXd eta0 = design.X * kappa;
    auto rng = vagam::make_rng(seed, 0);
    std::normal_distribution<double> nd(0.0, 1.0);

    std::vector<double> logw(static_cast<size_t>(n_draws));
    double max_logw = -std::numeric_limits<double>::infinity();
    VectorXd xi(d), beta(d);
    for (int g = 0; g < n_draws; ++g) {
        for (int i = 0; i < d; ++i) xi[i] = nd(rng);
        beta = a_prop + L * xi;
        double lw = 0.0;
        const VectorXd eta = eta0 + design.Z * beta;
        for (Eigen::Index i = 0; i < design.n; ++i)
            lw += data_loglik(design.family, design.y[i], eta[i], phi);
        lw += log_prior_const;
        for (int j = 0; j < design.q; ++j) {
            const int off = design.block_offset[static_cast<size_t>(j)];
            const int dj = design.block_dim(j);
            const auto bj = beta.segment(off, dj);
            lw += -0.5 * lambda[j] * bj.dot(design.bases[static_cast<size_t>(j)].penalty * bj);
        }
        // minus proposal density
        lw -= -0.5 * d * std::log(2.0 * M_PI) - 0.5 * log_det_prop - 0.5 * xi.squaredNorm();
        logw[static_cast<size_t>(g)] = lw;
        max_logw = std::max(max_logw, lw);
    }

    double sum_w = 0.0, sum_w2 = 0.0;
    for (double lw : logw) {
        const double w = std::exp(lw - max_logw);
        sum_w += w;
        sum_w2 += w * w;
    }
    const double mean_w = sum_w / n_draws;
    const double var_w = sum_w2 / n_draws - mean_w * mean_w;
    McMarginal out;
    out.estimate = max_logw + std::log(mean_w);
    out.se = std::sqrt(var_w / n_draws) / mean_w;
    return out;
}

// ---------------------------------------------------------------------------
// Analytic Gaussian posterior of the smoothing coefficients for normal
// responses: N(P^{-1} phi^{-1} Z'(y - X kappa), P^{-1}) with
// P = S_lambda + phi^{-1} Z'Z.
struct NormalPosterior {
    VectorXd mean;
    MatrixXd cov;
};

inline NormalPosterior normal_posterior(const vagam::GamDesign& design, const VectorXd& kappa,
                                        double phi, const VectorXd& lambda) {
    const int d = design.d;
    MatrixXd P = MatrixXd::Zero(d, d);
    for (int j = 0; j < design.q; ++j) {
        const int off = design.block_offset[static_cast<size_t>(j)];
        const int dj = design.block_dim(j);
        P.block(off, off, dj, dj) = lambda[j] * design.bases[static_cast<size_t>(j)].penalty;
    }
    P += design.Z.transpose() * design.Z / phi;
    NormalPosterior post;
    post.cov = P.inverse();
    post.cov = 0.5 * (post.cov + post.cov.transpose());
    post.mean = post.cov * (design.Z.transpose() * (design.y - design.X * kappa)) / phi;
    return post;
}

// Exact marginal log-likelihood for normal responses,
// y ~ N(X kappa, phi I + Z S_lambda^{-1} Z'), evaluated through the matrix
// determinant lemma and Woodbury identity so the (badly conditioned)
// inverse penalty never appears:
//   ln det Sigma = n ln phi + ln det(S + Z'Z/phi) - ln det S
//   r'Sigma^{-1} r = (r'r - phi^{-1} r'Z (S + Z'Z/phi)^{-1} Z'r) / phi
inline double normal_marginal_loglik(const vagam::GamDesign& design, const VectorXd& kappa,
                                     double phi, const VectorXd& lambda) {
    const int n = design.n;
    const int d = design.d;
    MatrixXd S = MatrixXd::Zero(d, d);
    double log_det_S = 0.0;
    for (int j = 0; j < design.q; ++j) {
        const int off = design.block_offset[static_cast<size_t>(j)];
        const int dj = design.block_dim(j);
        S.block(off, off, dj, dj) = lambda[j] * design.bases[static_cast<size_t>(j)].penalty;
        // ln det(lambda S_j) = d_j ln lambda + ln det S_j, the latter constant;
        // keeping the lambda part analytic makes finite differences clean
        Eigen::LLT<MatrixXd> lltS(design.bases[static_cast<size_t>(j)].penalty);
        log_det_S += dj * std::log(lambda[j]);
        for (int i = 0; i < dj; ++i) log_det_S += 2.0 * std::log(lltS.matrixL()(i, i));
    }
    const MatrixXd P = S + design.Z.transpose() * design.Z / phi;
    Eigen::LLT<MatrixXd> lltP(P);
    double log_det_P = 0.0;
    for (int i = 0; i < d; ++i) log_det_P += 2.0 * std::log(lltP.matrixL()(i, i));
    const double log_det_sigma = n * std::log(phi) + log_det_P - log_det_S;

    const VectorXd r = design.y - design.X * kappa;
    const VectorXd Ztr = design.Z.transpose() * r;
    const double quad = (r.squaredNorm() - Ztr.dot(lltP.solve(Ztr)) / phi) / phi;
    return -0.5 * n * std::log(2.0 * M_PI) - 0.5 * log_det_sigma - 0.5 * quad;
}

// ---------------------------------------------------------------------------
// Central finite differences.
inline VectorXd fd_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                            double h_scale = 1e-6) {
    VectorXd g(x.size());
    VectorXd xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = h_scale * (1.0 + std::abs(x[i]));
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline MatrixXd fd_hessian(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                           double h_scale = 1e-4) {
    const auto n = x.size();
    MatrixXd H(n, n);
    VectorXd xp = x;
    const double f0 = f(x);
    VectorXd hs(n);
    for (Eigen::Index i = 0; i < n; ++i) hs[i] = h_scale * (1.0 + std::abs(x[i]));
    for (Eigen::Index i = 0; i < n; ++i) {
        xp[i] = x[i] + hs[i];
        const double fp = f(xp);
        xp[i] = x[i] - hs[i];
        const double fm = f(xp);
        xp[i] = x[i];
        H(i, i) = (fp - 2.0 * f0 + fm) / (hs[i] * hs[i]);
    }
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < i; ++j) {
            xp[i] = x[i] + hs[i];
            xp[j] = x[j] + hs[j];
            const double fpp = f(xp);
            xp[j] = x[j] - hs[j];
            const double fpm = f(xp);
            xp[i] = x[i] - hs[i];
            const double fmm = f(xp);
            xp[j] = x[j] + hs[j];
            const double fmp = f(xp);
            xp[i] = x[i];
            xp[j] = x[j];
            H(i, j) = H(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * hs[i] * hs[j]);
        }
    return H;
}

// ---------------------------------------------------------------------------
// Small random instances with genuine smooth signal.
struct TestInstance {
    vagam::GamDesign design;
    VectorXd eta_true;
};

inline TestInstance make_test_instance(vagam::Family family, int n, int q, int K,
                                       std::uint64_t seed) {
    auto rng = vagam::make_rng(seed, 0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> nd(0.0, 1.0);

    MatrixXd X(n, 2);
    std::vector<VectorXd> u(static_cast<size_t>(q), VectorXd(n));
    VectorXd eta(n);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        X(i, 1) = (i < n / 2) ? 1.0 : 0.0;
        eta[i] = -0.5 + 0.4 * X(i, 1);
    }
    for (int j = 0; j < q; ++j) {
        VectorXd s(n);
        for (int i = 0; i < n; ++i) {
            u[static_cast<size_t>(j)][i] = unif(rng);
            const double x = u[static_cast<size_t>(j)][i];
            s[i] = (j % 2 == 0) ? 1.2 * std::sin(2.0 * M_PI * x) : 0.9 * std::cos(3.0 * M_PI * x);
        }
        s.array() -= s.mean();
        eta += s;
    }

    VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        switch (family) {
            case vagam::Family::normal:
                y[i] = eta[i] + nd(rng);
                break;
            case vagam::Family::poisson: {
                std::poisson_distribution<long> pd(std::exp(eta[i]));
                y[i] = static_cast<double>(pd(rng));
                break;
            }
            case vagam::Family::bernoulli: {
                std::bernoulli_distribution bd(1.0 / (1.0 + std::exp(-eta[i])));
                y[i] = bd(rng) ? 1.0 : 0.0;
                break;
            }
        }
    }

    TestInstance inst{vagam::make_design(y, X, u, std::vector<int>(static_cast<size_t>(q), K),
                                         family),
                      eta};
    return inst;
}

}  // namespace oracles
