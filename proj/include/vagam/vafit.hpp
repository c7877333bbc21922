#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "vagam/errors.hpp"
#include "vagam/model.hpp"

namespace vagam {

struct FitSettings {
    enum class LambdaUpdate { closed_form, fixed };

    int max_outer_iters = 500;
    double tol_lowerbound = 1e-6;  // relative change of the bound
    double tol_params = 1e-6;      // max |delta| / (1 + |old|) over (kappa, a, phi, lambda)
    int inner_irls_iters = 25;
    double fixedpoint_damping = 1.0;  // starting step for the A fixed point, halved on decrease
    int consistency_sweeps = 400;  // max (A, phi, lambda) repeats per cycle; 1 = plain sequence
    LambdaUpdate lambda_update = LambdaUpdate::closed_form;
    std::uint64_t seed = 0;
    VariationalParams::Structure structure = VariationalParams::Structure::unstructured;
};

struct FitDiagnostics {
    std::vector<std::string> notes;
    int damping_events = 0;
    std::vector<int> lambda_capped;  // per smooth, 1 if the update hit a bound
    bool overflow = false;
};

struct FitResult {
    ModelParams params;
    VariationalParams vparams;
    std::vector<double> lower_bound_trace;
    bool converged = false;
    int n_iters = 0;
    Family family = Family::normal;
    FitDiagnostics diagnostics;
};

inline constexpr double kLambdaMin = 1e-8;
inline constexpr double kLambdaMax = 1e8;

namespace detail {

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double logistic(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline constexpr double kLog2Pi = 1.8378770664093454836;

}  // namespace detail

/// Block-diagonal penalty matrix with blocks lambda_j * S_j.
inline Eigen::MatrixXd make_penalty_blockdiag(const std::vector<SmoothBasis>& bases,
                                              const Eigen::VectorXd& lambda) {
    int d = 0;
    for (const auto& b : bases) d += b.basis_dim;
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(d, d);
    int off = 0;
    for (size_t j = 0; j < bases.size(); ++j) {
        const int dj = bases[j].basis_dim;
        S.block(off, off, dj, dj) = lambda[static_cast<Eigen::Index>(j)] * bases[j].penalty;
        off += dj;
    }
    return S;
}

/// sum_j ln det S_j (penalty normalizing constants).
inline double sum_log_det_penalty(const std::vector<SmoothBasis>& bases) {
    double s = 0.0;
    for (const auto& b : bases) {
        Eigen::LLT<Eigen::MatrixXd> llt(b.penalty);
        if (llt.info() != Eigen::Success)
            throw NumericalError("penalty matrix is not positive definite");
        for (Eigen::Index i = 0; i < b.penalty.rows(); ++i)
            s += 2.0 * std::log(llt.matrixL()(i, i));
    }
    return s;
}

struct BoundParts {
    double data = 0.0;           // expected log-likelihood of the responses
    double prior_entropy = 0.0;  // random-effects prior plus variational entropy
    double total() const { return data + prior_entropy; }
};

namespace detail {

/// Expected data log-likelihood given eta_i = x_i'kappa + z_i'a and
/// quad_i = z_i'A z_i. Returns -inf and the offending row when a term
/// overflows.
inline double data_part(Family family, const Eigen::VectorXd& y, const Eigen::VectorXd& eta,
                        const Eigen::VectorXd& quad, double phi, double log_y_factorial_sum,
                        Eigen::Index* bad_row = nullptr) {
    const auto n = y.size();
    double s = 0.0;
    switch (family) {
        case Family::poisson:
            for (Eigen::Index i = 0; i < n; ++i) {
                const double term = y[i] * eta[i] - std::exp(eta[i] + 0.5 * quad[i]);
                if (!std::isfinite(term)) {
                    if (bad_row) *bad_row = i;
                    return -std::numeric_limits<double>::infinity();
                }
                s += term;
            }
            return s - log_y_factorial_sum;
        case Family::normal: {
            double ssr = (y - eta).squaredNorm() + quad.sum();
            s = -0.5 * n * (kLog2Pi + std::log(phi)) - 0.5 * ssr / phi;
            return s;
        }
        case Family::bernoulli:
            for (Eigen::Index i = 0; i < n; ++i)
                s += y[i] * eta[i] - softplus(eta[i] + 0.5 * quad[i]);
            return s;
    }
    return s;
}

/// Prior and entropy terms of the bound, all normalizing constants included
/// so that the total is the exact Jensen lower bound of the marginal
/// log-likelihood.
inline double prior_entropy_part(const std::vector<SmoothBasis>& bases,
                                 const Eigen::VectorXd& lambda, const Eigen::VectorXd& a,
                                 const Eigen::MatrixXd& A, double log_det_A,
                                 double log_det_penalty_sum) {
    double s = 0.0;
    int off = 0;
    for (size_t j = 0; j < bases.size(); ++j) {
        const int dj = bases[j].basis_dim;
        const double lam = lambda[static_cast<Eigen::Index>(j)];
        const auto aj = a.segment(off, dj);
        const double quad_a = aj.dot(bases[j].penalty * aj);
        const double tr_SA = bases[j].penalty.cwiseProduct(A.block(off, off, dj, dj)).sum();
        s += 0.5 * (dj * std::log(lam) - lam * (quad_a + tr_SA));
        off += dj;
    }
    s += 0.5 * log_det_A + 0.5 * log_det_penalty_sum + 0.5 * static_cast<double>(a.size());
    return s;
}

}  // namespace detail

/// Family-specific variational lower bound, with all constant terms kept so
/// the value is directly comparable to the exact marginal log-likelihood.
inline BoundParts lower_bound_parts(const GamDesign& design, const ModelParams& params,
                                    const VariationalParams& vparams) {
    const Eigen::MatrixXd A = vparams.A();
    const Eigen::VectorXd eta = design.X * params.kappa + design.Z * vparams.a;
    Eigen::VectorXd quad;
    if (design.d > 0)
        quad = (design.Z * A).cwiseProduct(design.Z).rowwise().sum();
    else
        quad = Eigen::VectorXd::Zero(design.n);

    BoundParts parts;
    Eigen::Index bad = -1;
    parts.data = detail::data_part(design.family, design.y, eta, quad, params.phi,
                                   design.log_y_factorial_sum, &bad);
    if (!std::isfinite(parts.data))
        throw NumericalError("lower_bound: overflow in data term at observation " +
                             std::to_string(bad));
    parts.prior_entropy = detail::prior_entropy_part(design.bases, params.lambda, vparams.a, A,
                                                     vparams.log_det_A(),
                                                     sum_log_det_penalty(design.bases));
    return parts;
}

inline double lower_bound(const GamDesign& design, const ModelParams& params,
                          const VariationalParams& vparams) {
    return lower_bound_parts(design, params, vparams).total();
}

/// Analytic scores of the lower bound with respect to kappa, a, A (full
/// symmetric-matrix convention), the lower Cholesky factor of A, and phi.
struct BoundGradient {
    Eigen::VectorXd kappa;
    Eigen::VectorXd a;
    Eigen::MatrixXd A;           // dl/dA, symmetric
    Eigen::MatrixXd chol_lower;  // dl/dL = 2 (dl/dA) L, lower triangle
    double phi = 0.0;            // zero unless the family carries a dispersion
};

inline BoundGradient bound_gradient(const GamDesign& design, const ModelParams& params,
                                    const VariationalParams& vparams) {
    const Eigen::MatrixXd A = vparams.A();
    const Eigen::VectorXd eta = design.X * params.kappa + design.Z * vparams.a;
    Eigen::VectorXd quad = design.d > 0
        ? Eigen::VectorXd((design.Z * A).cwiseProduct(design.Z).rowwise().sum())
        : Eigen::VectorXd::Zero(design.n);

    Eigen::VectorXd mu(design.n), w(design.n);
    const double phi = params.phi;
    switch (design.family) {
        case Family::poisson:
            for (Eigen::Index i = 0; i < design.n; ++i) {
                mu[i] = std::exp(eta[i] + 0.5 * quad[i]);
                w[i] = mu[i];
            }
            break;
        case Family::bernoulli:
            for (Eigen::Index i = 0; i < design.n; ++i) {
                mu[i] = detail::logistic(eta[i] + 0.5 * quad[i]);
                w[i] = mu[i];
            }
            break;
        case Family::normal:
            mu = eta;
            w.setConstant(1.0 / phi);
            break;
    }
    const double inv_phi = design.family == Family::normal ? 1.0 / phi : 1.0;

    const Eigen::MatrixXd S_lambda = make_penalty_blockdiag(design.bases, params.lambda);

    BoundGradient g;
    g.kappa = inv_phi * (design.X.transpose() * (design.y - mu));
    g.a = inv_phi * (design.Z.transpose() * (design.y - mu)) - S_lambda * vparams.a;

    Eigen::MatrixXd Ainv;
    if (design.d > 0) {
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        Ainv = llt.solve(Eigen::MatrixXd::Identity(design.d, design.d));
    } else {
        Ainv.resize(0, 0);
    }
    Eigen::MatrixXd ZWZ = Eigen::MatrixXd::Zero(design.d, design.d);
    if (design.d > 0) {
        const Eigen::MatrixXd Zw = design.Z.array().colwise() * w.array().sqrt();
        ZWZ.selfadjointView<Eigen::Lower>().rankUpdate(Zw.transpose());
        ZWZ = ZWZ.selfadjointView<Eigen::Lower>();
    }
    g.A = 0.5 * (Ainv - S_lambda - ZWZ);
    g.chol_lower = (2.0 * g.A * vparams.L).triangularView<Eigen::Lower>();

    if (design.family == Family::normal)
        g.phi = -0.5 * design.n / phi +
                0.5 / (phi * phi) * ((design.y - eta).squaredNorm() + quad.sum());
    return g;
}

namespace detail {

/// Penalized working-model objective: expected data log-likelihood terms in
/// theta with fixed offsets, minus the quadratic penalty.
inline double glm_objective(Family family, const Eigen::VectorXd& y, const Eigen::VectorXd& eta,
                            const Eigen::VectorXd& offsets, double phi,
                            const Eigen::MatrixXd& P, const Eigen::VectorXd& theta) {
    double s = 0.0;
    switch (family) {
        case Family::poisson:
            for (Eigen::Index i = 0; i < y.size(); ++i)
                s += y[i] * eta[i] - std::exp(eta[i] + offsets[i]);
            break;
        case Family::bernoulli:
            for (Eigen::Index i = 0; i < y.size(); ++i)
                s += y[i] * eta[i] - softplus(eta[i] + offsets[i]);
            break;
        case Family::normal:
            s = -0.5 / phi * (y - eta).squaredNorm();
            break;
    }
    if (!std::isfinite(s)) return -std::numeric_limits<double>::infinity();
    return s - 0.5 * theta.dot(P * theta);
}

struct GlmStepInfo {
    bool converged = false;
    int iterations = 0;
};

/// Penalized IRLS (Newton with step halving) on the working GLM
///   eta = C theta, fixed additive offsets inside the mean function,
///   quadratic penalty 0.5 theta'P theta.
/// For the normal family this is a single exact penalized least-squares
/// solve of (C'C + phi P) theta = C'y.
inline Eigen::VectorXd fit_penalized_glm(const Eigen::MatrixXd& C, const Eigen::VectorXd& y,
                                         Family family, double phi,
                                         const Eigen::VectorXd& offsets, const Eigen::MatrixXd& P,
                                         Eigen::VectorXd theta, int max_iters,
                                         GlmStepInfo* info = nullptr) {
    const auto dim = C.cols();
    if (family == Family::normal) {
        Eigen::MatrixXd H = C.transpose() * C + phi * P;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success)
            throw NumericalError("penalized least squares: normal equations not positive definite");
        theta = llt.solve(C.transpose() * y);
        if (info) *info = {true, 1};
        return theta;
    }

    Eigen::VectorXd eta = C * theta;
    double f = glm_objective(family, y, eta, offsets, phi, P, theta);
    bool converged = false;
    int it = 0;
    for (; it < max_iters; ++it) {
        Eigen::VectorXd psi = eta + offsets;
        Eigen::VectorXd mu(y.size()), w(y.size());
        if (family == Family::poisson) {
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                mu[i] = std::exp(psi[i]);
                w[i] = mu[i];
            }
        } else {
            for (Eigen::Index i = 0; i < y.size(); ++i) {
                mu[i] = logistic(psi[i]);
                w[i] = mu[i] * (1.0 - mu[i]);
            }
        }
        Eigen::VectorXd g = C.transpose() * (y - mu) - P * theta;
        if (g.cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + std::abs(f))) {
            converged = true;
            break;
        }
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
        const Eigen::MatrixXd Cw = C.array().colwise() * w.array().sqrt();
        H.selfadjointView<Eigen::Lower>().rankUpdate(Cw.transpose());
        H = H.selfadjointView<Eigen::Lower>();
        H += P;
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() != Eigen::Success) break;
        const Eigen::VectorXd delta = llt.solve(g);

        double alpha = 1.0;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
            const Eigen::VectorXd theta_try = theta + alpha * delta;
            const Eigen::VectorXd eta_try = C * theta_try;
            const double f_try = glm_objective(family, y, eta_try, offsets, phi, P, theta_try);
            if (f_try > f || (std::isfinite(f_try) && f_try == f)) {
                const double step = (alpha * delta).cwiseAbs().maxCoeff();
                theta = theta_try;
                eta = eta_try;
                const bool tiny_gain = (f_try - f) <= 1e-13 * (1.0 + std::abs(f));
                f = f_try;
                accepted = true;
                if (tiny_gain || step <= 1e-12 * (1.0 + theta.cwiseAbs().maxCoeff()))
                    converged = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted || converged) {
            converged = converged || !accepted;
            break;
        }
    }
    if (info) *info = {converged, it + 1};
    return theta;
}

inline Eigen::MatrixXd embed_penalty(int p, const Eigen::MatrixXd& S_lambda) {
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(p + S_lambda.rows(), p + S_lambda.cols());
    P.bottomRightCorner(S_lambda.rows(), S_lambda.cols()) = S_lambda;
    return P;
}

}  // namespace detail

/// One joint update of (kappa, a): penalized IRLS on the working GLM with
/// offsets 0.5 z_i'A z_i (zero for the normal family, where the step is one
/// exact penalized least-squares solve). The penalty applies to a only.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> update_coefficients(
    const GamDesign& design, const ModelParams& params, const VariationalParams& vparams,
    const FitSettings& settings) {
    Eigen::VectorXd offsets = Eigen::VectorXd::Zero(design.n);
    if (design.family != Family::normal && design.d > 0)
        offsets = 0.5 * (design.Z * vparams.A()).cwiseProduct(design.Z).rowwise().sum();

    const Eigen::MatrixXd P =
        detail::embed_penalty(design.p, make_penalty_blockdiag(design.bases, params.lambda));
    Eigen::VectorXd theta(design.p + design.d);
    theta << params.kappa, vparams.a;
    theta = detail::fit_penalized_glm(design.C, design.y, design.family, params.phi, offsets, P,
                                      theta, settings.inner_irls_iters);
    return {theta.head(design.p), theta.tail(design.d)};
}

namespace detail {

/// Precision matrix of the A update: S_lambda plus the weighted cross
/// product of the smooth design. Weights are the family working weights at
/// eta + 0.5 z'A z (1/phi for normal).
inline Eigen::MatrixXd a_update_precision(const GamDesign& design, const ModelParams& params,
                                          const Eigen::VectorXd& eta,
                                          const Eigen::VectorXd& quad) {
    Eigen::MatrixXd M = make_penalty_blockdiag(design.bases, params.lambda);
    if (design.d == 0) return M;
    Eigen::VectorXd w(design.n);
    switch (design.family) {
        case Family::normal:
            w.setConstant(1.0 / params.phi);
            break;
        case Family::poisson:
            for (Eigen::Index i = 0; i < design.n; ++i) w[i] = std::exp(eta[i] + 0.5 * quad[i]);
            break;
        case Family::bernoulli:
            for (Eigen::Index i = 0; i < design.n; ++i)
                w[i] = logistic(eta[i] + 0.5 * quad[i]);
            break;
    }
    if (!w.allFinite()) throw NumericalError("update_A: overflow in working weights");
    const Eigen::MatrixXd Zw = design.Z.array().colwise() * w.array().sqrt();
    Eigen::MatrixXd ZWZ = Eigen::MatrixXd::Zero(design.d, design.d);
    ZWZ.selfadjointView<Eigen::Lower>().rankUpdate(Zw.transpose());
    M += Eigen::MatrixXd(ZWZ.selfadjointView<Eigen::Lower>());
    return M;
}

inline Eigen::MatrixXd invert_spd(const Eigen::MatrixXd& M, const char* what) {
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": matrix not SPD");
    Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(M.rows(), M.cols()));
    return 0.5 * (inv + inv.transpose());
}

}  // namespace detail

/// One update of the variational covariance. Normal: closed form
/// (S_lambda + phi^{-1} Z'Z)^{-1}. Poisson and Bernoulli: one fixed-point
/// step evaluated at the current A. Under the block-diagonal structure each
/// diagonal block of the precision is inverted separately.
inline Eigen::MatrixXd update_A(const GamDesign& design, const ModelParams& params,
                                const VariationalParams& vparams, const FitSettings& settings) {
    const Eigen::VectorXd eta = design.X * params.kappa + design.Z * vparams.a;
    Eigen::VectorXd quad = design.d > 0
        ? Eigen::VectorXd((design.Z * vparams.A()).cwiseProduct(design.Z).rowwise().sum())
        : Eigen::VectorXd::Zero(design.n);
    const Eigen::MatrixXd M = detail::a_update_precision(design, params, eta, quad);
    if (settings.structure == VariationalParams::Structure::block_diagonal) {
        Eigen::MatrixXd A = Eigen::MatrixXd::Zero(design.d, design.d);
        int off = 0;
        for (int j = 0; j < design.q; ++j) {
            const int dj = design.block_dim(j);
            A.block(off, off, dj, dj) =
                detail::invert_spd(M.block(off, off, dj, dj), "update_A (block)");
            off += dj;
        }
        return A;
    }
    return detail::invert_spd(M, "update_A");
}

/// Dispersion update for the normal family:
/// phi = n^{-1} sum_i {(y_i - eta_i)^2 + z_i'A z_i}, floored at 1e-10.
inline double update_phi(const GamDesign& design, const ModelParams& params,
                         const VariationalParams& vparams) {
    if (design.family != Family::normal)
        throw DataError("update_phi: dispersion update only applies to the normal family");
    const Eigen::VectorXd eta = design.X * params.kappa + design.Z * vparams.a;
    double quad_sum = 0.0;
    if (design.d > 0) quad_sum = (design.Z * vparams.A()).cwiseProduct(design.Z).sum();
    const double phi = ((design.y - eta).squaredNorm() + quad_sum) / design.n;
    return std::max(phi, 1e-10);
}

/// Closed-form smoothing-parameter update
/// lambda_j = d_j / (tr(S_j A_j) + a_j'S_j a_j), clamped to [1e-8, 1e8].
inline Eigen::VectorXd update_lambda(const std::vector<SmoothBasis>& bases,
                                     const VariationalParams& vparams,
                                     std::vector<int>* capped = nullptr) {
    const Eigen::MatrixXd A = vparams.A();
    Eigen::VectorXd lambda(static_cast<Eigen::Index>(bases.size()));
    if (capped) capped->assign(bases.size(), 0);
    int off = 0;
    for (size_t j = 0; j < bases.size(); ++j) {
        const int dj = bases[j].basis_dim;
        const auto aj = vparams.a.segment(off, dj);
        const double denom = bases[j].penalty.cwiseProduct(A.block(off, off, dj, dj)).sum() +
                             aj.dot(bases[j].penalty * aj);
        double lam;
        if (denom < 1e-12) {
            lam = kLambdaMax;
            if (capped) (*capped)[j] = 1;
        } else {
            lam = static_cast<double>(dj) / denom;
            if (lam > kLambdaMax) {
                lam = kLambdaMax;
                if (capped) (*capped)[j] = 1;
            } else if (lam < kLambdaMin) {
                lam = kLambdaMin;
                if (capped) (*capped)[j] = 1;
            }
        }
        lambda[static_cast<Eigen::Index>(j)] = lam;
        off += dj;
    }
    return lambda;
}

namespace detail {

struct FitState {
    Eigen::VectorXd kappa, a, lambda;
    double phi = 1.0;
    Eigen::MatrixXd A, L;
    Eigen::VectorXd eta;   // X kappa + Z a
    Eigen::VectorXd quad;  // z_i'A z_i
    double log_det_A = 0.0;
};

inline double normalized_change(const Eigen::VectorXd& now, const Eigen::VectorXd& before) {
    double m = 0.0;
    for (Eigen::Index i = 0; i < now.size(); ++i)
        m = std::max(m, std::abs(now[i] - before[i]) / (1.0 + std::abs(before[i])));
    return m;
}

}  // namespace detail

/// Coordinate ascent on the variational lower bound: coefficients, then the
/// variational covariance (damped fixed point for Poisson/Bernoulli), then
/// the dispersion (normal only), then the closed-form smoothing parameters.
/// Stops when the relative bound change and the normalized parameter change
/// both fall below their tolerances.
inline FitResult fit(const GamDesign& design, const FitSettings& settings = {},
                     const std::optional<std::pair<ModelParams, VariationalParams>>& init =
                         std::nullopt) {
    FitResult result;
    result.family = design.family;
    result.diagnostics.lambda_capped.assign(static_cast<size_t>(design.q), 0);

    const double log_det_S = sum_log_det_penalty(design.bases);
    Eigen::MatrixXd ZtZ;
    if (design.d > 0) {
        ZtZ = Eigen::MatrixXd::Zero(design.d, design.d);
        ZtZ.selfadjointView<Eigen::Lower>().rankUpdate(design.Z.transpose());
        ZtZ = ZtZ.selfadjointView<Eigen::Lower>();
    }

    detail::FitState st;
    try {
        if (init) {
            st.kappa = init->first.kappa;
            st.phi = init->first.phi;
            st.lambda = init->first.lambda;
            st.a = init->second.a;
            st.L = init->second.L;
            st.A = init->second.A();
        } else {
            // kappa from a GLM of y on X alone; a = 0; A at lambda = 1;
            // phi from the X-only residual variance.
            Eigen::VectorXd kappa0 = Eigen::VectorXd::Zero(design.p);
            kappa0 = detail::fit_penalized_glm(design.X, design.y, design.family, 1.0,
                                               Eigen::VectorXd::Zero(design.n),
                                               Eigen::MatrixXd::Zero(design.p, design.p), kappa0,
                                               50);
            st.kappa = kappa0;
            st.a = Eigen::VectorXd::Zero(design.d);
            st.lambda = Eigen::VectorXd::Ones(design.q);
            if (design.family == Family::normal) {
                const Eigen::VectorXd r = design.y - design.X * st.kappa;
                st.phi = std::max(r.squaredNorm() / design.n, 1e-10);
            } else {
                st.phi = 1.0;
            }
            const Eigen::MatrixXd M0 = make_penalty_blockdiag(design.bases, st.lambda) + ZtZ;
            st.A = design.d > 0 ? detail::invert_spd(M0, "fit init") : Eigen::MatrixXd(0, 0);
            Eigen::LLT<Eigen::MatrixXd> llt(st.A);
            st.L = llt.matrixL();
        }
        st.eta = design.X * st.kappa + design.Z * st.a;
        st.quad = design.d > 0
            ? Eigen::VectorXd((design.Z * st.A).cwiseProduct(design.Z).rowwise().sum())
            : Eigen::VectorXd::Zero(design.n);
        {
            Eigen::LLT<Eigen::MatrixXd> llt(st.A);
            st.log_det_A = 0.0;
            for (Eigen::Index i = 0; i < st.A.rows(); ++i)
                st.log_det_A += 2.0 * std::log(llt.matrixL()(i, i));
        }
    } catch (const NumericalError& e) {
        result.diagnostics.notes.push_back(std::string("initialization failed: ") + e.what());
        result.converged = false;
        return result;
    }

    auto bound_at = [&](const Eigen::VectorXd& eta, const Eigen::VectorXd& quad, double phi,
                        const Eigen::VectorXd& lambda, const Eigen::VectorXd& a,
                        const Eigen::MatrixXd& A, double log_det_A) {
        const double data = detail::data_part(design.family, design.y, eta, quad, phi,
                                              design.log_y_factorial_sum);
        return data + detail::prior_entropy_part(design.bases, lambda, a, A, log_det_A, log_det_S);
    };

    double prev_bound = -std::numeric_limits<double>::infinity();
    bool converged = false;
    int iter = 0;
    try {
        for (iter = 0; iter < settings.max_outer_iters; ++iter) {
            const Eigen::VectorXd kappa_old = st.kappa;
            const Eigen::VectorXd a_old = st.a;
            const Eigen::VectorXd lambda_old = st.lambda;
            const double phi_old = st.phi;

            // 1. coefficients
            {
                Eigen::VectorXd offsets = design.family == Family::normal
                                              ? Eigen::VectorXd::Zero(design.n)
                                              : Eigen::VectorXd(0.5 * st.quad);
                const Eigen::MatrixXd P = detail::embed_penalty(
                    design.p, make_penalty_blockdiag(design.bases, st.lambda));
                Eigen::VectorXd theta(design.p + design.d);
                theta << st.kappa, st.a;
                theta = detail::fit_penalized_glm(design.C, design.y, design.family, st.phi,
                                                  offsets, P, theta, settings.inner_irls_iters);
                st.kappa = theta.head(design.p);
                st.a = theta.tail(design.d);
                st.eta = design.X * st.kappa + design.Z * st.a;
            }

            // 2.-4. variational covariance, dispersion, smoothing parameters.
            // The closed-form block (A -> phi -> lambda) is repeated to
            // internal consistency within the cycle: for the normal family
            // this is exact coordinate ascent on cached cross products, for
            // Poisson/Bernoulli the working weights are frozen at the
            // cycle's entry state and a bound guard falls back to the
            // single damped fixed-point step if the sweep does not ascend.
            if (design.d > 0) {
                const bool closed_lambda =
                    settings.lambda_update == FitSettings::LambdaUpdate::closed_form &&
                    design.q > 0;
                const double bound_before =
                    bound_at(st.eta, st.quad, st.phi, st.lambda, st.a, st.A, st.log_det_A);

                Eigen::MatrixXd data_precision;  // Z'WZ at the entry state
                if (design.family == Family::normal) {
                    data_precision = ZtZ;  // divided by phi inside the sweep
                } else {
                    Eigen::VectorXd w(design.n);
                    for (Eigen::Index i = 0; i < design.n; ++i) {
                        const double psi = st.eta[i] + 0.5 * st.quad[i];
                        w[i] = design.family == Family::poisson ? std::exp(psi)
                                                                : detail::logistic(psi);
                    }
                    if (!w.allFinite())
                        throw NumericalError("fit: overflow in working weights at iteration " +
                                             std::to_string(iter));
                    const Eigen::MatrixXd Zw = design.Z.array().colwise() * w.array().sqrt();
                    data_precision = Eigen::MatrixXd::Zero(design.d, design.d);
                    data_precision.selfadjointView<Eigen::Lower>().rankUpdate(Zw.transpose());
                    data_precision = data_precision.selfadjointView<Eigen::Lower>();
                }

                auto invert_precision = [&](const Eigen::VectorXd& lambda, double phi,
                                            Eigen::MatrixXd& A_out, double& logdet_out) {
                    Eigen::MatrixXd M = make_penalty_blockdiag(design.bases, lambda);
                    const double wscale = design.family == Family::normal ? 1.0 / phi : 1.0;
                    M += wscale * data_precision;
                    if (settings.structure == VariationalParams::Structure::block_diagonal) {
                        A_out = Eigen::MatrixXd::Zero(design.d, design.d);
                        logdet_out = 0.0;
                        int off = 0;
                        for (int j = 0; j < design.q; ++j) {
                            const int dj = design.block_dim(j);
                            Eigen::LLT<Eigen::MatrixXd> llt(M.block(off, off, dj, dj));
                            if (llt.info() != Eigen::Success)
                                throw NumericalError("fit: A update lost positive definiteness");
                            Eigen::MatrixXd inv =
                                llt.solve(Eigen::MatrixXd::Identity(dj, dj));
                            A_out.block(off, off, dj, dj) = 0.5 * (inv + inv.transpose());
                            for (int i = 0; i < dj; ++i)
                                logdet_out -= 2.0 * std::log(llt.matrixL()(i, i));
                            off += dj;
                        }
                    } else {
                        Eigen::LLT<Eigen::MatrixXd> llt(M);
                        if (llt.info() != Eigen::Success)
                            throw NumericalError("fit: A update lost positive definiteness");
                        Eigen::MatrixXd inv =
                            llt.solve(Eigen::MatrixXd::Identity(design.d, design.d));
                        A_out = 0.5 * (inv + inv.transpose());
                        logdet_out = 0.0;
                        for (int i = 0; i < design.d; ++i)
                            logdet_out -= 2.0 * std::log(llt.matrixL()(i, i));
                    }
                };

                // consistency sweep over (A, phi, lambda)
                Eigen::VectorXd lambda_try = st.lambda;
                double phi_try = st.phi;
                Eigen::MatrixXd A_try;
                double logdet_try = 0.0;
                const double ssr = design.family == Family::normal
                                       ? (design.y - st.eta).squaredNorm()
                                       : 0.0;
                std::vector<int> capped(static_cast<size_t>(design.q), 0);
                for (int sweep = 0; sweep < std::max(1, settings.consistency_sweeps); ++sweep) {
                    invert_precision(lambda_try, phi_try, A_try, logdet_try);
                    if (design.family == Family::normal)
                        phi_try = std::max(
                            (ssr + A_try.cwiseProduct(ZtZ).sum()) / design.n, 1e-10);
                    if (!closed_lambda) break;
                    Eigen::VectorXd lambda_new(design.q);
                    int off = 0;
                    for (int j = 0; j < design.q; ++j) {
                        const int dj = design.block_dim(j);
                        const auto& Sj = design.bases[static_cast<size_t>(j)].penalty;
                        const auto aj = st.a.segment(off, dj);
                        const double denom =
                            Sj.cwiseProduct(A_try.block(off, off, dj, dj)).sum() + aj.dot(Sj * aj);
                        double lam = denom < 1e-12 ? kLambdaMax
                                                   : static_cast<double>(dj) / denom;
                        if (lam >= kLambdaMax) {
                            lam = kLambdaMax;
                            capped[static_cast<size_t>(j)] = 1;
                        } else if (lam <= kLambdaMin) {
                            lam = kLambdaMin;
                            capped[static_cast<size_t>(j)] = 1;
                        }
                        lambda_new[j] = lam;
                        off += dj;
                    }
                    double rel = 0.0;
                    for (int j = 0; j < design.q; ++j)
                        rel = std::max(rel, std::abs(lambda_new[j] - lambda_try[j]) /
                                                (1.0 + std::abs(lambda_try[j])));
                    lambda_try = lambda_new;
                    if (rel < 1e-8) break;
                }

                Eigen::VectorXd quad_try =
                    (design.Z * A_try).cwiseProduct(design.Z).rowwise().sum();
                const double bound_sweep =
                    bound_at(st.eta, quad_try, phi_try, lambda_try, st.a, A_try, logdet_try);

                bool accept_sweep =
                    bound_sweep >= bound_before - 1e-10 * (1.0 + std::abs(bound_before));
                if (accept_sweep) {
                    st.A = A_try;
                    st.quad = quad_try;
                    st.log_det_A = logdet_try;
                    st.phi = phi_try;
                    st.lambda = lambda_try;
                    for (int j = 0; j < design.q; ++j)
                        if (capped[static_cast<size_t>(j)])
                            result.diagnostics.lambda_capped[static_cast<size_t>(j)] = 1;
                } else {
                    // fall back to the plain sequence: one damped fixed-point
                    // A step at the entry weights, then phi, then lambda
                    Eigen::MatrixXd A1;
                    double logdet1 = 0.0;
                    invert_precision(st.lambda, st.phi, A1, logdet1);
                    auto eval_candidate = [&](const Eigen::MatrixXd& A_cand,
                                              Eigen::VectorXd& quad_cand,
                                              double& logdet_cand) -> double {
                        Eigen::LLT<Eigen::MatrixXd> llt(A_cand);
                        if (llt.info() != Eigen::Success)
                            return -std::numeric_limits<double>::infinity();
                        logdet_cand = 0.0;
                        for (Eigen::Index i = 0; i < A_cand.rows(); ++i)
                            logdet_cand += 2.0 * std::log(llt.matrixL()(i, i));
                        quad_cand = (design.Z * A_cand).cwiseProduct(design.Z).rowwise().sum();
                        return bound_at(st.eta, quad_cand, st.phi, st.lambda, st.a, A_cand,
                                        logdet_cand);
                    };
                    double gamma = settings.fixedpoint_damping;
                    Eigen::MatrixXd A_cand = gamma >= 1.0
                        ? A1
                        : Eigen::MatrixXd((1.0 - gamma) * st.A + gamma * A1);
                    Eigen::VectorXd quad_cand;
                    double logdet_cand = 0.0;
                    double bound_cand = eval_candidate(A_cand, quad_cand, logdet_cand);
                    while (bound_cand < bound_before - 1e-10 * (1.0 + std::abs(bound_before)) &&
                           gamma > 1e-3) {
                        gamma *= 0.5;
                        ++result.diagnostics.damping_events;
                        A_cand = (1.0 - gamma) * st.A + gamma * A1;
                        bound_cand = eval_candidate(A_cand, quad_cand, logdet_cand);
                    }
                    if (bound_cand >= bound_before - 1e-10 * (1.0 + std::abs(bound_before))) {
                        st.A = A_cand;
                        st.quad = quad_cand;
                        st.log_det_A = logdet_cand;
                    } else {
                        result.diagnostics.notes.push_back(
                            "A update rejected at iteration " + std::to_string(iter) +
                            " (damping floor reached)");
                    }
                    if (design.family == Family::normal)
                        st.phi = std::max(
                            ((design.y - st.eta).squaredNorm() + st.quad.sum()) / design.n,
                            1e-10);
                    if (closed_lambda) {
                        std::vector<int> capped2;
                        VariationalParams vp_now;
                        vp_now.a = st.a;
                        Eigen::LLT<Eigen::MatrixXd> llt_now(st.A);
                        vp_now.L = llt_now.matrixL();
                        st.lambda = update_lambda(design.bases, vp_now, &capped2);
                        for (int j = 0; j < design.q; ++j)
                            if (capped2[static_cast<size_t>(j)])
                                result.diagnostics.lambda_capped[static_cast<size_t>(j)] = 1;
                    }
                }
                Eigen::LLT<Eigen::MatrixXd> llt(st.A);
                if (llt.info() != Eigen::Success)
                    throw NumericalError("fit: variational covariance lost positive definiteness");
                st.L = llt.matrixL();
            } else if (design.family == Family::normal) {
                st.phi = std::max((design.y - st.eta).squaredNorm() / design.n, 1e-10);
            }

            const double bound =
                bound_at(st.eta, st.quad, st.phi, st.lambda, st.a, st.A, st.log_det_A);
            if (!std::isfinite(bound))
                throw NumericalError("fit: lower bound became non-finite at iteration " +
                                     std::to_string(iter));
            result.lower_bound_trace.push_back(bound);

            double param_change = detail::normalized_change(st.kappa, kappa_old);
            param_change = std::max(param_change, detail::normalized_change(st.a, a_old));
            param_change = std::max(param_change, detail::normalized_change(st.lambda, lambda_old));
            param_change = std::max(param_change,
                                    std::abs(st.phi - phi_old) / (1.0 + std::abs(phi_old)));
            const double bound_change = std::abs(bound - prev_bound) / (1.0 + std::abs(bound));
            prev_bound = bound;
            if (iter > 0 && bound_change < settings.tol_lowerbound &&
                param_change < settings.tol_params) {
                converged = true;
                ++iter;
                break;
            }
        }
    } catch (const NumericalError& e) {
        result.diagnostics.notes.push_back(e.what());
        result.diagnostics.overflow = true;
        converged = false;
    }

    result.params.kappa = st.kappa;
    result.params.phi = st.phi;
    result.params.lambda = st.lambda;
    result.vparams.a = st.a;
    result.vparams.L = st.L;
    result.vparams.structure = settings.structure;
    result.converged = converged;
    result.n_iters = iter;
    return result;
}

}  // namespace vagam
