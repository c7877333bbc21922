#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <utility>

#include "vagam/errors.hpp"

namespace vagam {

/// Interior-knot count as a function of sample size: 5 * ceil(n^0.18).
inline int knot_count_rule(int n) {
    if (n < 1) throw DataError("knot_count_rule: n must be >= 1");
    return 5 * static_cast<int>(std::ceil(std::pow(static_cast<double>(n), 0.18)));
}

/// Centered cubic B-spline basis with an equally spaced knot grid on the
/// standardized [0,1] range of one covariate, plus a full-rank difference
/// penalty.
///
/// The raw basis has K + degree functions (K equal subdivisions of [0,1],
/// boundary knots repeated degree+1 times). A sum-to-zero constraint on the
/// fitted smooth removes one dimension: the centered basis has
/// basis_dim = K + degree - 1 columns. The constraint is absorbed by
/// reparametrizing through the orthonormal complement of the column-sum
/// vector of the raw design; the same transform is applied to the
/// difference penalty, which is then ridged to strict positive definiteness.
struct SmoothBasis {
    int degree = 3;
    int num_interior_knots = 0;  // K
    int diff_order = 2;
    int basis_dim = 0;  // d = K + degree - 1
    Eigen::VectorXd knot_sequence;
    Eigen::MatrixXd centering_transform;  // (K+degree) x (K+degree-1)
    Eigen::MatrixXd penalty;              // basis_dim x basis_dim, SPD
    std::pair<double, double> covariate_range{0.0, 1.0};

    int raw_dim() const { return num_interior_knots + degree; }

    /// Map a covariate value to [0,1]; values outside the construction
    /// range clamp to the nearest endpoint.
    double standardize(double u) const {
        const double lo = covariate_range.first, hi = covariate_range.second;
        double t = (u - lo) / (hi - lo);
        if (t < 0.0) t = 0.0;
        if (t > 1.0) t = 1.0;
        return t;
    }

    /// Raw (pre-centering) basis values at a standardized point t in [0,1].
    Eigen::RowVectorXd raw_row(double t) const {
        const int m = degree;
        const int nb = raw_dim();
        const Eigen::VectorXd& kn = knot_sequence;
        // knot span: largest s with kn[s] <= t, capped at the last interior span
        int s = m;
        const int last_span = static_cast<int>(kn.size()) - m - 2;
        while (s < last_span && t >= kn[s + 1]) ++s;

        // Cox-de Boor, local form: computes the m+1 nonzero values on span s
        Eigen::VectorXd vals = Eigen::VectorXd::Zero(m + 1);
        Eigen::VectorXd left(m + 1), right(m + 1);
        vals[0] = 1.0;
        for (int j = 1; j <= m; ++j) {
            left[j] = t - kn[s + 1 - j];
            right[j] = kn[s + j] - t;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(nb);
        row.segment(s - m, m + 1) = vals.transpose();
        return row;
    }

    /// Centered basis rows for a vector of covariate values (clamped).
    Eigen::MatrixXd evaluate(const Eigen::VectorXd& u) const {
        Eigen::MatrixXd raw(u.size(), raw_dim());
        for (Eigen::Index i = 0; i < u.size(); ++i) {
            if (!std::isfinite(u[i]))
                throw DataError("evaluate_basis: non-finite covariate value at row " +
                                std::to_string(i));
            raw.row(i) = raw_row(standardize(u[i]));
        }
        return raw * centering_transform;
    }
};

/// Design block of centered basis evaluations at the construction points.
struct CenteredDesignBlock {
    Eigen::MatrixXd values;  // n x basis_dim
    bool column_means_zero = false;
};

namespace detail {

/// Difference matrix of the given order on `dim` coefficients.
inline Eigen::MatrixXd difference_matrix(int dim, int order) {
    Eigen::MatrixXd D = Eigen::MatrixXd::Identity(dim, dim);
    for (int k = 0; k < order; ++k) {
        const auto rows = D.rows() - 1;
        Eigen::MatrixXd Dk(rows, D.cols());
        Dk = D.bottomRows(rows) - D.topRows(rows);
        D = Dk;
    }
    return D;
}

/// Orthonormal basis of the hyperplane orthogonal to c (columns of the
/// full Householder Q beyond the first).
inline Eigen::MatrixXd orthonormal_complement(const Eigen::VectorXd& c) {
    Eigen::MatrixXd cm = c;
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(cm);
    Eigen::MatrixXd Q = qr.householderQ();
    return Q.rightCols(c.size() - 1);
}

}  // namespace detail

/// Build the centered basis and design block for one smoothed covariate.
///
/// Knots are equally spaced on the standardized [0,1] range (K equal
/// subdivisions; boundary knots repeated degree+1 times). The penalty is the
/// diff_order-th difference penalty mapped through the centering transform
/// and ridged by 1e-8 * tr(S)/d so that it is strictly positive definite.
inline std::pair<SmoothBasis, CenteredDesignBlock> build_basis(const Eigen::VectorXd& u, int K,
                                                               int degree = 3,
                                                               int diff_order = 2) {
    const auto n = u.size();
    if (K < 2) throw DataError("build_basis: need at least 2 interior knots");
    if (n < K + degree + 1)
        throw DataError("build_basis: too few observations (" + std::to_string(n) +
                        ") for K=" + std::to_string(K) + ", degree=" + std::to_string(degree));
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(u[i]))
            throw DataError("build_basis: non-finite covariate value at row " + std::to_string(i));

    const double lo = u.minCoeff(), hi = u.maxCoeff();
    if (!(hi > lo)) throw DataError("build_basis: degenerate covariate (constant values)");

    SmoothBasis basis;
    basis.degree = degree;
    basis.num_interior_knots = K;
    basis.diff_order = diff_order;
    basis.basis_dim = K + degree - 1;
    basis.covariate_range = {lo, hi};

    // open knot vector: 0 repeated degree+1 times, i/K for i=1..K-1, 1 repeated degree+1 times
    const int n_knots = K - 1 + 2 * (degree + 1);
    basis.knot_sequence.resize(n_knots);
    for (int i = 0; i <= degree; ++i) {
        basis.knot_sequence[i] = 0.0;
        basis.knot_sequence[n_knots - 1 - i] = 1.0;
    }
    for (int i = 1; i < K; ++i)
        basis.knot_sequence[degree + i] = static_cast<double>(i) / static_cast<double>(K);

    const int raw = basis.raw_dim();
    Eigen::MatrixXd raw_design(n, raw);
    for (Eigen::Index i = 0; i < n; ++i) raw_design.row(i) = basis.raw_row(basis.standardize(u[i]));

    basis.centering_transform = detail::orthonormal_complement(raw_design.colwise().sum().transpose());

    const Eigen::MatrixXd D = detail::difference_matrix(raw, diff_order);
    Eigen::MatrixXd S = basis.centering_transform.transpose() * (D.transpose() * D) *
                        basis.centering_transform;
    S = 0.5 * (S + S.transpose());
    const double ridge = 1e-8 * S.trace() / static_cast<double>(basis.basis_dim);
    S.diagonal().array() += ridge;
    basis.penalty = S;

    CenteredDesignBlock block;
    block.values = raw_design * basis.centering_transform;
    block.column_means_zero = true;
    return {std::move(basis), std::move(block)};
}

/// Centered basis evaluations on new data, using the stored centering
/// transform (never re-centered) and clamping to the construction range.
inline Eigen::MatrixXd evaluate_basis(const SmoothBasis& basis, const Eigen::VectorXd& u_new) {
    return basis.evaluate(u_new);
}

}  // namespace vagam
