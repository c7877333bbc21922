#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "vagam/errors.hpp"
#include "vagam/splines.hpp"

namespace vagam {

enum class Family { poisson, normal, bernoulli };

inline bool has_dispersion(Family f) { return f == Family::normal; }

inline std::string family_name(Family f) {
    switch (f) {
        case Family::poisson: return "poisson";
        case Family::normal: return "normal";
        case Family::bernoulli: return "bernoulli";
    }
    return "?";
}

inline Family family_from_name(const std::string& s) {
    if (s == "poisson") return Family::poisson;
    if (s == "normal") return Family::normal;
    if (s == "bernoulli") return Family::bernoulli;
    throw DataError("unknown family: " + s);
}

/// Assembled model design: response, parametric design matrix (with
/// intercept column), and the stacked centered smooth design.
struct GamDesign {
    Eigen::VectorXd y;
    Eigen::MatrixXd X;  // n x p
    std::vector<SmoothBasis> bases;
    std::vector<CenteredDesignBlock> Z_blocks;
    Eigen::MatrixXd Z;  // n x d, blocks side by side
    Eigen::MatrixXd C;  // n x (p+d), [X Z]
    std::vector<int> block_offset;
    Family family = Family::normal;
    int n = 0, p = 0, q = 0, d = 0;
    double log_y_factorial_sum = 0.0;  // sum of ln(y_i!) for the Poisson constant

    int block_dim(int j) const { return bases[static_cast<size_t>(j)].basis_dim; }
};

namespace detail {

inline void validate_response(const Eigen::VectorXd& y, Family family) {
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (!std::isfinite(y[i]))
            throw DataError("response: non-finite value at row " + std::to_string(i));
        if (family == Family::bernoulli && y[i] != 0.0 && y[i] != 1.0)
            throw DataError("response: Bernoulli value not in {0,1} at row " + std::to_string(i));
        if (family == Family::poisson && (y[i] < 0.0 || std::floor(y[i]) != y[i]))
            throw DataError("response: Poisson value not a nonnegative integer at row " +
                            std::to_string(i));
    }
}

}  // namespace detail

/// Assemble a GamDesign from a response, a parametric design matrix, and raw
/// smooth covariate columns. Bases are built per covariate; validation of
/// the response and of the rank of X happens here, not at fit time.
inline GamDesign make_design(const Eigen::VectorXd& y, const Eigen::MatrixXd& X,
                             const std::vector<Eigen::VectorXd>& smooth_covariates,
                             const std::vector<int>& knots, Family family, int degree = 3,
                             int diff_order = 2) {
    GamDesign design;
    design.family = family;
    design.n = static_cast<int>(y.size());
    design.p = static_cast<int>(X.cols());
    design.q = static_cast<int>(smooth_covariates.size());

    if (X.rows() != y.size()) throw DataError("make_design: X row count does not match response");
    if (knots.size() != smooth_covariates.size())
        throw DataError("make_design: one knot count per smooth covariate required");
    detail::validate_response(y, family);

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
    if (qr.rank() < X.cols()) throw DataError("make_design: X is rank deficient");

    design.y = y;
    design.X = X;
    design.d = 0;
    for (int j = 0; j < design.q; ++j) {
        const auto& u = smooth_covariates[static_cast<size_t>(j)];
        if (u.size() != y.size())
            throw DataError("make_design: smooth covariate " + std::to_string(j) +
                            " row count mismatch");
        auto [basis, block] = build_basis(u, knots[static_cast<size_t>(j)], degree, diff_order);
        design.block_offset.push_back(design.d);
        design.d += basis.basis_dim;
        design.bases.push_back(std::move(basis));
        design.Z_blocks.push_back(std::move(block));
    }

    design.Z.resize(design.n, design.d);
    for (int j = 0; j < design.q; ++j)
        design.Z.middleCols(design.block_offset[static_cast<size_t>(j)], design.block_dim(j)) =
            design.Z_blocks[static_cast<size_t>(j)].values;

    design.C.resize(design.n, design.p + design.d);
    design.C.leftCols(design.p) = design.X;
    design.C.rightCols(design.d) = design.Z;

    if (family == Family::poisson)
        for (Eigen::Index i = 0; i < y.size(); ++i)
            design.log_y_factorial_sum += std::lgamma(y[i] + 1.0);

    return design;
}

/// eta_i = x_i'kappa + z_i'coefs.
inline Eigen::VectorXd linear_predictor(const GamDesign& design, const Eigen::VectorXd& kappa,
                                        const Eigen::VectorXd& coefs) {
    if (kappa.size() != design.p || coefs.size() != design.d)
        throw DataError("linear_predictor: dimension mismatch");
    return design.X * kappa + design.Z * coefs;
}

/// Offsets 0.5 * z_i' A z_i for each observation. A must be positive definite.
inline Eigen::VectorXd quadratic_form_offsets(const GamDesign& design, const Eigen::MatrixXd& A) {
    if (A.rows() != design.d || A.cols() != design.d)
        throw DataError("quadratic_form_offsets: A dimension mismatch");
    if (design.d > 0) {
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (llt.info() != Eigen::Success)
            throw NumericalError("quadratic_form_offsets: A is not positive definite");
    }
    return 0.5 * (design.Z * A).cwiseProduct(design.Z).rowwise().sum();
}

/// Parametric-component parameters: coefficients, dispersion, smoothing
/// parameters. phi is fixed at 1 for Poisson and Bernoulli.
struct ModelParams {
    Eigen::VectorXd kappa;
    double phi = 1.0;
    Eigen::VectorXd lambda;
};

/// Variational mean and covariance. The covariance is held by its lower
/// Cholesky factor; reconstruct with A().
struct VariationalParams {
    enum class Structure { unstructured, block_diagonal };

    Eigen::VectorXd a;
    Eigen::MatrixXd L;  // lower triangular, A = L L'
    Structure structure = Structure::unstructured;

    Eigen::MatrixXd A() const { return L * L.transpose(); }

    double log_det_A() const {
        double s = 0.0;
        for (Eigen::Index i = 0; i < L.rows(); ++i) s += std::log(L(i, i));
        return 2.0 * s;
    }

    static VariationalParams from_covariance(const Eigen::VectorXd& a, const Eigen::MatrixXd& A,
                                             Structure structure = Structure::unstructured) {
        VariationalParams vp;
        vp.a = a;
        vp.structure = structure;
        if (A.rows() != A.cols() || A.rows() != a.size())
            throw DataError("VariationalParams: dimension mismatch");
        if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + A.cwiseAbs().maxCoeff()))
            throw NumericalError("VariationalParams: A is not symmetric");
        Eigen::LLT<Eigen::MatrixXd> llt(A);
        if (a.size() > 0 && llt.info() != Eigen::Success)
            throw NumericalError("VariationalParams: A is not positive definite");
        vp.L = llt.matrixL();
        return vp;
    }
};

}  // namespace vagam
