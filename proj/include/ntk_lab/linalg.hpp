#ifndef NTK_LAB_LINALG_HPP
#define NTK_LAB_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "ntk_lab/errors.hpp"

namespace ntk_lab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Thin SVD with singular values sorted descending and a fixed sign gauge:
/// the largest-magnitude entry of every left singular vector is positive.
struct ThinSvd {
    Matrix U;
    Vector S;
    Matrix V;

    /// Number of singular values above `rel_tol * S(0)`.
    Index rank(double rel_tol = 1e-12) const {
        if (S.size() == 0 || S(0) == 0.0) return 0;
        Index r = 0;
        while (r < S.size() && S(r) > rel_tol * S(0)) ++r;
        return r;
    }
};

inline ThinSvd thin_svd(const Matrix& A) {
    ThinSvd out;
    if (A.size() == 0) {
        out.U = Matrix(A.rows(), 0);
        out.V = Matrix(A.cols(), 0);
        return out;
    }
    Eigen::BDCSVD<Matrix> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.U = svd.matrixU();
    out.S = svd.singularValues();
    out.V = svd.matrixV();
    for (Index k = 0; k < out.U.cols(); ++k) {
        Index imax = 0;
        out.U.col(k).cwiseAbs().maxCoeff(&imax);
        if (out.U(imax, k) < 0.0) {
            out.U.col(k) *= -1.0;
            out.V.col(k) *= -1.0;
        }
    }
    return out;
}

/// Symmetric eigendecomposition, eigenvalues ascending.
struct SymEig {
    Vector values;
    Matrix vectors;
};

inline SymEig sym_eig(const Matrix& A) {
    if (A.rows() != A.cols()) throw InvalidInput("sym_eig: matrix is not square");
    const Matrix sym = 0.5 * (A + A.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw NumericalError("sym_eig: eigensolver failed");
    return {es.eigenvalues(), es.eigenvectors()};
}

/// exp(-scale * K) for symmetric K.
inline Matrix expm_neg_sym(const SymEig& eig, double scale) {
    const Vector e = (-scale * eig.values.array()).exp().matrix();
    return eig.vectors * e.asDiagonal() * eig.vectors.transpose();
}

inline Matrix expm_neg_sym(const Matrix& K, double scale) { return expm_neg_sym(sym_eig(K), scale); }

/// Largest singular value.
inline double op_norm(const Matrix& A) {
    if (A.size() == 0) return 0.0;
    if (A.rows() == A.cols() && A.isApprox(A.transpose(), 1e-14)) {
        const SymEig e = sym_eig(A);
        return std::max(std::abs(e.values(0)), std::abs(e.values(e.values.size() - 1)));
    }
    Eigen::BDCSVD<Matrix> svd(A);
    return svd.singularValues()(0);
}

inline bool all_finite(const Matrix& A) { return A.allFinite(); }

/// Cosine similarity of two vectors, 0 if either is zero.
inline double cosine(const Vector& a, const Vector& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

/// Coefficient of determination of `pred` as a model of `ref`.
inline double r_squared(const Vector& ref, const Vector& pred) {
    if (ref.size() != pred.size() || ref.size() == 0) throw InvalidInput("r_squared: size mismatch");
    const double mean = ref.mean();
    const double ss_tot = (ref.array() - mean).square().sum();
    const double ss_res = (ref - pred).squaredNorm();
    if (ss_tot == 0.0) return ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
    return 1.0 - ss_res / ss_tot;
}

inline double pearson(const Vector& a, const Vector& b) {
    if (a.size() != b.size() || a.size() < 2) throw InvalidInput("pearson: size mismatch");
    const Vector da = a.array() - a.mean();
    const Vector db = b.array() - b.mean();
    const double den = da.norm() * db.norm();
    return den == 0.0 ? 0.0 : da.dot(db) / den;
}

/// Ordinary least squares y = slope * x + intercept.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InvalidInput("linear_fit: need at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0) throw InvalidInput("linear_fit: degenerate abscissa");
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    fit.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return fit;
}

/// Orthonormal basis of the column space of A (columns of U with nonzero singular values).
inline Matrix column_space(const Matrix& A, double rel_tol = 1e-10) {
    const ThinSvd svd = thin_svd(A);
    return svd.U.leftCols(svd.rank(rel_tol));
}

/// Largest principal angle (radians) between the column spaces of two orthonormal bases.
/// Uses sin(theta_max) = |(I - Qa Qa^T) Qb|_2, which stays accurate for tiny angles.
inline double max_principal_angle(const Matrix& Qa, const Matrix& Qb) {
    if (Qa.cols() != Qb.cols()) return M_PI / 2;
    if (Qa.cols() == 0) return 0.0;
    const Matrix resid = Qb - Qa * (Qa.transpose() * Qb);
    Eigen::JacobiSVD<Matrix> svd(resid);
    return std::asin(std::clamp(svd.singularValues()(0), 0.0, 1.0));
}

}  // namespace ntk_lab

#endif
