#ifndef NTK_LAB_DATASET_HPP
#define NTK_LAB_DATASET_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/linalg.hpp"

namespace ntk_lab {

/// Inputs stored column-wise: X is D x P, one sample per column.
struct DataMatrix {
    Matrix X;

    DataMatrix() = default;
    explicit DataMatrix(Matrix x) : X(std::move(x)) {}

    Index dim() const { return X.rows(); }
    Index count() const { return X.cols(); }
};

/// Empirical correlation (1/P) X X^T.
struct CorrelationMatrix {
    Matrix Sigma;

    CorrelationMatrix() = default;
    explicit CorrelationMatrix(Matrix s) : Sigma(std::move(s)) {}

    Index dim() const { return Sigma.rows(); }
};

/// Targets stored C x P, one output channel per row.
struct TargetMatrix {
    Matrix Y;

    TargetMatrix() = default;
    explicit TargetMatrix(Matrix y) : Y(std::move(y)) {}

    Index channels() const { return Y.rows(); }
    Index count() const { return Y.cols(); }
    /// Channel-major flattening (c, mu) -> c * P + mu, matching the block kernel layout.
    Vector flat() const {
        Vector v(Y.size());
        for (Index c = 0; c < Y.rows(); ++c) v.segment(c * Y.cols(), Y.cols()) = Y.row(c).transpose();
        return v;
    }
};

/// Linear teacher y = diag(s) * beta * x with row-orthonormal beta (C x D).
struct TeacherSpec {
    Matrix beta;
    Vector s;

    Index dim() const { return beta.cols(); }
    Index channels() const { return beta.rows(); }

    /// Full teacher matrix diag(s) * beta.
    Matrix weights() const { return s.asDiagonal() * beta; }

    void validate() const {
        if (beta.rows() == 0 || beta.cols() == 0) throw InvalidInput("teacher: empty beta");
        if (s.size() != beta.rows()) throw InvalidInput("teacher: need one scale per beta row");
        const Matrix gram = beta * beta.transpose();
        if (!gram.isApprox(Matrix::Identity(beta.rows(), beta.rows()), 1e-10) &&
            (gram - Matrix::Identity(beta.rows(), beta.rows())).cwiseAbs().maxCoeff() > 1e-10)
            throw InvalidInput("teacher: beta rows must be orthonormal");
        if ((s.array() < 0.0).any()) throw InvalidInput("teacher: negative scale");
    }
};

inline void require_finite(const Matrix& M, const char* what) {
    if (!M.allFinite()) throw InvalidInput(std::string(what) + ": non-finite entries");
}

/// Standard normal matrix, column-major fill order.
inline Matrix standard_normal(Index rows, Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    Matrix Z(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) Z(i, j) = n01(rng);
    return Z;
}

/// Square-root factor F with F F^T = cov; Cholesky first, eigen fallback for singular PSD input.
inline Matrix covariance_factor(const Matrix& cov) {
    if (cov.rows() != cov.cols()) throw InvalidInput("covariance must be square");
    require_finite(cov, "covariance");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, cov.cwiseAbs().maxCoeff()))
        throw InvalidInput("covariance must be symmetric");
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    const SymEig eig = sym_eig(cov);
    const double scale = std::max(1.0, eig.values.cwiseAbs().maxCoeff());
    if (eig.values(0) < -1e-12 * scale) throw InvalidInput("covariance is not positive semidefinite");
    const Vector root = eig.values.cwiseMax(0.0).cwiseSqrt();
    return eig.vectors * root.asDiagonal();
}

inline DataMatrix generate_gaussian(Index D, Index P, const CorrelationMatrix& cov, std::uint64_t seed) {
    if (D <= 0 || P < 0) throw InvalidInput("generate_gaussian: bad shape");
    if (cov.dim() != D) throw InvalidInput("generate_gaussian: covariance is not D x D");
    const Matrix F = covariance_factor(cov.Sigma);
    std::mt19937_64 rng(seed);
    return DataMatrix(F * standard_normal(D, P, rng));
}

inline CorrelationMatrix correlation(const DataMatrix& data) {
    if (data.count() < 1) throw InvalidInput("correlation: need at least one sample");
    return CorrelationMatrix(data.X * data.X.transpose() / static_cast<double>(data.count()));
}

/// Subtracts the per-feature mean so every row of X sums to zero.
inline DataMatrix center(const DataMatrix& data) {
    if (data.count() == 0) return data;
    const Vector mean = data.X.rowwise().mean();
    return DataMatrix(data.X.colwise() - mean);
}

/// Replaces the singular values S of X by S^gamma; zero singular values stay zero.
inline DataMatrix partial_whiten(const DataMatrix& data, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidInput("partial_whiten: gamma must lie in [0, 1]");
    require_finite(data.X, "partial_whiten");
    const ThinSvd svd = thin_svd(data.X);
    const Index r = svd.rank(1e-12);
    Vector s = Vector::Zero(svd.S.size());
    for (Index k = 0; k < r; ++k) s(k) = std::pow(svd.S(k), gamma);
    return DataMatrix(svd.U * s.asDiagonal() * svd.V.transpose());
}

/// Linear map T with T X = partial_whiten(X, gamma). Directions outside the column
/// space of X pass through unchanged, so held-out points can be mapped consistently.
inline Matrix whitening_map(const DataMatrix& data, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InvalidInput("whitening_map: gamma must lie in [0, 1]");
    const ThinSvd svd = thin_svd(data.X);
    const Index r = svd.rank(1e-12);
    const Matrix Ur = svd.U.leftCols(r);
    Vector g(r);
    for (Index k = 0; k < r; ++k) g(k) = std::pow(svd.S(k), gamma - 1.0);
    return Ur * g.asDiagonal() * Ur.transpose() + (Matrix::Identity(data.dim(), data.dim()) - Ur * Ur.transpose());
}

/// Scale factor c such that the nonzero eigenvalues of correlation(c X) average to one.
inline double unit_correlation_scale(const DataMatrix& data) {
    const ThinSvd svd = thin_svd(data.X);
    const Index r = svd.rank(1e-12);
    if (r == 0) throw InvalidInput("unit_correlation_scale: zero data matrix");
    const double mean_eig = svd.S.head(r).squaredNorm() / (static_cast<double>(data.count()) * r);
    return 1.0 / std::sqrt(mean_eig);
}

/// Fully whitened copy rescaled so that Sigma is the identity on the span of the data.
inline DataMatrix whiten_unit(const DataMatrix& data, double gamma = 0.0) {
    DataMatrix w = partial_whiten(data, gamma);
    w.X *= unit_correlation_scale(w);
    return w;
}

inline TargetMatrix make_targets(const DataMatrix& data, const TeacherSpec& teacher) {
    teacher.validate();
    if (teacher.dim() != data.dim()) throw InvalidInput("make_targets: teacher dimension does not match data");
    return TargetMatrix(teacher.weights() * data.X);
}

/// Random teacher with C orthonormal rows in R^D.
inline TeacherSpec random_teacher(Index D, const Vector& scales, std::uint64_t seed) {
    const Index C = scales.size();
    if (C < 1 || C > D) throw InvalidInput("random_teacher: need 1 <= C <= D");
    std::mt19937_64 rng(seed);
    const Matrix G = standard_normal(D, C, rng);
    Eigen::HouseholderQR<Matrix> qr(G);
    Matrix Q = qr.householderQ() * Matrix::Identity(D, C);
    for (Index c = 0; c < C; ++c) {
        Index imax = 0;
        Q.col(c).cwiseAbs().maxCoeff(&imax);
        if (Q(imax, c) < 0) Q.col(c) *= -1.0;
    }
    return TeacherSpec{Q.transpose(), scales};
}

/// One-hot class labels with every row centred to zero mean.
inline TargetMatrix one_hot_centered(const std::vector<int>& labels, Index C) {
    if (C < 1) throw InvalidInput("one_hot_centered: need at least one class");
    Matrix Y = Matrix::Zero(C, static_cast<Index>(labels.size()));
    for (std::size_t mu = 0; mu < labels.size(); ++mu) {
        if (labels[mu] < 0 || labels[mu] >= C) throw InvalidInput("one_hot_centered: label out of range");
        Y(labels[mu], static_cast<Index>(mu)) = 1.0;
    }
    if (Y.cols() > 0) Y = Y.colwise() - Y.rowwise().mean();
    return TargetMatrix(std::move(Y));
}

/// Sample file: header `x1..xD,y1..yC`, one sample per line.
inline void save_csv(const std::string& path, const DataMatrix& data, const TargetMatrix& targets) {
    if (targets.count() != data.count() && targets.channels() > 0)
        throw InvalidInput("save_csv: sample counts differ");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    bool first = true;
    for (Index d = 0; d < data.dim(); ++d, first = false) os << (first ? "" : ",") << 'x' << d + 1;
    for (Index c = 0; c < targets.channels(); ++c, first = false) os << (first ? "" : ",") << 'y' << c + 1;
    os << '\n';
    std::vector<double> row(static_cast<std::size_t>(data.dim() + targets.channels()));
    for (Index mu = 0; mu < data.count(); ++mu) {
        for (Index d = 0; d < data.dim(); ++d) row[d] = data.X(d, mu);
        for (Index c = 0; c < targets.channels(); ++c) row[data.dim() + c] = targets.Y(c, mu);
        csv::write_row(os, row.data(), static_cast<Index>(row.size()));
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::pair<DataMatrix, TargetMatrix> load_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ParseError("missing header row", 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    Index D = 0, C = 0;
    for (auto name : csv::split(line)) {
        const bool is_x = !name.empty() && name.front() == 'x';
        const bool is_y = !name.empty() && name.front() == 'y';
        if (is_x && C == 0 && name == "x" + std::to_string(D + 1)) {
            ++D;
        } else if (is_y && name == "y" + std::to_string(C + 1)) {
            ++C;
        } else {
            throw ParseError("bad header field '" + std::string(name) + "'", 1);
        }
    }
    if (D == 0) throw ParseError("header declares no input columns", 1);
    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = csv::split(line);
        if (static_cast<Index>(cells.size()) != D + C)
            throw ParseError("expected " + std::to_string(D + C) + " fields, got " + std::to_string(cells.size()),
                             line_no);
        std::vector<double> row;
        row.reserve(cells.size());
        for (auto c : cells) row.push_back(csv::parse_double(c, line_no));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError("no samples", line_no);
    const Index P = static_cast<Index>(rows.size());
    Matrix X(D, P), Y(C, P);
    for (Index mu = 0; mu < P; ++mu) {
        for (Index d = 0; d < D; ++d) X(d, mu) = rows[mu][d];
        for (Index c = 0; c < C; ++c) Y(c, mu) = rows[mu][D + c];
    }
    return {DataMatrix(std::move(X)), TargetMatrix(std::move(Y))};
}

}  // namespace ntk_lab

#endif
