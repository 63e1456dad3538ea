#ifndef NTK_LAB_KERNEL_HPP
#define NTK_LAB_KERNEL_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/linalg.hpp"
#include "ntk_lab/network.hpp"

namespace ntk_lab {

/// Gram matrix of the tangent kernel at one time. Multi-output kernels are CP x CP,
/// ordered class-major: index c * P + mu.
struct KernelSnapshot {
    double time = 0.0;
    Matrix gram;
    Matrix test_rows;  // (C*Q) x (C*P), empty when no test points were given
    Index clamped = 0;  // negative eigenvalues clamped the last time this Gram was decomposed

    bool has_test() const { return test_rows.size() > 0; }
};

namespace detail {

/// sum_l (Da_l^T Db_l) .* (Ha_l^T Hb_l) over the layer sensitivities and inputs.
inline Matrix hadamard_gram(const std::vector<Matrix>& Da, const std::vector<Matrix>& Ha,
                            const std::vector<Matrix>& Db, const std::vector<Matrix>& Hb) {
    Matrix K = Matrix::Zero(Da.front().cols(), Db.front().cols());
    for (std::size_t l = 0; l < Da.size(); ++l)
        K += (Da[l].transpose() * Db[l]).cwiseProduct(Ha[l].transpose() * Hb[l]);
    return K;
}

}  // namespace detail

inline KernelSnapshot empirical_ntk(const LayerStack& net, const Matrix& X, const Matrix* X_test = nullptr,
                                    double time = 0.0) {
    const ForwardCache fc = forward_cache(net, X);
    const Index P = X.cols(), C = net.output_dim();
    std::vector<std::vector<Matrix>> D;
    for (Index c = 0; c < C; ++c) D.push_back(output_sensitivities(net, fc, c));

    KernelSnapshot snap;
    snap.time = time;
    snap.gram.resize(C * P, C * P);
    for (Index a = 0; a < C; ++a)
        for (Index b = a; b < C; ++b) {
            const Matrix blk = detail::hadamard_gram(D[a], fc.H, D[b], fc.H);
            snap.gram.block(a * P, b * P, P, P) = blk;
            if (b != a) snap.gram.block(b * P, a * P, P, P) = blk.transpose();
        }
    snap.gram = 0.5 * (snap.gram + snap.gram.transpose());

    if (X_test && X_test->cols() > 0) {
        const ForwardCache ft = forward_cache(net, *X_test);
        const Index Q = X_test->cols();
        snap.test_rows.resize(C * Q, C * P);
        for (Index a = 0; a < C; ++a) {
            const auto Dt = output_sensitivities(net, ft, a);
            for (Index b = 0; b < C; ++b)
                snap.test_rows.block(a * Q, b * P, Q, P) = detail::hadamard_gram(Dt, ft.H, D[b], fc.H);
        }
    }
    return snap;
}

/// Kernel x^T M x' of a linear network, kept as the Kronecker sum M = sum_l A_l (x) B_l
/// with A_l the C x C suffix Gram and B_l the D x D prefix Gram.
struct AnalyticLinearKernel {
    std::vector<Matrix> A;
    std::vector<Matrix> B;

    Index channels() const { return A.front().rows(); }
    Index dim() const { return B.front().rows(); }

    /// D x D matrix coupling output channels a and b.
    Matrix block(Index a, Index b) const {
        Matrix M = Matrix::Zero(dim(), dim());
        for (std::size_t l = 0; l < A.size(); ++l) M += A[l](a, b) * B[l];
        return M;
    }

    Matrix M() const { return block(0, 0); }

    /// Class-major Gram between the columns of X1 and X2.
    Matrix gram(const Matrix& X1, const Matrix& X2) const {
        const Index C = channels(), P1 = X1.cols(), P2 = X2.cols();
        Matrix K(C * P1, C * P2);
        for (Index a = 0; a < C; ++a)
            for (Index b = 0; b < C; ++b) K.block(a * P1, b * P2, P1, P2) = X1.transpose() * block(a, b) * X2;
        return K;
    }
};

inline AnalyticLinearKernel analytic_linear_ntk(const LayerStack& net) {
    net.check();
    if (net.activation != Activation::Linear) throw InvalidInput("analytic_linear_ntk: network is not linear");
    const int L = net.depth();
    const Index C = net.output_dim(), D = net.input_dim();
    // prefix[l] = W_{l-1} ... W_0 (identity for l = 0); suffix[l] = W_{L-1} ... W_{l+1}
    std::vector<Matrix> prefix(L), suffix(L);
    prefix[0] = Matrix::Identity(D, D);
    for (int l = 1; l < L; ++l) prefix[l] = net.W[l - 1] * prefix[l - 1];
    suffix[L - 1] = Matrix::Identity(C, C);
    for (int l = L - 2; l >= 0; --l) suffix[l] = suffix[l + 1] * net.W[l + 1];
    AnalyticLinearKernel k;
    for (int l = 0; l < L; ++l) {
        k.A.push_back(suffix[l] * suffix[l].transpose());
        k.B.push_back(prefix[l].transpose() * prefix[l]);
    }
    return k;
}

/// y^T K y / (|K|_F |y|^2) over the flattened class-major targets.
inline double alignment(const Matrix& K, const Vector& y) {
    if (K.rows() != y.size()) throw InvalidInput("alignment: size mismatch");
    const double kf = K.norm(), yy = y.squaredNorm();
    if (kf == 0.0 || yy == 0.0) throw InvalidInput("alignment: undefined for zero kernel or zero targets");
    return y.dot(K * y) / (kf * yy);
}

struct RegressionResult {
    Matrix predictions;
    double jitter = 0.0;  // diagonal shift actually applied beyond the requested ridge
};

/// k_test (K + ridge I)^{-1} y. Near-singular ridgeless systems get jitter 1e-10 trace/P.
inline RegressionResult kernel_regression(const Matrix& K, const Matrix& k_test, const Matrix& y,
                                          double ridge = 0.0) {
    if (K.rows() != K.cols() || K.rows() != y.rows()) throw InvalidInput("kernel_regression: shape mismatch");
    if (k_test.cols() != K.cols()) throw InvalidInput("kernel_regression: test rows do not match Gram");
    if (ridge < 0.0) throw InvalidInput("kernel_regression: negative ridge");
    const Index P = K.rows();
    const Matrix Ks = 0.5 * (K + K.transpose());
    RegressionResult res;
    Eigen::LDLT<Matrix> ldlt(Ks + ridge * Matrix::Identity(P, P));
    const bool bad = ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-14);
    if (bad && ridge == 0.0) {
        res.jitter = 1e-10 * Ks.trace() / static_cast<double>(P);
        ldlt.compute(Ks + res.jitter * Matrix::Identity(P, P));
    }
    if (ldlt.info() != Eigen::Success) throw NumericalError("kernel_regression: factorization failed");
    res.predictions = k_test * ldlt.solve(y);
    if (!res.predictions.allFinite()) throw NumericalError("kernel_regression: non-finite predictions");
    return res;
}

/// Decomposition with small negative eigenvalues clamped to zero.
inline SymEig psd_eig(const Matrix& K, Index* clamped = nullptr) {
    SymEig e = sym_eig(K);
    Index n = 0;
    for (Index i = 0; i < e.values.size(); ++i)
        if (e.values(i) < 0.0) {
            e.values(i) = 0.0;
            ++n;
        }
    if (clamped) *clamped = n;
    return e;
}

/// Running solution of dPhi/dt = -eta K_t Phi together with the accumulated test-point
/// integral  int eta k_t(x) Phi_t dt  applied to the initial residual.
struct TransitionState {
    Matrix Phi;
    Vector accumulated_pred;
    Vector residual0;  // y - f0 on the training set
    double last_time = 0.0;

    static TransitionState start(const Vector& residual0, Index test_size, double t0 = 0.0) {
        TransitionState s;
        s.Phi = Matrix::Identity(residual0.size(), residual0.size());
        s.accumulated_pred = Vector::Zero(test_size);
        s.residual0 = residual0;
        s.last_time = t0;
        return s;
    }
};

/// Advances by dt with the kernel held fixed. The test integral uses the exact
/// exponential integral (1 - e^{-eta dt lambda}) / lambda per kernel eigenmode.
inline void evolve_transition(TransitionState& st, const Matrix& K, const Matrix& k_test, double dt, double eta,
                              Index* clamped = nullptr) {
    if (!(dt > 0.0)) throw InvalidInput("evolve_transition: dt must be positive");
    const SymEig e = psd_eig(K, clamped);
    const Vector lam = e.values;
    Vector decay(lam.size()), integral(lam.size());
    for (Index i = 0; i < lam.size(); ++i) {
        const double x = eta * dt * lam(i);
        decay(i) = std::exp(-x);
        integral(i) = x > 1e-12 ? -std::expm1(-x) / lam(i) : eta * dt * (1.0 - 0.5 * x);
    }
    if (k_test.size() > 0) {
        const Vector coeff = e.vectors.transpose() * (st.Phi * st.residual0);
        st.accumulated_pred += k_test * (e.vectors * integral.cwiseProduct(coeff));
    }
    st.Phi = e.vectors * decay.asDiagonal() * (e.vectors.transpose() * st.Phi);
    st.last_time += dt;
}

/// Contribution after the last snapshot if the kernel stays frozen forever: k K^+ Phi r0.
inline Vector frozen_tail(const TransitionState& st, const Matrix& K, const Matrix& k_test) {
    const SymEig e = psd_eig(K);
    const double tol = 1e-12 * std::max(1e-300, e.values.maxCoeff());
    Vector coeff = e.vectors.transpose() * (st.Phi * st.residual0);
    for (Index i = 0; i < coeff.size(); ++i) coeff(i) = e.values(i) > tol ? coeff(i) / e.values(i) : 0.0;
    return k_test * (e.vectors * coeff);
}

/// Streaming version of the integrating-factor predictor, fed one snapshot at a time.
/// Each interval uses the average of its endpoint kernels.
class IntegratingFactor {
public:
    IntegratingFactor(Vector f0_train, Vector f0_test, Vector y, double eta)
        : f0_test_(std::move(f0_test)), eta_(eta) {
        if (f0_train.size() != y.size()) throw InvalidInput("integrating factor: target size mismatch");
        state_ = TransitionState::start(y - f0_train, f0_test_.size());
    }

    void push(const KernelSnapshot& s) {
        if (has_prev_) {
            const double dt = s.time - prev_.time;
            if (dt < 0.0) throw InvalidInput("integrating factor: snapshots out of order");
            if (dt > 0.0) {
                const Matrix K = 0.5 * (prev_.gram + s.gram);
                const Matrix k = s.has_test() ? Matrix(0.5 * (prev_.test_rows + s.test_rows)) : Matrix();
                Index clamped = 0;
                evolve_transition(state_, K, k, dt, eta_, &clamped);
                clamped_ += clamped;
            }
        } else {
            state_.last_time = s.time;
        }
        prev_ = s;
        has_prev_ = true;
    }

    /// Predictions at the last pushed time, optionally extended to t = infinity with the final kernel frozen.
    Vector predict(bool tail_to_infinity) const {
        if (!has_prev_) throw InvalidInput("integrating factor: no snapshots");
        Vector f = f0_test_ + state_.accumulated_pred;
        if (tail_to_infinity && prev_.has_test()) f += frozen_tail(state_, prev_.gram, prev_.test_rows);
        return f;
    }

    const TransitionState& state() const { return state_; }
    Index clamped_total() const { return clamped_; }

private:
    Vector f0_test_;
    double eta_;
    TransitionState state_;
    KernelSnapshot prev_;
    bool has_prev_ = false;
    Index clamped_ = 0;
};

/// Chains exact exponentials over the snapshot intervals. `eta` is the rate in df/dt = -eta K (f - y).
inline Vector integrating_factor_predict(const std::vector<KernelSnapshot>& snaps, const Vector& y,
                                         const Vector& f0_train, const Vector& f0_test, double eta,
                                         bool tail_to_infinity = true) {
    if (snaps.empty()) throw InvalidInput("integrating_factor_predict: empty snapshot list");
    IntegratingFactor itf(f0_train, f0_test, y, eta);
    for (const auto& s : snaps) itf.push(s);
    return itf.predict(tail_to_infinity);
}

/// Largest relative commutator |[K_t, int_0^t K]|_F / (|K_t|_F |int K|_F) along the snapshots.
inline double commutator_diagnostic(const std::vector<KernelSnapshot>& snaps) {
    if (snaps.size() < 2) return 0.0;
    Matrix integral = Matrix::Zero(snaps.front().gram.rows(), snaps.front().gram.cols());
    double worst = 0.0;
    for (std::size_t i = 1; i < snaps.size(); ++i) {
        integral += 0.5 * (snaps[i].time - snaps[i - 1].time) * (snaps[i].gram + snaps[i - 1].gram);
        const Matrix& K = snaps[i].gram;
        const double den = K.norm() * integral.norm();
        if (den > 0.0) worst = std::max(worst, (K * integral - integral * K).norm() / den);
    }
    return worst;
}

inline void write_snapshots(const std::string& dir, const std::vector<KernelSnapshot>& snaps) {
    std::filesystem::create_directories(dir);
    nlohmann::json idx;
    idx["count"] = snaps.size();
    idx["entries"] = nlohmann::json::array();
    for (std::size_t i = 0; i < snaps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "gram_%04zu.csv", i);
        csv::write_matrix_file(dir + "/" + name, snaps[i].gram);
        nlohmann::json e{{"time", snaps[i].time},
                         {"gram", name},
                         {"rows", snaps[i].gram.rows()},
                         {"test_rows", snaps[i].test_rows.rows()}};
        if (snaps[i].has_test()) {
            char tname[32];
            std::snprintf(tname, sizeof(tname), "test_%04zu.csv", i);
            csv::write_matrix_file(dir + "/" + tname, snaps[i].test_rows);
            e["test"] = tname;
        }
        idx["entries"].push_back(e);
    }
    std::ofstream os(dir + "/index.json", std::ios::binary);
    if (!os) throw IoError("cannot write snapshot index in '" + dir + "'");
    os << idx.dump(2) << '\n';
}

inline std::vector<KernelSnapshot> read_snapshots(const std::string& dir) {
    std::ifstream is(dir + "/index.json", std::ios::binary);
    if (!is) throw IoError("missing snapshot index in '" + dir + "'");
    nlohmann::json idx;
    try {
        idx = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad snapshot index: ") + e.what(), 0);
    }
    std::vector<KernelSnapshot> out;
    for (const auto& e : idx.at("entries")) {
        KernelSnapshot s;
        s.time = e.at("time").get<double>();
        s.gram = csv::read_matrix_file(dir + "/" + e.at("gram").get<std::string>());
        if (e.contains("test")) s.test_rows = csv::read_matrix_file(dir + "/" + e.at("test").get<std::string>());
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace ntk_lab

#endif
