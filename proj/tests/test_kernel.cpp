#include <filesystem>

#include <gtest/gtest.h>

#include "ntk_lab/kernel.hpp"
#include "ntk_lab/theory.hpp"

using namespace ntk_lab;

namespace {

Matrix randn(Index r, Index c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return standard_normal(r, c, rng);
}

Matrix random_psd(Index P, std::uint64_t seed) {
    const Matrix A = randn(P, P, seed);
    return A * A.transpose() / static_cast<double>(P);
}

}  // namespace

TEST(EmpiricalNtk, TwoLayerLinearClosedForm) {
    const LayerStack net = init({5, 7, 1}, 1.0, Activation::Linear, 1);
    const Matrix X = randn(5, 6, 2);
    const Matrix& W = net.W[0];
    const Matrix M = W.transpose() * W + net.W[1].squaredNorm() * Matrix::Identity(5, 5);
    EXPECT_LT((empirical_ntk(net, X).gram - X.transpose() * M * X).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(EmpiricalNtk, DuplicatedSampleDuplicatesRow) {
    const LayerStack net = init({3, 8, 1}, 1.0, Activation::ReLU, 3);
    Matrix X = randn(3, 4, 4);
    X.col(3) = X.col(1);
    const Matrix K = empirical_ntk(net, X).gram;
    EXPECT_LT((K.row(3) - K.row(1)).norm(), 1e-12);
    EXPECT_GT(sym_eig(K).values.minCoeff(), -1e-10 * K.trace());
}

TEST(EmpiricalNtk, MatchesJacobianContraction) {
    const LayerStack net = init({3, 6, 5, 2}, 1.0, Activation::ReLU, 5);
    const Matrix X = randn(3, 5, 6), Xt = randn(3, 2, 7);
    const KernelSnapshot s = empirical_ntk(net, X, &Xt);
    const Matrix J = jacobian(net, X).J, Jt = jacobian(net, Xt).J;
    EXPECT_LT((s.gram - J * J.transpose()).norm() / s.gram.norm(), 1e-12);
    EXPECT_LT((s.test_rows - Jt * J.transpose()).norm() / s.test_rows.norm(), 1e-12);
}

TEST(EmpiricalNtk, ReluFiniteDifferenceGram) {
    const LayerStack net = init({3, 10, 1}, 1.0, Activation::ReLU, 8);
    const Matrix X = randn(3, 4, 9);
    const Vector theta = flatten(net.W);
    Matrix J(4, theta.size());
    for (Index k = 0; k < theta.size(); ++k) {
        LayerStack a = net, b = net;
        Vector tp = theta, tm = theta;
        tp(k) += 1e-6;
        tm(k) -= 1e-6;
        a.W = unflatten(tp, net);
        b.W = unflatten(tm, net);
        J.col(k) = (forward(a, X) - forward(b, X)).row(0).transpose() / 2e-6;
    }
    const Matrix K = empirical_ntk(net, X).gram;
    EXPECT_LT((K - J * J.transpose()).norm() / K.norm(), 1e-5);
}

TEST(EmpiricalNtk, PsdAcrossArchitectures) {
    for (Activation act : {Activation::Linear, Activation::ReLU, Activation::Tanh}) {
        const LayerStack net = init({4, 9, 7, 3}, 0.8, act, 10);
        const Matrix K = empirical_ntk(net, randn(4, 12, 11)).gram;
        EXPECT_GT(sym_eig(K).values.minCoeff(), -1e-8 * K.trace() / K.rows()) << to_string(act);
    }
}

TEST(Alignment, RankOneAligned) {
    const Vector y = randn(10, 1, 1).col(0);
    EXPECT_NEAR(alignment(y * y.transpose(), y), 1.0, 1e-12);
}

TEST(Alignment, IdentityKernel) {
    const Vector y = randn(100, 1, 2).col(0).normalized();
    EXPECT_NEAR(alignment(Matrix::Identity(100, 100), y), 0.1, 1e-12);
}

TEST(Alignment, OrthogonalRankOne) {
    Vector y = Vector::Zero(4), v = Vector::Zero(4);
    y(0) = 1.0;
    v(2) = 3.0;
    EXPECT_NEAR(alignment(v * v.transpose(), y), 0.0, 1e-15);
}

TEST(Alignment, BoundedForPsd) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double a = alignment(random_psd(8, seed), randn(8, 1, seed + 100).col(0));
        EXPECT_GE(a, 0.0);
        EXPECT_LE(a, 1.0 + 1e-12);
    }
}

TEST(Alignment, OneOnlyForRankOneAlongTargets) {
    const Vector y = randn(6, 1, 3).col(0), z = randn(6, 1, 4).col(0);
    EXPECT_NEAR(alignment(2.5 * y * y.transpose(), y), 1.0, 1e-12);
    EXPECT_LT(alignment(z * z.transpose(), y), 1.0 - 1e-3);
    EXPECT_LT(alignment(y * y.transpose() + 0.1 * z * z.transpose(), y), 1.0 - 1e-6);
}

TEST(Alignment, ZeroKernelUndefined) {
    EXPECT_THROW(alignment(Matrix::Zero(3, 3), Vector::Ones(3)), InvalidInput);
}

TEST(KernelRegression, InterpolatesTrainingPoint) {
    const Matrix K = random_psd(6, 5) + 0.1 * Matrix::Identity(6, 6);
    const Vector y = randn(6, 1, 6).col(0);
    const auto res = kernel_regression(K, K.row(2), y);
    EXPECT_NEAR(res.predictions(0, 0), y(2), 1e-8);
    EXPECT_LT((kernel_regression(K, K, y).predictions - y).norm() / y.norm(), 1e-8);
}

TEST(KernelRegression, IdentityKernel) {
    const Matrix k = randn(3, 5, 7);
    const Vector y = randn(5, 1, 8).col(0);
    EXPECT_LT((kernel_regression(Matrix::Identity(5, 5), k, y).predictions - k * y).norm(), 1e-14);
}

TEST(KernelRegression, LinearKernelIsMinNorm) {
    const Matrix X = randn(12, 5, 9), Xt = randn(12, 4, 10);
    const Vector y = randn(5, 1, 11).col(0);
    const Vector beta = X * (X.transpose() * X).ldlt().solve(y);
    const auto res = kernel_regression(X.transpose() * X, Xt.transpose() * X, y);
    EXPECT_LT((res.predictions.col(0) - Xt.transpose() * beta).norm(), 1e-10);
}

TEST(KernelRegression, SingularGramGetsJitter) {
    const Vector v = randn(4, 1, 12).col(0);
    const Matrix K = v * v.transpose();
    const auto res = kernel_regression(K, K, v);
    EXPECT_GT(res.jitter, 0.0);
    EXPECT_TRUE(res.predictions.allFinite());
}

TEST(Transition, ConstantKernel) {
    const Matrix K = random_psd(5, 13);
    TransitionState st = TransitionState::start(Vector::Ones(5), 0);
    for (int i = 0; i < 7; ++i) evolve_transition(st, K, Matrix(), 0.3, 2.0);
    EXPECT_LT((st.Phi - expm_neg_sym(K, 2.0 * 2.1)).norm(), 1e-10);
}

TEST(Transition, ZeroKernelLeavesPhi) {
    TransitionState st = TransitionState::start(Vector::Ones(3), 0);
    evolve_transition(st, Matrix::Zero(3, 3), Matrix(), 5.0, 1.0);
    EXPECT_EQ(st.Phi, Matrix(Matrix::Identity(3, 3)));
}

TEST(Transition, CommutingStages) {
    const Matrix K1 = random_psd(5, 14), K2 = 2.0 * K1;
    TransitionState st = TransitionState::start(Vector::Ones(5), 0);
    evolve_transition(st, K1, Matrix(), 0.4, 1.0);
    evolve_transition(st, K2, Matrix(), 0.7, 1.0);
    EXPECT_LT((st.Phi - expm_neg_sym(Matrix(0.4 * K1 + 0.7 * K2), 1.0)).norm(), 1e-10);
}

TEST(Transition, OperatorNormNeverGrows) {
    TransitionState st = TransitionState::start(Vector::Ones(6), 0);
    for (std::uint64_t i = 0; i < 30; ++i) {
        evolve_transition(st, random_psd(6, 100 + i), Matrix(), 0.2, 1.0);
        EXPECT_LE(op_norm(st.Phi), 1.0 + 1e-8);
    }
}

TEST(IntegratingFactor, ConstantKernelIsKernelRegression) {
    const Matrix X = randn(3, 6, 15), Xt = randn(3, 4, 16);
    const Matrix K = X.transpose() * X + 0.5 * Matrix::Identity(6, 6);
    const Matrix k = Xt.transpose() * X;
    const Vector y = randn(6, 1, 17).col(0);
    std::vector<KernelSnapshot> snaps;
    for (double t : {0.0, 1.0, 10.0, 100.0, 1000.0}) snaps.push_back({t, K, k, 0});
    const Vector ref = kernel_regression(K, k, y).predictions.col(0);
    const Vector f0 = Vector::Zero(6), f0t = Vector::Zero(4);
    EXPECT_LT((integrating_factor_predict(snaps, y, f0, f0t, 1.0, false) - ref).norm(), 1e-6);
    EXPECT_LT((integrating_factor_predict({snaps.front()}, y, f0, f0t, 1.0, true) - ref).norm(), 1e-8);
}

TEST(IntegratingFactor, EmptyListRejected) {
    EXPECT_THROW(integrating_factor_predict({}, Vector::Ones(2), Vector::Zero(2), Vector::Zero(1), 1.0),
                 InvalidInput);
}

TEST(AnalyticNtk, TwoLayerFormula) {
    const LayerStack net = init({4, 6, 1}, 1.0, Activation::Linear, 18);
    const Matrix M = net.W[0].transpose() * net.W[0] + net.W[1].squaredNorm() * Matrix::Identity(4, 4);
    EXPECT_LT((analytic_linear_ntk(net).M() - M).norm(), 1e-12);
}

TEST(AnalyticNtk, BalancedRankOneUnitScale) {
    std::mt19937_64 rng(19);
    std::vector<Vector> r;
    for (Index d : {6, 5, 4, 3}) r.push_back(standard_normal(d, 1, rng).col(0).normalized());
    const LayerStack net = balanced_rank_one(1.0, r);
    const Matrix expect = 3.0 * r[0] * r[0].transpose() + Matrix::Identity(6, 6);
    EXPECT_LT((analytic_linear_ntk(net).M() - expect).norm(), 1e-12);
}

TEST(AnalyticNtk, AgreesWithEmpiricalOnRandomPairs) {
    const LayerStack net = init({5, 6, 4, 1}, 1.0, Activation::Linear, 20);
    const Matrix X1 = randn(5, 20, 21), X2 = randn(5, 20, 22);
    const Matrix M = analytic_linear_ntk(net).M();
    Matrix both(5, 40);
    both << X1, X2;
    const Matrix K = empirical_ntk(net, both).gram;
    for (Index i = 0; i < 20; ++i)
        EXPECT_NEAR(X1.col(i).dot(M * X2.col(i)), K(i, 20 + i), 1e-10 * std::max(1.0, std::abs(K(i, 20 + i))));
}

TEST(AnalyticNtk, MultiClassBlocksMatchEmpirical) {
    const LayerStack net = init({4, 5, 6, 3}, 1.0, Activation::Linear, 23);
    const Matrix X = randn(4, 7, 24);
    const Matrix K = analytic_linear_ntk(net).gram(X, X);
    EXPECT_LT((K - empirical_ntk(net, X).gram).norm() / K.norm(), 1e-12);
}

TEST(AnalyticNtk, RejectsNonlinear) {
    EXPECT_THROW(analytic_linear_ntk(init({2, 3, 1}, 1.0, Activation::Tanh, 1)), InvalidInput);
}

TEST(Commutator, CommutingSnapshotsGiveZero) {
    const Matrix K = random_psd(4, 25);
    std::vector<KernelSnapshot> s{{0.0, K, Matrix(), 0}, {1.0, 2 * K, Matrix(), 0}, {2.0, 3 * K, Matrix(), 0}};
    EXPECT_LT(commutator_diagnostic(s), 1e-14);
    s[2].gram = random_psd(4, 26);
    EXPECT_GT(commutator_diagnostic(s), 1e-3);
}

TEST(Snapshots, RoundTrip) {
    const auto dir = (std::filesystem::temp_directory_path() / "ntk_lab_snaps").string();
    std::filesystem::remove_all(dir);
    std::vector<KernelSnapshot> s{{0.0, random_psd(3, 27), randn(2, 3, 28), 0}, {0.5, random_psd(3, 29), randn(2, 3, 30), 0}};
    write_snapshots(dir, s);
    const auto back = read_snapshots(dir);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].time, 0.5);
    EXPECT_EQ(back[1].gram, s[1].gram);
    EXPECT_EQ(back[0].test_rows, s[0].test_rows);
}
