#include <gtest/gtest.h>

#include "ntk_lab/trainer.hpp"

using namespace ntk_lab;

namespace {

LayerStack scalar_chain(double a, double b) {
    LayerStack net;
    net.W = {Matrix::Constant(1, 1, a), Matrix::Constant(1, 1, b)};
    return net;
}

// Balanced scalar chain f = a b with a = b = u on x = y = 1 follows a logistic law for u^2.
double logistic_u2(double t, double u0sq) { return 1.0 / (1.0 - (1.0 - 1.0 / u0sq) * std::exp(-2.0 * t)); }

FlowConfig fixed_step(double dt, double T, Integrator in) {
    FlowConfig c;
    c.dt = dt;
    c.max_time = T;
    c.adaptive = false;
    c.integrator = in;
    c.snapshot_times = {T};
    return c;
}

double scalar_error(double dt, Integrator in) {
    const Matrix one = Matrix::Ones(1, 1);
    const auto log = train(scalar_chain(0.3, 0.3), one, one, fixed_step(dt, 2.0, in));
    return std::abs(log.u2.back() - logistic_u2(2.0, 0.09));
}

}  // namespace

TEST(Schedule, LogSpacing) {
    const auto t = log_schedule(0.01, 1.0, 2);
    ASSERT_EQ(t.size(), 6u);
    EXPECT_EQ(t[0], 0.0);
    EXPECT_NEAR(t[2], 0.1 / std::sqrt(10.0) * 1.0, 1e-15);
    EXPECT_EQ(t.back(), 1.0);
}

TEST(Schedule, AlwaysEndsAtMaxTime) {
    FlowConfig c;
    c.max_time = 7.0;
    c.snapshot_times = {1.0, 3.0, 12.0};
    const auto t = c.schedule();
    EXPECT_EQ(t, (std::vector<double>{0.0, 1.0, 3.0, 7.0}));
}

TEST(Train, ScalarChainMatchesLogistic) {
    const Matrix one = Matrix::Ones(1, 1);
    FlowConfig c;
    c.max_time = 5.0;
    c.snapshot_t_min = 0.1;
    c.per_decade = 5;
    const auto log = train(scalar_chain(0.2, 0.2), one, one, c);
    for (std::size_t i = 0; i < log.times.size(); ++i)
        EXPECT_NEAR(log.u2[i], logistic_u2(log.times[i], 0.04), 1e-6) << log.times[i];
    EXPECT_EQ(log.loss_increases, 0);
}

TEST(Train, FixedPointStays) {
    const Matrix one = Matrix::Ones(1, 1);
    const auto log = train(scalar_chain(1.0, 1.0), one, one, fixed_step(0.1, 3.0, Integrator::RK4));
    EXPECT_EQ(log.final_net.W[0](0, 0), 1.0);
    EXPECT_EQ(log.loss.back(), 0.0);
}

TEST(Train, RungeKuttaIsFourthOrder) {
    const double e1 = scalar_error(0.1, Integrator::RK4), e2 = scalar_error(0.05, Integrator::RK4);
    EXPECT_NEAR(std::log2(e1 / e2), 4.0, 0.5);
}

TEST(Train, EulerIsFirstOrder) {
    const double e1 = scalar_error(0.02, Integrator::Euler), e2 = scalar_error(0.01, Integrator::Euler);
    EXPECT_NEAR(std::log2(e1 / e2), 1.0, 0.15);
}

TEST(Train, ConservationHeldByRungeKutta) {
    std::mt19937_64 rng(3);
    const Matrix X = standard_normal(6, 10, rng), Y = standard_normal(1, 10, rng);
    FlowConfig c;
    c.max_time = 20.0;
    c.per_decade = 5;
    const auto rk = train(init({6, 8, 1}, 0.5, Activation::Linear, 4), X, Y, c);
    EXPECT_LT(rk.max_conservation, 1e-6);
    c.integrator = Integrator::Euler;
    const auto eu = train(init({6, 8, 1}, 0.5, Activation::Linear, 4), X, Y, c);
    EXPECT_GT(eu.max_conservation, rk.max_conservation);
}

TEST(Train, SmallInitEndsBalancedRankOne) {
    const DataMatrix d = whiten_unit(generate_gaussian(5, 40, CorrelationMatrix(Matrix::Identity(5, 5)), 7));
    const TeacherSpec teacher = random_teacher(5, Vector::Constant(1, 1.0), 8);
    const TargetMatrix y = make_targets(d, teacher);
    FlowConfig c;
    c.max_time = 40.0;
    c.per_decade = 5;
    const auto log = train(init({5, 5, 1}, 1e-3, Activation::Linear, 9), d.X, y.Y, c);
    ASSERT_FALSE(log.aborted) << log.abort_reason;
    EXPECT_LT(log.loss.back(), 1e-6 * log.loss.front());
    EXPECT_LT(balance_decompose(log.final_net).max_residual(), 1e-2);
}

TEST(Train, DivergenceAborts) {
    const Matrix one = Matrix::Ones(1, 1);
    FlowConfig c = fixed_step(1.5, 50.0, Integrator::Euler);
    c.snapshot_times = {1, 2, 3, 4, 5, 10, 20, 50};
    const auto log = train(scalar_chain(3.0, 3.0), one, one, c);
    EXPECT_TRUE(log.aborted);
}

TEST(Train, ShapeMismatch) {
    EXPECT_THROW(train(scalar_chain(1, 1), Matrix::Ones(2, 1), Matrix::Ones(1, 1), FlowConfig{}), InvalidInput);
}

TEST(PhaseMarkers, InterpolatedHalfLoss) {
    const auto m = phase_markers({0.0, 1.0, 2.0}, {1.0, 0.6, 0.4}, {});
    ASSERT_TRUE(m.t_half_loss);
    EXPECT_NEAR(*m.t_half_loss, 1.5, 1e-12);
}

TEST(PhaseMarkers, NeverReached) {
    const auto m = phase_markers({0.0, 1.0}, {1.0, 0.9}, {0.1, 0.2});
    EXPECT_FALSE(m.t_half_loss);
    ASSERT_TRUE(m.t_align_half);
    EXPECT_EQ(*m.t_align_half, 0.0);
    EXPECT_EQ(m.final_alignment, 0.2);
}

TEST(Laziness, ScalesAsInversePowerOfDepth) {
    const DataMatrix d = whiten_unit(generate_gaussian(6, 30, CorrelationMatrix(Matrix::Identity(6, 6)), 11));
    const TargetMatrix y = make_targets(d, random_teacher(6, Vector::Constant(1, 1.0), 12));
    std::mt19937_64 rng(13);
    const Matrix probe = standard_normal(6, 1, rng);
    for (int L : {2, 3}) {
        std::vector<Index> widths(L + 1, 8);
        widths.front() = 6;
        widths.back() = 1;
        const LayerStack base = init(widths, 1.0, Activation::Linear, 14);
        std::vector<double> ls, lr;
        for (double s : {1e-1, 1e-2, 1e-3}) {
            ls.push_back(std::log(s));
            lr.push_back(std::log(laziness_ratio(scaled(base, s), d.X, y.Y, probe)));
        }
        const auto fit = linear_fit(ls, lr);
        EXPECT_NEAR(fit.slope, -L, 0.1) << "depth " << L;
    }
}

TEST(Sidecar, RecordsMarkers) {
    const Matrix one = Matrix::Ones(1, 1);
    const FlowConfig c = fixed_step(0.1, 3.0, Integrator::RK4);
    const auto log = train(scalar_chain(0.5, 0.5), one, one, c);
    const auto j = trajectory_sidecar(log, c);
    EXPECT_EQ(j["integrator"], "rk4");
    EXPECT_TRUE(j["markers"]["t_half_loss_reached"].get<bool>());
    EXPECT_EQ(trajectory_table(log).rows.size(), log.times.size());
}
