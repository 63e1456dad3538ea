#ifndef NTK_LAB_THEORY_HPP
#define NTK_LAB_THEORY_HPP

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/numeric/odeint.hpp>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/dataset.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/kernel.hpp"
#include "ntk_lab/linalg.hpp"

namespace ntk_lab::theory {

// ---------------------------------------------------------------- two-layer phases

struct TwoLayerParams {
    double s = 1.0;
    double q0 = 0.0;
    double r0 = 0.0;
    double u0sq = 0.0;
    double eta = 1.0;
};

struct QR {
    double q;
    double r;
};

/// Closed-form q(t), r(t) with m = e^{-2 s eta t} so that large s t never overflows.
inline QR two_layer_qr(double t, const TwoLayerParams& p) {
    if (!(p.q0 > 0.0)) throw InvalidInput("two_layer_qr: q0 must be positive");
    if (!(p.s > 0.0)) throw InvalidInput("two_layer_qr: s must be positive");
    const double m = std::exp(-2.0 * p.s * p.eta * t);
    const double den = 1.0 - m + (2.0 * p.s / p.q0) * m;
    return {p.s * (1.0 + m * m) / den, p.s * (1.0 - m * m) / den};
}

inline double expected_q0(double sigma, double N, double D) {
    if (N < 1 || D < 1) throw InvalidInput("expected_q0: widths must be at least 1");
    return 0.5 * sigma * sigma * (1.0 + N / D);
}

/// Logistic u^2(t) of the balanced two-layer net, rate 2s.
inline double two_layer_u2(double t, double s, double u0sq) {
    if (!(u0sq > 0.0)) throw InvalidInput("two_layer_u2: u0sq must be positive");
    const double m = std::exp(-2.0 * s * t);
    return s / (1.0 - m + (s / u0sq) * m);
}

/// Exact time at which u^2 = s / 2.
inline double two_layer_half_time(double s, double u0sq) {
    if (!(u0sq < 0.5 * s)) return 0.0;
    return std::log(s / u0sq - 1.0) / (2.0 * s);
}

// ---------------------------------------------------------------- deep linear dynamics

/// Prefactor of the balanced c-dynamics. The displayed form reads dc/dt = c^{2-2/L}(s - c);
/// differentiating c = u^L with du/dt = u^{L-1}(s - u^L) gives an extra factor L.
enum class DeepForm { AsPrinted, ChainRule };

inline std::string to_string(DeepForm f) { return f == DeepForm::AsPrinted ? "as_printed" : "chain_rule"; }

inline double deep_rate(int L, DeepForm f) { return f == DeepForm::ChainRule ? static_cast<double>(L) : 1.0; }

struct DeepParams {
    int L = 3;
    double s = 1.0;
    double c0 = 1e-6;
    double sigma = 0.0;
};

inline void check(const DeepParams& p) {
    if (p.L < 2) throw InvalidInput("deep theory: depth must be at least 2");
    if (!(p.c0 > 0.0)) throw InvalidInput("deep theory: c0 must be positive");
    if (!(p.s > 0.0)) throw InvalidInput("deep theory: s must be positive");
}

/// Time at which the small-c closed form blows up.
inline double deep_blowup_time(const DeepParams& p, DeepForm f) {
    check(p);
    if (p.L == 2) return std::numeric_limits<double>::infinity();
    const double e = (p.L - 2.0) / p.L;
    return std::pow(p.c0, -e) / (deep_rate(p.L, f) * e * p.s);
}

/// Small-initialization closed form (L > 2). Returns NaN past the blow-up time.
inline double deep_c_closed(double t, const DeepParams& p, DeepForm f) {
    check(p);
    if (p.L == 2) throw InvalidInput("deep_c_closed: the power law needs L > 2");
    const double e = (p.L - 2.0) / p.L;
    const double base = std::pow(p.c0, -e) - deep_rate(p.L, f) * e * p.s * t;
    if (!(base > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return std::pow(base, -1.0 / e);
}

/// ODE solution at the requested (ascending) times, integrated in log c with dopri5.
inline std::vector<double> deep_c_ode(const std::vector<double>& times, const DeepParams& p, DeepForm f) {
    check(p);
    namespace odeint = boost::numeric::odeint;
    using State = std::vector<double>;
    const double k = deep_rate(p.L, f), expo = 1.0 - 2.0 / p.L;
    auto rhs = [&](const State& y, State& dy, double) {
        const double c = std::exp(y[0]);
        dy[0] = k * std::pow(c, expo) * (p.s - c);
    };
    std::vector<double> out;
    out.reserve(times.size());
    State y{std::log(p.c0)};
    double t = 0.0;
    auto stepper = odeint::make_controlled(1e-12, 1e-12, odeint::runge_kutta_dopri5<State>());
    for (double target : times) {
        if (target < t) throw InvalidInput("deep_c_ode: times must be ascending");
        if (target > t) {
            const double dt0 = std::min(target - t, 1e-3 / (k * std::max(p.s, 1e-300)));
            odeint::integrate_adaptive(stepper, rhs, y, t, target, dt0);
            t = target;
        }
        out.push_back(std::exp(y[0]));
    }
    return out;
}

inline double deep_c(double t, const DeepParams& p, DeepForm f) {
    if (p.L == 2 && f == DeepForm::ChainRule) return two_layer_u2(t, p.s, p.c0);
    return deep_c_ode({t}, p, f).front();
}

/// Time at which the ODE solution reaches s / 2, by quadrature of dt = c^{2/L-1} d(ln c) / (k (s - c)).
inline double deep_half_time(const DeepParams& p, DeepForm f) {
    check(p);
    if (p.c0 >= 0.5 * p.s) return 0.0;
    const double k = deep_rate(p.L, f), e = 2.0 / p.L - 1.0;
    auto dt = [&](double x) {
        const double c = std::exp(x);
        return std::pow(c, e) / (k * (p.s - c));
    };
    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(dt, std::log(p.c0), std::log(0.5 * p.s), 15,
                                                                         1e-13);
}

/// Scaling-law half time: L / ((L-2) s) sigma^{2-L} as printed, 1 / ((L-2) s) sigma^{2-L} with the
/// chain-rule factor, and (1/s) log(s / sigma^2) for L = 2.
inline double t_half_theory(int L, double s, double sigma, DeepForm f = DeepForm::AsPrinted) {
    if (L < 2 || !(s > 0.0) || !(sigma > 0.0)) throw InvalidInput("t_half_theory: bad arguments");
    if (L == 2) return std::log(s / (sigma * sigma)) / s;
    const double base = std::pow(sigma, 2.0 - L) / ((L - 2.0) * s);
    return f == DeepForm::AsPrinted ? L * base : base;
}

// ---------------------------------------------------------------- final kernels

/// Which prefactor multiplies [(L-1) beta beta^T + I].
enum class FinalPrefactor { Balanced, Literal };

inline double final_prefactor(int L, double s, FinalPrefactor v) {
    return v == FinalPrefactor::Balanced ? std::pow(s, 2.0 * (L - 1) / L) : std::pow(s, 2.0 * L - 2.0);
}

inline Matrix final_ntk(int L, double s, const Vector& beta, FinalPrefactor v = FinalPrefactor::Balanced) {
    if (L < 1) throw InvalidInput("final_ntk: depth must be positive");
    if (std::abs(beta.norm() - 1.0) > 1e-10) throw InvalidInput("final_ntk: beta must be a unit vector");
    const Index D = beta.size();
    return final_prefactor(L, s, v) * ((L - 1.0) * beta * beta.transpose() + Matrix::Identity(D, D));
}

/// Balanced converged kernel for a C x D teacher T = Z S V^T: A_l = Z S^{2(L-l)/L} Z^T (I_C at l = L),
/// B_l = V S^{2(l-1)/L} V^T (I_D at l = 1).
inline AnalyticLinearKernel final_ntk_multiclass(int L, const Matrix& teacher) {
    if (L < 1) throw InvalidInput("final_ntk_multiclass: depth must be positive");
    const ThinSvd svd = thin_svd(teacher);
    const Index C = teacher.rows(), D = teacher.cols();
    AnalyticLinearKernel k;
    for (int l = 1; l <= L; ++l) {
        if (l == L) {
            k.A.push_back(Matrix::Identity(C, C));
        } else {
            const Vector sa = svd.S.array().pow(2.0 * (L - l) / L).matrix();
            k.A.push_back(svd.U * sa.asDiagonal() * svd.U.transpose());
        }
        if (l == 1) {
            k.B.push_back(Matrix::Identity(D, D));
        } else {
            const Vector sb = svd.S.array().pow(2.0 * (l - 1) / L).matrix();
            k.B.push_back(svd.V * sb.asDiagonal() * svd.V.transpose());
        }
    }
    return k;
}

/// Alignment of the final Gram on data whose nonzero singular values are all equal.
/// With v = X^T beta the Gram is c[(L-1) v v^T + X^T X]; its spectrum is (L-1)|v|^2 + w on v and
/// w (= common squared singular value) on the remaining rank - 1 directions.
inline double max_alignment(int L, const DataMatrix& X, const Vector& beta) {
    const ThinSvd svd = thin_svd(X.X);
    const Index r = svd.rank(1e-10);
    if (r == 0) throw InvalidInput("max_alignment: zero data");
    const double w = svd.S(0) * svd.S(0);
    if (std::abs(svd.S(r - 1) * svd.S(r - 1) - w) > 1e-8 * w)
        throw InvalidInput("max_alignment: data is not whitened");
    const double a = (X.X.transpose() * beta).squaredNorm();
    if (a == 0.0) throw InvalidInput("max_alignment: targets vanish on the data");
    const double top = (L - 1.0) * a + w;
    return top / std::sqrt(top * top + (r - 1.0) * w * w);
}

/// Layer-l NNGP Gram X^T [T^T T]^{l/L} X of a converged balanced net with teacher T.
inline Matrix nngp_layer(int ell, int L, const Matrix& teacher, const Matrix& X) {
    if (L < 1 || ell < 0 || ell > L) throw InvalidInput("nngp_layer: need 0 <= l <= L");
    if (teacher.cols() != X.rows()) throw InvalidInput("nngp_layer: teacher dimension mismatch");
    if (ell == 0) return X.transpose() * X;
    const ThinSvd svd = thin_svd(teacher);
    const Vector p = svd.S.array().pow(2.0 * ell / L).matrix();
    const Matrix F = svd.V.transpose() * X;
    return F.transpose() * p.asDiagonal() * F;
}

// ---------------------------------------------------------------- multi-class schedule

struct ModeSchedule {
    std::vector<double> singular_values;
    double u0sq = 0.0;
    std::vector<double> times;        // (1/s) log(s / u0^2)
    std::vector<double> half_times;   // exact logistic half point ln(s/u0^2 - 1) / (2s)
    double separation_ratio = 0.0;    // log(s_max / u0^2) / s_max  divided by  1 / s_min
    bool separated(double threshold = 10.0) const { return separation_ratio >= threshold; }
};

inline ModeSchedule mode_schedule(const std::vector<double>& s, double u0sq) {
    if (s.empty() || !(u0sq > 0.0)) throw InvalidInput("mode_schedule: need modes and positive u0^2");
    ModeSchedule m;
    m.singular_values = s;
    m.u0sq = u0sq;
    double smin = std::numeric_limits<double>::infinity(), smax = 0.0;
    for (double sa : s) {
        if (!(sa > 0.0)) throw InvalidInput("mode_schedule: singular values must be positive");
        m.times.push_back(std::log(sa / u0sq) / sa);
        m.half_times.push_back(two_layer_half_time(sa, u0sq));
        smin = std::min(smin, sa);
        smax = std::max(smax, sa);
    }
    m.separation_ratio = (std::log(smax / u0sq) / smax) * smin;
    return m;
}

// ---------------------------------------------------------------- refined balance

struct RefinedBalance {
    std::vector<double> g_layer;  // g_1 .. g_L
    double g = 0.0;
    std::vector<double> u_sq;     // corrected u_alpha^2 per mode
};

/// widths = [N_1 = D, N_2, ..., N_{L+1} = C]; g_l = L - l - sum_{k=l}^{L-1} N_{k+1} / N_k.
inline RefinedBalance refined_balance(const std::vector<Index>& widths, double sigma, const std::vector<double>& s) {
    if (widths.size() < 2) throw InvalidInput("refined_balance: need at least two widths");
    for (Index w : widths)
        if (w <= 0) throw InvalidInput("refined_balance: widths must be positive");
    const int L = static_cast<int>(widths.size()) - 1;
    auto N = [&](int k) { return static_cast<double>(widths[k - 1]); };
    RefinedBalance rb;
    for (int l = 1; l <= L; ++l) {
        double g = L - l;
        for (int k = l; k <= L - 1; ++k) g -= N(k + 1) / N(k);
        rb.g_layer.push_back(g);
        rb.g += g;
    }
    for (double sa : s) rb.u_sq.push_back(sa * sa - rb.g * sigma * sigma / (2.0 * L * std::pow(sa, 1.0 / L)));
    return rb;
}

// ---------------------------------------------------------------- unwhitened phase I

struct UnwhitenedModes {
    double a = 0.0;
    double b = 0.0;
    Matrix system;           // 5 x 5 matrix of the closed early-time system (without the factor s)
    Vector eigenvalues;      // {0, -sqrt b, sqrt b, -2 sqrt b, 2 sqrt b}, ascending
    Vector spike_direction;  // Sigma beta / |Sigma beta|
    Matrix M;                // Sigma beta beta^T Sigma / sqrt(b) + I
};

inline UnwhitenedModes unwhitened_modes(const CorrelationMatrix& Sigma, const Vector& beta) {
    if (Sigma.dim() != beta.size()) throw InvalidInput("unwhitened_modes: dimension mismatch");
    if (std::abs(beta.norm() - 1.0) > 1e-10) throw InvalidInput("unwhitened_modes: beta must be a unit vector");
    UnwhitenedModes u;
    const Vector sb = Sigma.Sigma * beta;
    u.a = beta.dot(sb);
    u.b = sb.squaredNorm();
    if (!(u.b > 0.0)) throw InvalidInput("unwhitened_modes: Sigma beta vanishes");
    const double a = u.a, b = u.b, rb = std::sqrt(b);
    u.system.resize(5, 5);
    u.system << 0, a, 1, 0, 0,
                0, 0, 0, 2, 0,
                b, 0, 0, a, 0,
                0, b, 0, 0, 1,
                0, 0, 0, 2 * b, 0;
    u.eigenvalues.resize(5);
    u.eigenvalues << -2 * rb, -rb, 0, rb, 2 * rb;
    u.spike_direction = sb / rb;
    u.M = sb * sb.transpose() / rb + Matrix::Identity(beta.size(), beta.size());
    return u;
}

// ---------------------------------------------------------------- min-norm interpolation

struct MinNormResult {
    Matrix beta;  // C x D
    double jitter = 0.0;
    Index rank = 0;
};

/// Y (X^T X)^{-1} X^T, i.e. the min-norm interpolating weights X (X^T X)^{-1} y per output row.
inline MinNormResult min_norm_solution(const DataMatrix& X, const Matrix& Y) {
    if (Y.cols() != X.count()) throw InvalidInput("min_norm_solution: sample counts differ");
    MinNormResult res;
    const Matrix G = X.X.transpose() * X.X;
    res.rank = thin_svd(X.X).rank(1e-12);
    Eigen::LDLT<Matrix> ldlt(G);
    if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-14)) {
        res.jitter = 1e-10 * G.trace() / static_cast<double>(G.rows());
        ldlt.compute(G + res.jitter * Matrix::Identity(G.rows(), G.cols()));
    }
    res.beta = (X.X * ldlt.solve(Y.transpose())).transpose();
    return res;
}

// ---------------------------------------------------------------- scale-only model kernel

/// Kernel model: eps * K0(t) on [0, tau], K0 moving linearly from `K_start` to `K_inf`; afterwards
/// g(t) K_inf with g(t) = 1 - (1 - eps) exp(-(t - tau) / growth_time), continuous at tau.
struct ModelKernelSpec {
    double epsilon = 1e-3;
    double tau = 10.0;
    double growth_time = 1.0;
    Matrix K_start, K_inf;        // P x P
    Matrix k_start, k_inf;        // Q x P test rows
    int phase_one_steps = 400;

    double g(double t) const { return t <= tau ? epsilon : 1.0 - (1.0 - epsilon) * std::exp(-(t - tau) / growth_time); }
    /// h(t) = integral of g from tau to t.
    double h(double t) const {
        const double x = (t - tau) / growth_time;
        return (t - tau) + (1.0 - epsilon) * growth_time * std::expm1(-x);
    }

    void validate() const {
        if (!(epsilon >= 0.0) || !(tau > 0.0) || !(growth_time > 0.0)) throw InvalidInput("model kernel: bad scales");
        if (K_start.rows() != K_inf.rows() || k_start.cols() != K_inf.cols() || k_inf.cols() != K_inf.cols())
            throw InvalidInput("model kernel: shape mismatch");
        if (sym_eig(K_inf).values.minCoeff() < -1e-10 * K_inf.trace()) throw InvalidInput("model kernel: K_inf not PSD");
    }
};

struct ModelKernelResult {
    Vector predictions;
    Vector reference;        // k_inf K_inf^{-1} (y - f0) + f0
    double gap = 0.0;        // max abs difference
    double phi_deviation = 0.0;  // |Phi(tau) - I|_op
    double bound = 0.0;      // eps tau k0
};

inline ModelKernelResult model_kernel_run(const ModelKernelSpec& spec, const Vector& y, const Vector& f0_train,
                                          const Vector& f0_test) {
    spec.validate();
    const Index P = spec.K_inf.rows();
    TransitionState st = TransitionState::start(y - f0_train, spec.k_inf.rows());
    const int n = std::max(1, spec.phase_one_steps);
    const double dt = spec.tau / n;
    double k0 = std::max(op_norm(spec.K_start), op_norm(spec.K_inf));
    for (int i = 0; i < n; ++i) {
        const double w = (i + 0.5) / n;
        const Matrix K = (1.0 - w) * spec.K_start + w * spec.K_inf;
        const Matrix k = (1.0 - w) * spec.k_start + w * spec.k_inf;
        if (spec.epsilon > 0.0) evolve_transition(st, spec.epsilon * K, spec.epsilon * k, dt, 1.0);
        k0 = std::max(k0, op_norm(K));
    }
    ModelKernelResult res;
    res.phi_deviation = op_norm(st.Phi - Matrix::Identity(P, P));
    res.bound = spec.epsilon * spec.tau * k0;
    // after tau the kernel only rescales: evolve in h = int g dt, exact per interval
    const double lmin = std::max(sym_eig(spec.K_inf).values.minCoeff(), 1e-300);
    const double h_end = 40.0 / lmin;
    double h_prev = 0.0;
    for (int i = 1; i <= 64; ++i) {
        const double h_next = h_end * std::pow(static_cast<double>(i) / 64, 2.0);
        evolve_transition(st, spec.K_inf, spec.k_inf, h_next - h_prev, 1.0);
        h_prev = h_next;
    }
    res.predictions = f0_test + st.accumulated_pred + frozen_tail(st, spec.K_inf, spec.k_inf);
    const Vector r = y - f0_train;
    res.reference = f0_test + spec.k_inf * Eigen::LDLT<Matrix>(spec.K_inf).solve(r);
    res.gap = (res.predictions - res.reference).cwiseAbs().maxCoeff();
    return res;
}

// ---------------------------------------------------------------- curve output

inline void add_curve(csv::Table& t, const std::vector<double>& times, const std::vector<double>& values,
                      double variant) {
    if (t.columns.empty()) t.columns = {"t", "value", "variant"};
    for (std::size_t i = 0; i < times.size(); ++i) t.add({times[i], values[i], variant});
}

}  // namespace ntk_lab::theory

#endif
