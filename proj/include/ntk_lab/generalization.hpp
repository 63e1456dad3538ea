#ifndef NTK_LAB_GENERALIZATION_HPP
#define NTK_LAB_GENERALIZATION_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/dataset.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/linalg.hpp"
#include "ntk_lab/parallel.hpp"

namespace ntk_lab {

/// Linear kernel x^T [A beta beta^T + I] x' learning the target (alpha beta + sqrt(1-alpha^2) w_perp) . x.
struct SpikedKernelTask {
    double A = 0.0;
    double alpha = 1.0;
    Index D = 2;
    double lambda = 1e-6;

    void validate() const {
        if (!(A >= 0.0)) throw InvalidInput("spiked task: A must be non-negative");
        if (!(alpha >= -1.0 && alpha <= 1.0)) throw InvalidInput("spiked task: alpha must lie in [-1, 1]");
        if (D < 2) throw InvalidInput("spiked task: D must be at least 2");
        if (!(lambda >= 0.0)) throw InvalidInput("spiked task: lambda must be non-negative");
    }
};

struct KappaSolution {
    double kappa = 0.0;
    double gamma = 0.0;
    bool converged = false;
    int iterations = 0;
};

namespace detail {

/// lambda + sum_k lambda_k kappa / (lambda_k P + kappa) - kappa; positive below the root, negative above.
inline double kappa_residual(double kappa, double P, const SpikedKernelTask& t) {
    const double l1 = 1.0 + t.A;
    const double nd = static_cast<double>(t.D - 1);
    return t.lambda + kappa * (l1 / (l1 * P + kappa) + nd / (P + kappa)) - kappa;
}

}  // namespace detail

inline KappaSolution solve_kappa(double P, const SpikedKernelTask& task) {
    task.validate();
    if (!(P >= 0.0)) throw InvalidInput("solve_kappa: P must be non-negative");
    KappaSolution sol;
    double lo = std::max(task.lambda, 1e-300);
    double hi = task.lambda + task.A + static_cast<double>(task.D);
    if (P == 0.0) {
        sol.kappa = hi;
        sol.converged = true;
    } else if (detail::kappa_residual(lo, P, task) <= 0.0) {
        // ridgeless with P >= D: the only root is the ridge itself
        sol.kappa = lo;
        sol.converged = true;
    } else {
        for (sol.iterations = 0; sol.iterations < 200; ++sol.iterations) {
            const double mid = lo > 0.0 && hi / lo > 4.0 ? std::sqrt(lo * hi) : 0.5 * (lo + hi);
            (detail::kappa_residual(mid, P, task) > 0.0 ? lo : hi) = mid;
            if (hi - lo <= 1e-15 * hi) {
                sol.converged = true;
                break;
            }
        }
        sol.kappa = 0.5 * (lo + hi);
        if (!sol.converged) throw NumericalError("solve_kappa: bisection did not converge");
    }
    const double l1 = 1.0 + task.A, k = sol.kappa;
    sol.gamma = P * (l1 * l1 / std::pow(l1 * P + k, 2) + static_cast<double>(task.D - 1) / std::pow(P + k, 2));
    return sol;
}

struct GenErrorTheory {
    double literal = 0.0;   // without the kappa^2 numerator
    double kappa2 = 0.0;    // kappa^2 weighted; equals 1 at P = 0
    KappaSolution kappa;
    bool valid = true;      // false when gamma >= 1
};

inline GenErrorTheory gen_error_theory(double P, const SpikedKernelTask& task) {
    GenErrorTheory g;
    g.kappa = solve_kappa(P, task);
    const double k = g.kappa.kappa, gm = g.kappa.gamma, l1 = 1.0 + task.A;
    if (!(gm < 1.0)) {
        g.valid = false;
        g.literal = g.kappa2 = std::numeric_limits<double>::quiet_NaN();
        return g;
    }
    const double a2 = task.alpha * task.alpha;
    const double bracket = a2 / std::pow(l1 * P + k, 2) + (1.0 - a2) / std::pow(P + k, 2);
    g.literal = bracket / (1.0 - gm);
    g.kappa2 = k * k * bracket / (1.0 - gm);
    return g;
}

struct McEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
    int trials = 0;
};

/// Deterministic per-cell seed from a base seed and a cell index (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Ridge kernel regression with the spiked kernel on P Gaussian samples. The test error of a
/// linear predictor beta_hat . x under x ~ N(0, I) is exactly |beta_hat - w|^2, so no test set is drawn.
inline McEstimate mc_gen_error(Index P, const SpikedKernelTask& task, int trials, std::uint64_t seed) {
    task.validate();
    if (trials < 1) throw InvalidInput("mc_gen_error: need at least one trial");
    const Index D = task.D;
    Vector w = Vector::Zero(D);
    w(0) = task.alpha;
    w(1) = std::sqrt(std::max(0.0, 1.0 - task.alpha * task.alpha));
    Vector m = Vector::Ones(D);
    m(0) += task.A;
    std::mt19937_64 rng(seed);
    double sum = 0.0, sum2 = 0.0;
    for (int tr = 0; tr < trials; ++tr) {
        double err = 1.0;
        if (P > 0) {
            const Matrix X = standard_normal(D, P, rng);
            const Vector y = X.transpose() * w;
            const Matrix MX = m.asDiagonal() * X;
            Matrix K = X.transpose() * MX;
            K.diagonal().array() += task.lambda;
            const Vector bhat = MX * K.ldlt().solve(y);
            err = (bhat - w).squaredNorm();
        }
        sum += err;
        sum2 += err * err;
    }
    McEstimate e;
    e.trials = trials;
    e.mean = sum / trials;
    const double var = trials > 1 ? std::max(0.0, (sum2 - trials * e.mean * e.mean) / (trials - 1)) : 0.0;
    e.stderr_ = std::sqrt(var / trials);
    return e;
}

struct TransferGrid {
    std::vector<double> A;
    std::vector<double> alpha;
    std::vector<double> P;
    Index D = 20;
    double lambda = 1e-6;
    int trials = 0;  // 0 skips the Monte-Carlo columns
    std::uint64_t seed = 0;
};

inline csv::Table transfer_sweep(const TransferGrid& grid, int jobs = 1) {
    if (grid.A.empty() || grid.alpha.empty() || grid.P.empty()) throw InvalidInput("transfer_sweep: empty grid");
    const std::size_t n = grid.A.size() * grid.alpha.size() * grid.P.size();
    std::vector<std::vector<double>> rows(n);
    parallel_for(n, jobs, [&](std::size_t cell) {
        const std::size_t ip = cell % grid.P.size();
        const std::size_t ia = (cell / grid.P.size()) % grid.alpha.size();
        const std::size_t iA = cell / (grid.P.size() * grid.alpha.size());
        SpikedKernelTask task{grid.A[iA], grid.alpha[ia], grid.D, grid.lambda};
        const double P = grid.P[ip];
        const GenErrorTheory th = gen_error_theory(P, task);
        double mc = std::numeric_limits<double>::quiet_NaN(), se = mc;
        if (grid.trials > 0) {
            const McEstimate e = mc_gen_error(static_cast<Index>(std::llround(P)), task, grid.trials,
                                              mix_seed(grid.seed, cell));
            mc = e.mean;
            se = e.stderr_;
        }
        rows[cell] = {task.A, task.alpha, P, task.lambda, th.literal, th.kappa2, mc, se, th.kappa.kappa, th.kappa.gamma};
    });
    csv::Table t;
    t.columns = {"A", "alpha", "P", "lambda", "Eg_theory_literal", "Eg_theory_kappa2",
                 "Eg_mc_mean", "Eg_mc_stderr", "kappa", "gamma"};
    t.rows = std::move(rows);
    return t;
}

}  // namespace ntk_lab

#endif
