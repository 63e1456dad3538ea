#ifndef NTK_LAB_TRAINER_HPP
#define NTK_LAB_TRAINER_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/kernel.hpp"
#include "ntk_lab/linalg.hpp"
#include "ntk_lab/network.hpp"

namespace ntk_lab {

enum class Integrator { Euler, RK4 };

inline std::string to_string(Integrator i) { return i == Integrator::Euler ? "euler" : "rk4"; }

inline Integrator parse_integrator(const std::string& s) {
    if (s == "euler") return Integrator::Euler;
    if (s == "rk4") return Integrator::RK4;
    throw InvalidInput("unknown integrator '" + s + "'");
}

/// Log-spaced times from t_min to t_max with `per_decade` points per decade, t = 0 prepended.
inline std::vector<double> log_schedule(double t_min, double t_max, int per_decade) {
    if (!(t_min > 0.0) || !(t_max >= t_min) || per_decade < 1) throw InvalidInput("log_schedule: bad range");
    std::vector<double> t{0.0};
    const double decades = std::log10(t_max / t_min);
    const auto n = static_cast<long>(std::ceil(decades * per_decade - 1e-9));
    for (long i = 0; i <= n; ++i) t.push_back(std::min(t_max, t_min * std::pow(10.0, static_cast<double>(i) / per_decade)));
    t.erase(std::unique(t.begin(), t.end()), t.end());
    return t;
}

struct FlowConfig {
    double eta = 1.0;
    double dt = 1.0;            // largest step ever taken
    double max_time = 100.0;
    Integrator integrator = Integrator::RK4;
    bool adaptive = true;       // shrink dt by the stability and relative-change bounds
    double safety = 0.05;       // dt <= safety / lambda_max and dt <= safety |theta| / |theta_dot|
    int refresh_every = 10;     // steps between lambda_max estimates
    std::vector<double> snapshot_times;  // empty: log schedule from snapshot_t_min
    double snapshot_t_min = 1e-2;
    int per_decade = 50;
    double stop_loss = 0.0;
    bool keep_snapshots = false;
    bool track_conservation = true;
    long max_steps = 20'000'000;

    void validate() const {
        if (!(dt > 0.0)) throw InvalidInput("flow: dt must be positive");
        if (!(max_time >= dt) && !adaptive) throw InvalidInput("flow: max_time must be at least dt");
        if (!(max_time > 0.0)) throw InvalidInput("flow: max_time must be positive");
        if (!(eta > 0.0)) throw InvalidInput("flow: eta must be positive");
        if (!(safety > 0.0)) throw InvalidInput("flow: safety must be positive");
    }

    std::vector<double> schedule() const {
        std::vector<double> t = snapshot_times;
        if (t.empty()) t = log_schedule(std::min(snapshot_t_min, max_time), max_time, per_decade);
        if (t.front() != 0.0) t.insert(t.begin(), 0.0);
        std::sort(t.begin(), t.end());
        t.erase(std::unique(t.begin(), t.end()), t.end());
        while (!t.empty() && t.back() > max_time) t.pop_back();
        if (t.back() < max_time) t.push_back(max_time);
        return t;
    }
};

struct PhaseMarkers {
    std::optional<double> t_half_loss;
    std::optional<double> t_align_half;
    double final_alignment = 0.0;
};

struct TrajectoryLog {
    std::vector<double> times, loss, alignment, kernel_fro, conservation, u2;
    std::vector<KernelSnapshot> snapshots;
    LayerStack net0;
    LayerStack final_net;
    long steps = 0;
    long loss_increases = 0;
    double max_conservation = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

/// Balance-law drift max_l |Q_l(t) - Q_l(0)|_F / (|W_l|^2 + |W_{l+1}|^2), Q_l = W_l W_l^T - W_{l+1}^T W_{l+1}.
inline double conservation_residual(const LayerStack& net, const LayerStack& net0) {
    if (net.activation != Activation::Linear) throw InvalidInput("conservation_residual: network is not linear");
    if (net.depth() != net0.depth()) throw InvalidInput("conservation_residual: depth mismatch");
    double worst = 0.0;
    for (int l = 0; l + 1 < net.depth(); ++l) {
        const Matrix q = net.W[l] * net.W[l].transpose() - net.W[l + 1].transpose() * net.W[l + 1];
        const Matrix q0 = net0.W[l] * net0.W[l].transpose() - net0.W[l + 1].transpose() * net0.W[l + 1];
        const double scale = net.W[l].squaredNorm() + net.W[l + 1].squaredNorm();
        if (scale > 0.0) worst = std::max(worst, (q - q0).norm() / scale);
    }
    return worst;
}

namespace detail {

/// Linear interpolation of the first upward (or downward) crossing of `level`.
inline std::optional<double> first_crossing(const std::vector<double>& t, const std::vector<double>& v, double level,
                                            bool downward) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        const bool hit = downward ? v[i] <= level : v[i] >= level;
        if (!hit) continue;
        if (i == 0) return t[0];
        const double a = v[i - 1], b = v[i];
        const double w = b == a ? 1.0 : (level - a) / (b - a);
        return t[i - 1] + w * (t[i] - t[i - 1]);
    }
    return std::nullopt;
}

}  // namespace detail

inline PhaseMarkers phase_markers(const std::vector<double>& t, const std::vector<double>& loss,
                                  const std::vector<double>& align) {
    if (t.empty() || t.size() != loss.size()) throw InvalidInput("phase_markers: empty or ragged log");
    PhaseMarkers m;
    m.t_half_loss = detail::first_crossing(t, loss, 0.5 * loss.front(), true);
    if (!align.empty()) {
        m.final_alignment = align.back();
        m.t_align_half = detail::first_crossing(t, align, 0.5 * m.final_alignment, false);
    }
    return m;
}

inline PhaseMarkers phase_markers(const TrajectoryLog& log) { return phase_markers(log.times, log.loss, log.alignment); }

/// Largest eigenvalue of K / P on the training set (the function-space flow rate per unit eta).
inline double flow_lambda_max(const LayerStack& net, const Matrix& X) {
    const double P = static_cast<double>(X.cols());
    if (net.activation == Activation::Linear && net.output_dim() == 1) {
        const Matrix M = analytic_linear_ntk(net).M();
        const Matrix S = X * X.transpose() / P;
        // eig(M S) = eig(X^T M X / P); symmetrize through a Cholesky-free route
        Eigen::SelfAdjointEigenSolver<Matrix> es(S);
        const Vector root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        const Matrix Sh = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
        return sym_eig(Sh * M * Sh).values.maxCoeff();
    }
    return sym_eig(empirical_ntk(net, X).gram / P).values.maxCoeff();
}

/// Observer invoked at every recorded time with the current network and its training Gram.
using SnapshotObserver = std::function<void(double, const LayerStack&, const KernelSnapshot&)>;

inline TrajectoryLog train(const LayerStack& start, const Matrix& X, const Matrix& Y, const FlowConfig& cfg,
                           const Matrix* X_test = nullptr, const SnapshotObserver& observer = {}) {
    cfg.validate();
    start.check();
    if (X.rows() != start.input_dim() || Y.rows() != start.output_dim() || Y.cols() != X.cols())
        throw InvalidInput("train: data shapes do not match the network");
    const Vector yflat = TargetMatrix(Y).flat();
    const bool linear = start.activation == Activation::Linear;

    TrajectoryLog log;
    log.net0 = start;
    LayerStack net = start;
    const auto sched = cfg.schedule();

    double loss0 = 0.0;
    auto record = [&](double t) {
        const Matrix F = forward(net, X);
        const double L = mse_loss(F, Y);
        KernelSnapshot snap = empirical_ntk(net, X, X_test, t);
        log.times.push_back(t);
        log.loss.push_back(L);
        const double kf = snap.gram.norm();
        log.kernel_fro.push_back(kf);
        log.alignment.push_back(kf > 0.0 && yflat.squaredNorm() > 0.0 ? alignment(snap.gram, yflat) : 0.0);
        const double cons = linear && cfg.track_conservation ? conservation_residual(net, log.net0) : 0.0;
        log.conservation.push_back(cons);
        log.max_conservation = std::max(log.max_conservation, cons);
        log.u2.push_back(net.W.back().squaredNorm());
        if (observer) observer(t, net, snap);
        if (cfg.keep_snapshots) log.snapshots.push_back(std::move(snap));
        return L;
    };

    auto grad = [&](const std::vector<Matrix>& W) {
        LayerStack tmp = net;
        tmp.W = W;
        return loss_gradient(tmp, X, Y);
    };
    auto axpy = [](const std::vector<Matrix>& a, double h, const std::vector<Matrix>& b) {
        std::vector<Matrix> out(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + h * b[i];
        return out;
    };
    auto norm = [](const std::vector<Matrix>& a) {
        double s = 0.0;
        for (const auto& m : a) s += m.squaredNorm();
        return std::sqrt(s);
    };

    loss0 = record(0.0);
    double t = 0.0, lam = 0.0, last_loss = loss0;
    int since_refresh = cfg.refresh_every;
    for (std::size_t k = 1; k < sched.size(); ++k) {
        const double target = sched[k];
        while (t < target) {
            if (++log.steps > cfg.max_steps) {
                log.aborted = true;
                log.abort_reason = "step budget exhausted at t=" + csv::format_double(t);
                break;
            }
            const std::vector<Matrix> g1 = grad(net.W);
            double h = std::min(cfg.dt, target - t);
            if (cfg.adaptive) {
                if (since_refresh >= cfg.refresh_every) {
                    lam = flow_lambda_max(net, X);
                    since_refresh = 0;
                }
                ++since_refresh;
                if (lam > 0.0) h = std::min(h, cfg.safety / (cfg.eta * lam));
                const double gn = norm(g1), wn = norm(net.W);
                if (gn > 0.0 && wn > 0.0) h = std::min(h, cfg.safety * wn / (cfg.eta * gn));
                // land exactly on the snapshot rather than leaving a sliver
                if (target - t - h < 1e-3 * h) h = target - t;
            }
            if (cfg.integrator == Integrator::Euler) {
                net.W = axpy(net.W, -cfg.eta * h, g1);
            } else {
                const auto g2 = grad(axpy(net.W, -0.5 * cfg.eta * h, g1));
                const auto g3 = grad(axpy(net.W, -0.5 * cfg.eta * h, g2));
                const auto g4 = grad(axpy(net.W, -cfg.eta * h, g3));
                for (std::size_t i = 0; i < net.W.size(); ++i)
                    net.W[i] -= cfg.eta * h / 6.0 * (g1[i] + 2.0 * g2[i] + 2.0 * g3[i] + g4[i]);
            }
            t = (target - t <= h) ? target : t + h;
            bool finite = true;
            for (const auto& m : net.W) finite = finite && m.allFinite();
            if (!finite) {
                log.aborted = true;
                log.abort_reason = "non-finite weights at t=" + csv::format_double(t);
                break;
            }
        }
        if (log.aborted) break;
        const double L = record(target);
        if (L > last_loss * (1.0 + 1e-12) + 1e-300) ++log.loss_increases;
        last_loss = L;
        if (L > 1e6 * loss0 && loss0 > 0.0) {
            log.aborted = true;
            log.abort_reason = "loss diverged at t=" + csv::format_double(target);
            break;
        }
        if (cfg.stop_loss > 0.0 && L <= cfg.stop_loss) break;
    }
    log.final_net = net;
    return log;
}

/// |d/dt grad f(x)| / |grad f(x)| * L / |dL/dt| under gradient flow at the current parameters.
inline double laziness_ratio(const LayerStack& net, const Matrix& X, const Matrix& Y, const Matrix& probe) {
    if (probe.cols() != 1) throw InvalidInput("laziness_ratio: probe must be a single column");
    const auto gL = loss_gradient(net, X, Y);
    const double gl2 = flatten(gL).squaredNorm();
    const double L = mse_loss(forward(net, X), Y);
    const Vector gf = jacobian(net, probe).J.row(0).transpose();
    if (gl2 == 0.0 || gf.norm() == 0.0) throw NumericalError("laziness_ratio: degenerate zero gradient");
    std::vector<Matrix> v = gL;
    for (auto& m : v) m = -m;
    const Vector hv = flatten(output_hvp(net, probe, 0, v));
    return hv.norm() / gf.norm() * L / gl2;
}

inline csv::Table trajectory_table(const TrajectoryLog& log) {
    csv::Table t;
    t.columns = {"t", "loss", "alignment", "kernel_fro", "conservation", "u2"};
    for (std::size_t i = 0; i < log.times.size(); ++i)
        t.add({log.times[i], log.loss[i], log.alignment[i], log.kernel_fro[i], log.conservation[i], log.u2[i]});
    return t;
}

inline nlohmann::json markers_json(const PhaseMarkers& m) {
    nlohmann::json j;
    j["t_half_loss"] = m.t_half_loss ? nlohmann::json(*m.t_half_loss) : nlohmann::json(nullptr);
    j["t_align_half"] = m.t_align_half ? nlohmann::json(*m.t_align_half) : nlohmann::json(nullptr);
    j["t_half_loss_reached"] = m.t_half_loss.has_value();
    j["t_align_half_reached"] = m.t_align_half.has_value();
    j["final_alignment"] = m.final_alignment;
    return j;
}

inline nlohmann::json trajectory_sidecar(const TrajectoryLog& log, const FlowConfig& cfg) {
    nlohmann::json j;
    j["eta"] = cfg.eta;
    j["dt"] = cfg.dt;
    j["max_time"] = cfg.max_time;
    j["integrator"] = to_string(cfg.integrator);
    j["steps"] = log.steps;
    j["loss_increases"] = log.loss_increases;
    j["max_conservation"] = log.max_conservation;
    j["aborted"] = log.aborted;
    if (log.aborted) j["abort_reason"] = log.abort_reason;
    j["seed"] = log.net0.seed;
    j["sigma"] = log.net0.sigma;
    j["markers"] = markers_json(phase_markers(log));
    return j;
}

}  // namespace ntk_lab

#endif
