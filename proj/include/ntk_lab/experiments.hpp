#ifndef NTK_LAB_EXPERIMENTS_HPP
#define NTK_LAB_EXPERIMENTS_HPP

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/dataset.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/generalization.hpp"
#include "ntk_lab/kernel.hpp"
#include "ntk_lab/network.hpp"
#include "ntk_lab/parallel.hpp"
#include "ntk_lab/schema.hpp"
#include "ntk_lab/theory.hpp"
#include "ntk_lab/trainer.hpp"

namespace ntk_lab::experiments {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = "0.3.0";
inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------- config access

inline json section(const json& cfg, const char* key) { return cfg.contains(key) ? cfg[key] : json::object(); }

template <class T>
std::vector<T> as_list(const json& v) {
    if (v.is_array()) return v.get<std::vector<T>>();
    return {v.get<T>()};
}

inline std::uint64_t base_seed(const json& cfg) { return cfg.value("seed", std::uint64_t{0}); }

// ---------------------------------------------------------------- data

struct DataBundle {
    DataMatrix train, test;
    TargetMatrix y_train, y_test;
    std::optional<TeacherSpec> teacher;  // synthetic data only
    bool has_test() const { return test.count() > 0; }
};

/// Diagonal covariance with geometrically spaced eigenvalues of ratio `condition`, mean eigenvalue 1.
inline CorrelationMatrix geometric_covariance(Index D, double condition) {
    Matrix S = Matrix::Zero(D, D);
    for (Index i = 0; i < D; ++i)
        S(i, i) = D == 1 ? 1.0 : std::pow(condition, 1.0 - static_cast<double>(i) / static_cast<double>(D - 1));
    S *= static_cast<double>(D) / S.trace();
    return CorrelationMatrix(S);
}

/// gamma = NaN leaves the inputs untouched; otherwise the train-set map S -> S^gamma is applied to
/// both splits and the result rescaled to unit mean correlation eigenvalue.
inline DataBundle build_data(const json& cfg, double gamma) {
    const json d = section(cfg, "data");
    const std::uint64_t seed = d.value("seed", base_seed(cfg));
    DataBundle b;
    if (d.value("source", std::string("synthetic")) == "csv") {
        if (!d.contains("path")) throw ConfigError("/data/path", "csv source needs a path");
        std::tie(b.train, b.y_train) = load_csv(d["path"].get<std::string>());
        if (d.contains("test_path")) std::tie(b.test, b.y_test) = load_csv(d["test_path"].get<std::string>());
        else b.test = DataMatrix(Matrix(b.train.dim(), 0)), b.y_test = TargetMatrix(Matrix(b.y_train.channels(), 0));
    } else {
        const Index D = d.value("dim", Index{30});
        const Index P = d.value("samples", Index{100});
        const Index Q = d.value("test_samples", Index{0});
        const CorrelationMatrix cov = geometric_covariance(D, d.value("condition", 1.0));
        b.train = generate_gaussian(D, P, cov, seed);
        b.test = Q > 0 ? generate_gaussian(D, Q, cov, seed + 1) : DataMatrix(Matrix(D, 0));
        const std::vector<double> scales = d.value("teacher_scales", std::vector<double>{1.0});
        b.teacher = random_teacher(D, Eigen::Map<const Vector>(scales.data(), static_cast<Index>(scales.size())), seed + 2);
        b.y_train = make_targets(b.train, *b.teacher);
        b.y_test = TargetMatrix(b.teacher->weights() * b.test.X);
    }
    if (!std::isnan(gamma)) {
        const Matrix T = whitening_map(b.train, gamma);
        const double c = unit_correlation_scale(DataMatrix(Matrix(T * b.train.X)));
        b.train.X = c * T * b.train.X;
        if (b.has_test()) b.test.X = c * T * b.test.X;
        if (b.teacher && d.value("targets", std::string("preprocessed")) == "preprocessed") {
            b.y_train = make_targets(b.train, *b.teacher);
            b.y_test = TargetMatrix(b.teacher->weights() * b.test.X);
        }
    }
    return b;
}

inline std::vector<double> gamma_grid(const json& cfg) {
    const json d = section(cfg, "data");
    if (d.contains("gamma")) return as_list<double>(d["gamma"]);
    if (d.value("whiten", false)) return {0.0};
    return {kNaN};
}

// ---------------------------------------------------------------- network

inline std::vector<Index> layer_widths(const json& net, Index D, Index C, int depth) {
    std::vector<Index> w{D};
    if (net.contains("hidden")) {
        for (Index h : net["hidden"].get<std::vector<Index>>()) w.push_back(h);
    } else {
        const Index width = net.value("width", Index{50});
        for (int l = 1; l < depth; ++l) w.push_back(width);
    }
    w.push_back(C);
    return w;
}

/// Linear net with every teacher mode at per-layer scale sqrt(u0sq): W^1 = u Q_1 B, W^l = u Q_l Q_{l-1}^T,
/// W^L = u Q_{L-1}^T, so the effective map is u^L B and the layers are exactly balanced.
inline LayerStack balanced_mode_init(const std::vector<Index>& widths, const TeacherSpec& teacher, double u0sq,
                                     std::uint64_t seed) {
    const int L = static_cast<int>(widths.size()) - 1;
    const Index C = teacher.channels();
    if (L < 2) throw InvalidInput("balanced init needs depth >= 2");
    for (int l = 1; l < L; ++l)
        if (widths[l] < C) throw InvalidInput("balanced init needs hidden widths >= number of outputs");
    std::mt19937_64 rng(seed);
    std::vector<Matrix> Q;
    for (int l = 1; l < L; ++l) {
        Eigen::HouseholderQR<Matrix> qr(standard_normal(widths[l], C, rng));
        Q.push_back(qr.householderQ() * Matrix::Identity(widths[l], C));
    }
    const double u = std::sqrt(u0sq);
    LayerStack net;
    net.sigma = u;
    net.seed = seed;
    net.W.push_back(u * Q[0] * teacher.beta);
    for (int l = 1; l < L - 1; ++l) net.W.push_back(u * Q[l] * Q[l - 1].transpose());
    net.W.push_back(u * Q.back().transpose());
    return net;
}

inline LayerStack build_network(const json& cfg, const DataBundle& data, int depth, double sigma) {
    const json n = section(cfg, "network");
    const auto widths = layer_widths(n, data.train.dim(), data.y_train.channels(), depth);
    const Activation act = parse_activation(n.value("activation", std::string("linear")));
    const std::uint64_t seed = n.value("seed", base_seed(cfg) + 1);
    if (n.value("init", std::string("random")) == "balanced") {
        if (act != Activation::Linear || !data.teacher) throw InvalidInput("balanced init needs a linear net and a synthetic teacher");
        return balanced_mode_init(widths, *data.teacher, n.value("u0sq", sigma * sigma), seed);
    }
    return init(widths, sigma, act, seed);
}

inline FlowConfig build_flow(const json& cfg) {
    const json f = section(cfg, "flow");
    FlowConfig c;
    c.eta = f.value("eta", c.eta);
    c.dt = f.value("dt", c.dt);
    c.max_time = f.value("max_time", c.max_time);
    c.integrator = parse_integrator(f.value("integrator", std::string("rk4")));
    c.adaptive = f.value("adaptive", c.adaptive);
    c.safety = f.value("safety", c.safety);
    c.snapshot_t_min = f.value("t_min", c.snapshot_t_min);
    c.per_decade = f.value("per_decade", c.per_decade);
    c.stop_loss = f.value("stop_loss", c.stop_loss);
    c.max_steps = f.value("max_steps", c.max_steps);
    return c;
}

// ---------------------------------------------------------------- cells

struct Cell {
    std::size_t index = 0;
    int depth = 2;
    double sigma = 0.0;
    double gamma = kNaN;
    std::string dir;
};

inline std::vector<Cell> expand_cells(const json& cfg) {
    const json n = section(cfg, "network");
    std::vector<int> depths;
    if (n.contains("hidden")) depths = {static_cast<int>(n["hidden"].size()) + 1};
    else depths = n.contains("depth") ? as_list<int>(n["depth"]) : std::vector<int>{2};
    const auto sigmas = n.contains("sigma") ? as_list<double>(n["sigma"]) : std::vector<double>{1e-3};
    const auto gammas = gamma_grid(cfg);
    std::vector<Cell> cells;
    for (int d : depths)
        for (double s : sigmas)
            for (double g : gammas) {
                Cell c{cells.size(), d, s, g, ""};
                char buf[32];
                std::snprintf(buf, sizeof buf, "cell_%03zu", c.index);
                c.dir = buf;
                cells.push_back(c);
            }
    return cells;
}

/// Summary columns shared by every training experiment.
inline const std::vector<std::string>& summary_columns() {
    static const std::vector<std::string> cols{"cell", "depth", "sigma", "gamma", "t_half_loss", "t_align_half",
                                               "final_alignment", "final_loss", "steps", "max_conservation",
                                               "aborted", "laziness"};
    return cols;
}

struct CellOutcome {
    std::vector<double> row;
    bool aborted = false;
    std::string abort_reason;
};

inline double opt_or_nan(const std::optional<double>& v) { return v ? *v : kNaN; }

inline void write_json(const std::string& path, const json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline json read_json(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), 1);
    }
}

// ---------------------------------------------------------------- predictor comparison

inline const std::vector<std::string>& predictor_names() {
    static const std::vector<std::string> n{"net", "ntk_init", "ntk_final", "integrating_factor"};
    return n;
}

/// Recomputes the four predictors of one run cell from its artifacts and writes compare.csv/json.
inline json compare_cell(const std::string& dir) {
    for (const char* f : {"train.csv", "test.csv", "net_init.csv", "net_final.csv"})
        if (!fs::exists(fs::path(dir) / f)) throw IoError("missing artifact '" + (fs::path(dir) / f).string() + "'");
    const auto [Xtr, Ytr] = load_csv((fs::path(dir) / "train.csv").string());
    const auto [Xte, Yte] = load_csv((fs::path(dir) / "test.csv").string());
    const LayerStack net0 = load_checkpoint((fs::path(dir) / "net_init.csv").string());
    const LayerStack net1 = load_checkpoint((fs::path(dir) / "net_final.csv").string());
    const Vector y = Ytr.flat();
    const Vector f0_train = forward(net0, Xtr).flat(), f0_test = forward(net0, Xte).flat();

    auto regress = [&](const LayerStack& net) {
        const KernelSnapshot k = empirical_ntk(net, Xtr.X, &Xte.X);
        return Vector(f0_test + kernel_regression(k.gram, k.test_rows, Vector(y - f0_train)).predictions.col(0));
    };
    std::vector<Vector> preds{forward(net1, Xte).flat(), regress(net0), regress(net1)};
    const fs::path ifp = fs::path(dir) / "integrating_factor.csv";
    if (fs::exists(ifp)) {
        const auto col = csv::Table::read_file(ifp.string()).column("prediction");
        preds.emplace_back(Eigen::Map<const Vector>(col.data(), static_cast<Index>(col.size())));
    }

    csv::Table t;
    t.columns = {"index"};
    for (std::size_t k = 0; k < preds.size(); ++k) t.columns.push_back(predictor_names()[k]);
    for (Index i = 0; i < preds[0].size(); ++i) {
        std::vector<double> row{static_cast<double>(i)};
        for (const auto& p : preds) row.push_back(p(i));
        t.add(row);
    }
    t.write_file((fs::path(dir) / "compare.csv").string());

    json report;
    report["cell"] = fs::path(dir).filename().string();
    report["pairs"] = json::array();
    for (std::size_t a = 0; a < preds.size(); ++a)
        for (std::size_t b = a + 1; b < preds.size(); ++b)
            report["pairs"].push_back({{"reference", predictor_names()[a]},
                                       {"predictor", predictor_names()[b]},
                                       {"r2", r_squared(preds[a], preds[b])},
                                       {"pearson", pearson(preds[a], preds[b])}});
    write_json((fs::path(dir) / "compare.json").string(), report);
    return report;
}

inline json compare_run(const std::string& run_dir) {
    if (!fs::is_directory(run_dir)) throw IoError("run directory '" + run_dir + "' does not exist");
    std::vector<std::string> dirs;
    for (const auto& e : fs::directory_iterator(run_dir))
        if (e.is_directory() && fs::exists(e.path() / "net_final.csv") && fs::exists(e.path() / "test.csv"))
            dirs.push_back(e.path().string());
    if (dirs.empty()) throw IoError("no comparable cells (net_final.csv + test.csv) under '" + run_dir + "'");
    std::sort(dirs.begin(), dirs.end());
    json out;
    out["cells"] = json::array();
    for (const auto& d : dirs) out["cells"].push_back(compare_cell(d));
    return out;
}

/// r2 of `predictor` against `reference` from a compare report.
inline double pair_r2(const json& report, const std::string& reference, const std::string& predictor) {
    for (const auto& p : report["pairs"])
        if (p["reference"] == reference && p["predictor"] == predictor) return p["r2"].get<double>();
    throw InvalidInput("compare report lacks pair " + reference + "/" + predictor);
}

// ---------------------------------------------------------------- theory overlays

/// Earliest time at which `v` reaches `level` from below, linearly interpolated.
inline std::optional<double> upward_crossing(const std::vector<double>& t, const std::vector<double>& v, double level) {
    return detail::first_crossing(t, v, level, false);
}

/// Initial value c0 whose ODE solution reaches s/2 at `t_half`.
inline double calibrate_c0(int L, double s, double t_half, theory::DeepForm f) {
    double lo = std::log(1e-300), hi = std::log(0.5 * s * (1 - 1e-9));
    for (int i = 0; i < 200 && hi - lo > 1e-10; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double th = theory::deep_half_time({L, s, std::exp(mid), 0.0}, f);
        (th > t_half ? lo : hi) = mid;
    }
    return std::exp(0.5 * (lo + hi));
}

struct TheoryRecorder {
    std::vector<double> t, q, r, c;
};

inline json theory_overlay(const TrajectoryLog& log, const TheoryRecorder& rec, const TeacherSpec& teacher,
                           double eta, double window, const std::string& path) {
    const double s = teacher.s(0);
    const int L = log.final_net.depth();
    csv::Table tab;
    json j;
    const auto mk = phase_markers(log);
    const double t_end = mk.t_half_loss ? window * *mk.t_half_loss : log.times.back();
    j["window_end"] = t_end;
    if (L == 2) {
        const double q0 = rec.q.front() + rec.r.front();
        j["q0_calibrated"] = q0;
        j["q0_expected"] = theory::expected_q0(log.net0.sigma, static_cast<double>(log.net0.W[0].rows()),
                                               static_cast<double>(log.net0.input_dim()));
        std::vector<double> qt, rt;
        double eq = 0, er = 0, mq = 0, mr = 0;
        for (std::size_t i = 0; i < rec.t.size(); ++i) {
            const auto v = theory::two_layer_qr(rec.t[i], {s, q0, 0.0, 0.0, eta});
            qt.push_back(v.q);
            rt.push_back(v.r);
            if (rec.t[i] <= t_end) {
                eq = std::max(eq, std::abs(rec.q[i] - v.q));
                er = std::max(er, std::abs(rec.r[i] - v.r));
                mq = std::max(mq, std::abs(v.q));
                mr = std::max(mr, std::abs(v.r));
            }
        }
        theory::add_curve(tab, rec.t, rec.q, 0);
        theory::add_curve(tab, rec.t, qt, 1);
        theory::add_curve(tab, rec.t, rec.r, 2);
        theory::add_curve(tab, rec.t, rt, 3);
        j["variants"] = {{"0", "q measured"}, {"1", "q closed form"}, {"2", "r measured"}, {"3", "r closed form"}};
        j["q_sup_rel_error"] = eq / mq;
        j["r_sup_rel_error"] = er / mr;
    } else {
        const auto tc = upward_crossing(rec.t, rec.c, 0.5 * s);
        theory::add_curve(tab, rec.t, rec.c, 0);
        theory::add_curve(tab, log.times, log.loss, 1);
        j["variants"] = {{"0", "c measured"}, {"1", "loss measured"}, {"2", "c chain-rule ODE"},
                         {"3", "c as-printed ODE"}, {"4", "loss chain-rule ODE"}, {"5", "loss as-printed ODE"}};
        j["t_half_c"] = tc ? json(*tc) : json(nullptr);
        if (tc) {
            int code = 2;
            for (auto f : {theory::DeepForm::ChainRule, theory::DeepForm::AsPrinted}) {
                const double c0 = calibrate_c0(L, s, *tc / eta, f);
                std::vector<double> ts;
                for (double t : rec.t) ts.push_back(t * eta);
                const auto c = theory::deep_c_ode(ts, {L, s, c0, 0.0}, f);
                std::vector<double> loss;
                double err = 0;
                for (std::size_t i = 0; i < c.size(); ++i) {
                    loss.push_back(0.5 * (s - c[i]) * (s - c[i]) * static_cast<double>(teacher.channels()));
                    if (rec.t[i] <= t_end) err = std::max(err, std::abs(loss[i] - log.loss[i]));
                }
                theory::add_curve(tab, rec.t, c, code);
                theory::add_curve(tab, rec.t, loss, code + 2);
                const std::string key = theory::to_string(f);
                j["c0_" + key] = c0;
                j["loss_sup_rel_error_" + key] = err / log.loss.front();
                ++code;
            }
        }
        j["t_half_theory_as_printed"] = theory::t_half_theory(L, s, log.net0.sigma, theory::DeepForm::AsPrinted);
        j["t_half_theory_chain_rule"] = theory::t_half_theory(L, s, log.net0.sigma, theory::DeepForm::ChainRule);
    }
    tab.write_file(path);
    return j;
}

// ---------------------------------------------------------------- training cells

struct RunContext {
    json cfg;
    std::string out;
    std::map<double, DataBundle> data;  // keyed by gamma (NaN stored under -1)
    const DataBundle& bundle(double gamma) const { return data.at(std::isnan(gamma) ? -1.0 : gamma); }
};

inline CellOutcome run_training_cell(const RunContext& ctx, const Cell& cell) {
    const json& cfg = ctx.cfg;
    const std::string kind = cfg["experiment"];
    const json outs = section(cfg, "outputs");
    const DataBundle& data = ctx.bundle(cell.gamma);
    const fs::path dir = fs::path(ctx.out) / cell.dir;
    fs::create_directories(dir);

    const LayerStack net0 = build_network(cfg, data, cell.depth, cell.sigma);
    FlowConfig flow = build_flow(cfg);
    const bool sweep = kind == "sweep";
    const json sw = section(cfg, "sweep");
    const bool linear = net0.activation == Activation::Linear;

    CellOutcome res;
    auto row = [&](const PhaseMarkers& m, double final_loss, double steps, double cons, bool aborted, double lazy) {
        return std::vector<double>{static_cast<double>(cell.index), static_cast<double>(cell.depth), cell.sigma,
                                   cell.gamma, opt_or_nan(m.t_half_loss), opt_or_nan(m.t_align_half),
                                   m.final_alignment, final_loss, steps, cons, aborted ? 1.0 : 0.0, lazy};
    };

    if (sweep && sw.value("measure", std::string("t_half")) == "laziness") {
        const Matrix probe = data.has_test() ? Matrix(data.test.X.col(0)) : Matrix(data.train.X.col(0));
        const double lz = laziness_ratio(net0, data.train.X, data.y_train.Y, probe);
        res.row = row(PhaseMarkers{}, mse_loss(forward(net0, data.train.X), data.y_train.Y), 0, 0, false, lz);
        return res;
    }
    if (sweep) flow.stop_loss = sw.value("stop_fraction", 0.25) * mse_loss(forward(net0, data.train.X), data.y_train.Y);

    const bool want_pred = data.has_test() && (kind == "align-demo" || outs.value("predictions", false));
    const bool theory_mode = kind == "theory-compare";
    const bool modes = outs.value("modes", false) && linear && data.teacher;
    if (theory_mode && (!linear || !data.teacher || data.teacher->channels() != 1))
        throw InvalidInput("theory-compare needs a linear net and a single-output synthetic teacher");

    const Vector y = data.y_train.flat();
    const double P = static_cast<double>(data.train.count());
    std::optional<IntegratingFactor> itf;
    if (want_pred)
        itf.emplace(forward(net0, data.train).flat(), forward(net0, data.test).flat(), y, flow.eta / P);
    TheoryRecorder rec;
    csv::Table mode_tab;
    std::vector<std::vector<double>> mode_vals(modes ? data.teacher->channels() : 0);
    std::vector<double> mode_t;
    std::vector<KernelSnapshot> snaps;
    const bool keep = outs.value("snapshots", false);

    auto observer = [&](double t, const LayerStack& net, const KernelSnapshot& snap) {
        if (itf) itf->push(snap);
        if (keep) snaps.push_back(snap);
        if (theory_mode) {
            const Vector beta = data.teacher->beta.row(0).transpose();
            rec.t.push_back(t);
            if (net.depth() == 2) {
                const Vector Wb = net.W[0] * beta;
                const Vector a = net.W[1].row(0).transpose();
                rec.q.push_back(0.5 * (a.squaredNorm() + Wb.squaredNorm()));
                rec.r.push_back(a.dot(Wb));
            }
            rec.c.push_back((effective_weights(net) * beta)(0));
        }
        if (modes) {
            const Matrix We = effective_weights(net);
            mode_t.push_back(t);
            for (Index a = 0; a < We.rows(); ++a) {
                const double v = We.row(a).dot(data.teacher->beta.row(a));
                mode_vals[a].push_back(v);
                mode_tab.add({t, v, static_cast<double>(a)});
            }
        }
    };

    const Matrix* Xt = want_pred ? &data.test.X : nullptr;
    TrajectoryLog log = train(net0, data.train.X, data.y_train.Y, flow, Xt, observer);
    const PhaseMarkers mk = phase_markers(log);

    json side = trajectory_sidecar(log, flow);
    side["cell"] = {{"index", cell.index}, {"depth", cell.depth}, {"sigma", cell.sigma},
                    {"gamma", std::isnan(cell.gamma) ? json(nullptr) : json(cell.gamma)}};
    side["widths"] = log.net0.widths();
    side["activation"] = to_string(log.net0.activation);

    if (outs.value("trajectory", !sweep)) trajectory_table(log).write_file((dir / "trajectory.csv").string());
    if (want_pred) {
        save_csv((dir / "train.csv").string(), data.train, data.y_train);
        save_csv((dir / "test.csv").string(), data.test, data.y_test);
        save_checkpoint((dir / "net_init.csv").string(), log.net0);
        save_checkpoint((dir / "net_final.csv").string(), log.final_net);
        csv::Table p;
        p.columns = {"prediction"};
        const Vector f = itf->predict(true);
        for (Index i = 0; i < f.size(); ++i) p.add({f(i)});
        p.write_file((dir / "integrating_factor.csv").string());
        side["integrating_factor_clamped"] = itf->clamped_total();
    }
    if (keep) write_snapshots((dir / "snapshots").string(), snaps);
    if (theory_mode)
        side["theory"] = theory_overlay(log, rec, *data.teacher, flow.eta,
                                        section(cfg, "theory").value("window", 3.0), (dir / "theory.csv").string());
    if (modes) {
        mode_tab.columns = {"t", "value", "variant"};
        mode_tab.write_file((dir / "modes.csv").string());
        std::vector<double> s;
        for (Index a = 0; a < data.teacher->channels(); ++a) s.push_back(data.teacher->s(a));
        const double u0sq = section(cfg, "network").value("u0sq", cell.sigma * cell.sigma);
        const auto sched = theory::mode_schedule(s, u0sq);
        json mj = json::array();
        for (std::size_t a = 0; a < s.size(); ++a) {
            const auto th = upward_crossing(mode_t, mode_vals[a], 0.5 * s[a]);
            mj.push_back({{"mode", a}, {"s", s[a]}, {"t_half_measured", th ? json(*th) : json(nullptr)},
                          {"t_alpha", sched.times[a]}, {"t_half_exact", sched.half_times[a]}});
        }
        side["modes"] = mj;
        side["mode_separation_ratio"] = sched.separation_ratio;
    }
    if (outs.value("min_norm", false) && linear) {
        const auto mn = theory::min_norm_solution(data.train, data.y_train.Y);
        const Matrix We = effective_weights(log.final_net);
        side["min_norm"] = {{"relative_error", (We - mn.beta).norm() / mn.beta.norm()},
                            {"rank", mn.rank}, {"jitter", mn.jitter}};
    }
    write_json((dir / "trajectory.json").string(), side);
    if (kind == "align-demo" && want_pred) compare_cell(dir.string());

    res.aborted = log.aborted;
    res.abort_reason = log.abort_reason;
    res.row = row(mk, log.loss.back(), static_cast<double>(log.steps), log.max_conservation, log.aborted, kNaN);
    return res;
}

/// Per-depth scaling fits over the sigma grid.
inline json sweep_fits(const csv::Table& summary, const json& cfg, const RunContext& ctx) {
    const auto depth = summary.column("depth"), sigma = summary.column("sigma");
    const bool lazy = section(cfg, "sweep").value("measure", std::string("t_half")) == "laziness";
    const auto value = summary.column(lazy ? "laziness" : "t_half_loss");
    const DataBundle& data = ctx.data.begin()->second;
    const double s = data.teacher ? data.teacher->s(0) : 1.0;
    json fits = json::array();
    std::vector<int> depths;
    for (double d : depth)
        if (std::find(depths.begin(), depths.end(), static_cast<int>(d)) == depths.end()) depths.push_back(static_cast<int>(d));
    for (int L : depths) {
        std::vector<double> ls, lv, lin;
        for (std::size_t i = 0; i < depth.size(); ++i)
            if (static_cast<int>(depth[i]) == L && std::isfinite(value[i]) && value[i] > 0) {
                ls.push_back(std::log(sigma[i]));
                lv.push_back(std::log(value[i]));
                lin.push_back(value[i]);
            }
        json f{{"depth", L}, {"points", ls.size()}};
        if (ls.size() >= 2) {
            const auto fit = linear_fit(ls, lv);
            f["slope"] = fit.slope;
            f["r2"] = fit.r2;
            f["prefactor"] = std::exp(fit.intercept);
            if (lazy) {
                f["slope_theory"] = -L;
            } else if (L == 2) {
                std::vector<double> x;
                for (double v : ls) x.push_back(-2.0 * v);
                const auto lf = linear_fit(x, lin);
                f["linear_in_log_inv_sigma2"] = {{"slope", lf.slope}, {"intercept", lf.intercept}, {"r2", lf.r2}};
            } else {
                f["slope_theory"] = -(L - 2);
                f["prefactor_as_printed"] = L / ((L - 2.0) * s);
                f["prefactor_chain_rule"] = 1.0 / ((L - 2.0) * s);
            }
        }
        fits.push_back(f);
    }
    return fits;
}

// ---------------------------------------------------------------- non-training experiments

inline void run_gen_curves(const json& cfg, const std::string& out, int jobs) {
    const json t = section(cfg, "transfer");
    TransferGrid g;
    g.A = t.at("A").get<std::vector<double>>();
    g.alpha = t.at("alpha").get<std::vector<double>>();
    g.P = t.at("P").get<std::vector<double>>();
    g.D = t.value("dim", Index{20});
    g.lambda = t.value("lambda", 1e-6);
    g.trials = t.value("trials", 0);
    g.seed = base_seed(cfg);
    transfer_sweep(g, jobs).write_file((fs::path(out) / "curves.csv").string());
}

inline json run_model_kernel(const json& cfg, const std::string& out) {
    const json m = section(cfg, "model_kernel");
    const DataBundle data = build_data(cfg, gamma_grid(cfg).front());
    if (!data.teacher || !data.has_test()) throw InvalidInput("model-kernel needs synthetic data with a test split");
    const double P = static_cast<double>(data.train.count());
    const Vector beta = data.teacher->beta.row(0).transpose();
    const Index D = data.train.dim();
    if (data.train.count() > D) throw InvalidInput("model-kernel uses linear kernels, which are singular when samples exceed dim");
    const Matrix M = m.value("spike", 2.0) * beta * beta.transpose() + Matrix::Identity(D, D);
    theory::ModelKernelSpec spec;
    spec.tau = m.value("tau", 10.0);
    spec.growth_time = m.value("growth_time", 1.0);
    spec.phase_one_steps = m.value("steps", 400);
    spec.K_start = data.train.X.transpose() * data.train.X / P;
    spec.K_inf = data.train.X.transpose() * M * data.train.X / P;
    spec.k_start = data.test.X.transpose() * data.train.X / P;
    spec.k_inf = data.test.X.transpose() * M * data.train.X / P;
    const Vector y = data.y_train.flat();
    const auto eps = m.value("epsilon", std::vector<double>{1e-2, 1e-3, 1e-4});
    csv::Table t;
    t.columns = {"epsilon", "gap", "phi_deviation", "bound"};
    std::vector<double> le, lg;
    bool bound_ok = true;
    for (double e : eps) {
        spec.epsilon = e;
        const auto r = theory::model_kernel_run(spec, y, Vector::Zero(y.size()), Vector::Zero(data.test.count()));
        t.add({e, r.gap, r.phi_deviation, r.bound});
        bound_ok = bound_ok && r.phi_deviation <= r.bound;
        if (e > 0 && r.gap > 0) {
            le.push_back(std::log(e));
            lg.push_back(std::log(r.gap));
        }
    }
    t.write_file((fs::path(out) / "model_kernel.csv").string());
    json j{{"bound_holds", bound_ok}};
    if (le.size() >= 2) j["gap_slope"] = linear_fit(le, lg).slope;
    write_json((fs::path(out) / "model_kernel.json").string(), j);
    return j;
}

// ---------------------------------------------------------------- entry point

struct RunResult {
    int exit_code = 0;
    json summary;
};

/// Runs a validated config into `out`. Training aborts give exit code 3 after all outputs are written.
inline RunResult run(const json& cfg, const std::string& out, int jobs, std::ostream* progress = nullptr) {
    schema::validate_config(cfg);
    fs::create_directories(out);
    write_json((fs::path(out) / "config.json").string(), cfg);
    const std::string kind = cfg["experiment"];
    RunResult rr;
    rr.summary["experiment"] = kind;

    if (kind == "gen-curves") {
        run_gen_curves(cfg, out, jobs);
        return rr;
    }
    if (kind == "model-kernel") {
        rr.summary["model_kernel"] = run_model_kernel(cfg, out);
        return rr;
    }

    RunContext ctx{cfg, out, {}};
    for (double g : gamma_grid(cfg)) ctx.data.emplace(std::isnan(g) ? -1.0 : g, build_data(cfg, g));
    const auto cells = expand_cells(cfg);
    std::vector<CellOutcome> outcomes(cells.size());
    std::mutex mu;
    std::size_t done = 0;
    parallel_for(cells.size(), jobs, [&](std::size_t i) {
        outcomes[i] = run_training_cell(ctx, cells[i]);
        std::lock_guard<std::mutex> lock(mu);
        ++done;
        if (progress) *progress << "cell " << done << "/" << cells.size() << " done\n";
    });

    csv::Table summary;
    summary.columns = summary_columns();
    json aborted = json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        summary.add(outcomes[i].row);
        if (outcomes[i].aborted) aborted.push_back({{"cell", cells[i].dir}, {"reason", outcomes[i].abort_reason}});
    }
    summary.write_file((fs::path(out) / "summary.csv").string());
    if (kind == "sweep") {
        rr.summary["fits"] = sweep_fits(summary, cfg, ctx);
        write_json((fs::path(out) / "fits.json").string(), rr.summary["fits"]);
    }
    if (!aborted.empty()) {
        rr.exit_code = 3;
        rr.summary["aborted"] = aborted;
    }
    return rr;
}

}  // namespace ntk_lab::experiments

#endif
