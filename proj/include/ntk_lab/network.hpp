#ifndef NTK_LAB_NETWORK_HPP
#define NTK_LAB_NETWORK_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ntk_lab/csv.hpp"
#include "ntk_lab/dataset.hpp"
#include "ntk_lab/errors.hpp"
#include "ntk_lab/linalg.hpp"

namespace ntk_lab {

enum class Activation { Linear, ReLU, Tanh };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::Linear: return "linear";
        case Activation::ReLU: return "relu";
        case Activation::Tanh: return "tanh";
    }
    return "linear";
}

inline Activation parse_activation(const std::string& s) {
    if (s == "linear") return Activation::Linear;
    if (s == "relu") return Activation::ReLU;
    if (s == "tanh") return Activation::Tanh;
    throw InvalidInput("unknown activation '" + s + "'");
}

/// Bias-free MLP. W[0] is the first layer (N1 x D), W.back() the readout (C x N_{L-1}).
struct LayerStack {
    std::vector<Matrix> W;
    Activation activation = Activation::Linear;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    int depth() const { return static_cast<int>(W.size()); }
    Index input_dim() const { return W.front().cols(); }
    Index output_dim() const { return W.back().rows(); }

    std::vector<Index> widths() const {
        std::vector<Index> w{W.front().cols()};
        for (const auto& m : W) w.push_back(m.rows());
        return w;
    }

    Index parameter_count() const {
        Index n = 0;
        for (const auto& m : W) n += m.size();
        return n;
    }

    void check() const {
        if (W.empty()) throw InvalidInput("network has no layers");
        for (std::size_t l = 1; l < W.size(); ++l)
            if (W[l].cols() != W[l - 1].rows()) throw InvalidInput("layer shapes do not chain");
    }
};

inline LayerStack init(const std::vector<Index>& widths, double sigma, Activation act, std::uint64_t seed) {
    if (widths.size() < 2) throw InvalidInput("init: need at least input and output widths");
    for (Index w : widths)
        if (w <= 0) throw InvalidInput("init: zero width");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw InvalidInput("init: sigma must be positive");
    LayerStack net;
    net.activation = act;
    net.sigma = sigma;
    net.seed = seed;
    std::mt19937_64 rng(seed);
    for (std::size_t l = 1; l < widths.size(); ++l) {
        const double sd = sigma / std::sqrt(static_cast<double>(widths[l - 1]));
        net.W.push_back(sd * standard_normal(widths[l], widths[l - 1], rng));
    }
    return net;
}

/// Same weights multiplied by c (positive homogeneity checks, normalized inits).
inline LayerStack scaled(LayerStack net, double c) {
    for (auto& m : net.W) m *= c;
    net.sigma *= c;
    return net;
}

namespace detail {

inline Matrix act(Activation a, const Matrix& Z) {
    switch (a) {
        case Activation::Linear: return Z;
        case Activation::ReLU: return Z.cwiseMax(0.0);
        case Activation::Tanh: return Z.array().tanh().matrix();
    }
    return Z;
}

inline Matrix act_d1(Activation a, const Matrix& Z) {
    switch (a) {
        case Activation::Linear: return Matrix::Ones(Z.rows(), Z.cols());
        case Activation::ReLU: return (Z.array() > 0.0).cast<double>().matrix();
        case Activation::Tanh: return (1.0 - Z.array().tanh().square()).matrix();
    }
    return Z;
}

inline Matrix act_d2(Activation a, const Matrix& Z) {
    if (a != Activation::Tanh) return Matrix::Zero(Z.rows(), Z.cols());
    const auto t = Z.array().tanh();
    return (-2.0 * t * (1.0 - t.square())).matrix();
}

}  // namespace detail

/// Forward pass keeping pre-activations Z[l] (l = 0..L-1) and layer inputs H[l] (H[0] = X).
struct ForwardCache {
    std::vector<Matrix> Z;
    std::vector<Matrix> H;
    Matrix out() const { return Z.back(); }
};

inline ForwardCache forward_cache(const LayerStack& net, const Matrix& X) {
    net.check();
    if (X.rows() != net.input_dim()) throw InvalidInput("forward: input dimension mismatch");
    ForwardCache c;
    c.H.push_back(X);
    for (int l = 0; l < net.depth(); ++l) {
        c.Z.push_back(net.W[l] * c.H.back());
        if (l + 1 < net.depth()) c.H.push_back(detail::act(net.activation, c.Z.back()));
    }
    return c;
}

inline Matrix forward(const LayerStack& net, const Matrix& X) { return forward_cache(net, X).out(); }

inline TargetMatrix forward(const LayerStack& net, const DataMatrix& X) { return TargetMatrix(forward(net, X.X)); }

/// Product W_L ... W_1 (C x D) of a linear network.
inline Matrix effective_weights(const LayerStack& net) {
    net.check();
    if (net.activation != Activation::Linear) throw InvalidInput("effective_weights: network is not linear");
    Matrix B = net.W.front();
    for (int l = 1; l < net.depth(); ++l) B = net.W[l] * B;
    return B;
}

/// Backpropagated sensitivities of output channel `c`: Delta[l] = d f_c / d Z[l], one column per sample.
inline std::vector<Matrix> output_sensitivities(const LayerStack& net, const ForwardCache& fc, Index c) {
    const int L = net.depth();
    const Index P = fc.H.front().cols();
    std::vector<Matrix> D(L);
    D[L - 1] = Matrix::Zero(net.output_dim(), P);
    D[L - 1].row(c).setOnes();
    for (int l = L - 1; l > 0; --l)
        D[l - 1] = (net.W[l].transpose() * D[l]).cwiseProduct(detail::act_d1(net.activation, fc.Z[l - 1]));
    return D;
}

/// Per-layer gradients of the mean-squared loss (1/2P) sum |f - y|^2.
inline std::vector<Matrix> loss_gradient(const LayerStack& net, const Matrix& X, const Matrix& Y) {
    const ForwardCache fc = forward_cache(net, X);
    if (Y.rows() != net.output_dim() || Y.cols() != X.cols()) throw InvalidInput("loss_gradient: target shape");
    const int L = net.depth();
    std::vector<Matrix> g(L);
    Matrix delta = (fc.out() - Y) / static_cast<double>(X.cols());
    for (int l = L - 1; l >= 0; --l) {
        g[l] = delta * fc.H[l].transpose();
        if (l > 0) delta = (net.W[l].transpose() * delta).cwiseProduct(detail::act_d1(net.activation, fc.Z[l - 1]));
    }
    return g;
}

inline double mse_loss(const Matrix& F, const Matrix& Y) {
    return 0.5 * (F - Y).squaredNorm() / static_cast<double>(F.cols());
}

/// Flattened parameter vector: layers in order, each column-major.
inline Vector flatten(const std::vector<Matrix>& Ws) {
    Index n = 0;
    for (const auto& m : Ws) n += m.size();
    Vector v(n);
    Index o = 0;
    for (const auto& m : Ws) {
        v.segment(o, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
        o += m.size();
    }
    return v;
}

inline std::vector<Matrix> unflatten(const Vector& v, const LayerStack& like) {
    std::vector<Matrix> out;
    Index o = 0;
    for (const auto& m : like.W) {
        out.push_back(Eigen::Map<const Matrix>(v.data() + o, m.rows(), m.cols()));
        o += m.size();
    }
    return out;
}

/// Per-sample parameter jacobians. Row (c * P + mu) holds d f_c(x_mu) / d theta.
struct GradientBundle {
    Matrix J;
    Index channels = 0;
    Index samples = 0;
};

inline GradientBundle jacobian(const LayerStack& net, const Matrix& X) {
    const ForwardCache fc = forward_cache(net, X);
    const Index P = X.cols(), C = net.output_dim();
    GradientBundle gb;
    gb.channels = C;
    gb.samples = P;
    gb.J = Matrix::Zero(C * P, net.parameter_count());
    for (Index c = 0; c < C; ++c) {
        const auto D = output_sensitivities(net, fc, c);
        Index off = 0;
        for (int l = 0; l < net.depth(); ++l) {
            const Index rows = net.W[l].rows(), cols = net.W[l].cols();
            for (Index mu = 0; mu < P; ++mu) {
                // column-major vec(d h^T): entry (i, j) at j * rows + i
                for (Index j = 0; j < cols; ++j)
                    gb.J.row(c * P + mu).segment(off + j * rows, rows) = fc.H[l](j, mu) * D[l].col(mu).transpose();
            }
            off += net.W[l].size();
        }
    }
    return gb;
}

/// Hessian of f_c(x) (summed over columns of X) applied to the direction V, via the R-operator.
inline std::vector<Matrix> output_hvp(const LayerStack& net, const Matrix& X, Index c, const std::vector<Matrix>& V) {
    const ForwardCache fc = forward_cache(net, X);
    const int L = net.depth();
    const Activation a = net.activation;
    std::vector<Matrix> RZ(L), RH(L);
    RH[0] = Matrix::Zero(X.rows(), X.cols());
    for (int l = 0; l < L; ++l) {
        RZ[l] = V[l] * fc.H[l] + net.W[l] * RH[l];
        if (l + 1 < L) RH[l + 1] = detail::act_d1(a, fc.Z[l]).cwiseProduct(RZ[l]);
    }
    const auto D = output_sensitivities(net, fc, c);
    std::vector<Matrix> out(L);
    Matrix Rd = Matrix::Zero(D[L - 1].rows(), D[L - 1].cols());
    for (int l = L - 1; l >= 0; --l) {
        out[l] = Rd * fc.H[l].transpose() + D[l] * RH[l].transpose();
        if (l > 0) {
            const Matrix back = net.W[l].transpose() * D[l];
            Rd = detail::act_d2(a, fc.Z[l - 1]).cwiseProduct(RZ[l - 1]).cwiseProduct(back) +
                 detail::act_d1(a, fc.Z[l - 1]).cwiseProduct(V[l].transpose() * D[l] + net.W[l].transpose() * Rd);
        }
    }
    return out;
}

/// Rank-C structure of a linear network: per layer the top singular triplets and truncation residual.
struct BalanceDecomposition {
    std::vector<Vector> u;            // top singular values per layer
    std::vector<Matrix> r_out;        // left singular vectors (rows side) per layer
    std::vector<Matrix> r_in;         // right singular vectors per layer
    std::vector<double> residual;     // |W - W_C|_F / |W|_F per layer

    double max_residual() const {
        double m = 0.0;
        for (double r : residual) m = std::max(m, r);
        return m;
    }
    /// Mean over layers of the leading singular value.
    double u_mean() const {
        double s = 0.0;
        for (const auto& v : u) s += v.size() ? v(0) : 0.0;
        return u.empty() ? 0.0 : s / static_cast<double>(u.size());
    }
};

inline BalanceDecomposition balance_decompose(const LayerStack& net) {
    net.check();
    if (net.activation != Activation::Linear) throw InvalidInput("balance_decompose: network is not linear");
    const Index C = net.output_dim();
    BalanceDecomposition bd;
    for (const auto& Wl : net.W) {
        const ThinSvd svd = thin_svd(Wl);
        const Index k = std::min<Index>(C, svd.S.size());
        bd.u.push_back(svd.S.head(k));
        bd.r_out.push_back(svd.U.leftCols(k));
        bd.r_in.push_back(svd.V.leftCols(k));
        const double total = svd.S.squaredNorm();
        const double tail = svd.S.tail(svd.S.size() - k).squaredNorm();
        bd.residual.push_back(total > 0.0 ? std::sqrt(tail / total) : 0.0);
    }
    return bd;
}

/// Balanced rank-one linear net: W^l = u r_{l+1} r_l^T, readout u r_L^T.
inline LayerStack balanced_rank_one(double u, const std::vector<Vector>& r) {
    if (r.size() < 2) throw InvalidInput("balanced_rank_one: need at least two interface vectors");
    LayerStack net;
    for (std::size_t l = 1; l < r.size(); ++l) net.W.push_back(u * r[l] * r[l - 1].transpose());
    net.W.push_back(u * r.back().transpose());
    return net;
}

inline void save_checkpoint(const std::string& path, const LayerStack& net) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    nlohmann::json h;
    h["format"] = "ntk-lab-checkpoint";
    h["version"] = 1;
    h["widths"] = net.widths();
    h["activation"] = to_string(net.activation);
    h["sigma"] = net.sigma;
    h["seed"] = net.seed;
    os << h.dump() << '\n';
    for (int l = 0; l < net.depth(); ++l) {
        os << 'W' << l + 1 << ',' << net.W[l].rows() << ',' << net.W[l].cols() << '\n';
        csv::write_matrix(os, net.W[l]);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline LayerStack load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ParseError("empty checkpoint", 1);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint header: ") + e.what(), 1);
    }
    if (h.value("format", "") != "ntk-lab-checkpoint") throw ParseError("not a checkpoint file", 1);
    LayerStack net;
    net.activation = parse_activation(h.at("activation").get<std::string>());
    net.sigma = h.at("sigma").get<double>();
    net.seed = h.at("seed").get<std::uint64_t>();
    const auto widths = h.at("widths").get<std::vector<Index>>();
    std::size_t line_no = 1;
    for (std::size_t l = 1; l < widths.size(); ++l) {
        if (!std::getline(is, line)) throw ParseError("missing layer block", line_no + 1);
        ++line_no;
        const auto cells = csv::split(line);
        const std::string expect = "W" + std::to_string(l);
        if (cells.size() != 3 || cells[0] != expect) throw ParseError("expected block header " + expect, line_no);
        const auto rows = static_cast<Index>(csv::parse_double(cells[1], line_no));
        const auto cols = static_cast<Index>(csv::parse_double(cells[2], line_no));
        if (rows != widths[l] || cols != widths[l - 1]) throw ParseError("layer shape disagrees with header", line_no);
        net.W.push_back(csv::read_matrix_block(is, rows, cols, line_no));
    }
    net.check();
    return net;
}

}  // namespace ntk_lab

#endif
