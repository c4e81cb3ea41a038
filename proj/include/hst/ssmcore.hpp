#pragma once

// Sequence backbones producing transition states h_t and state outputs o_t.
//
// Each backend is an order-1 recurrence run over a stacked batch: inputs are
// [(B*W) x din], outputs [(B*W) x D], and the scan walks t = 0..W-1 with all
// B sequences advanced together. h_0 = 0 for every backend.

#include "hst/autograd.hpp"
#include "hst/nn.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace hst {

enum class Backend { Rnn, Lstm, Gru, SelectiveSsm };

inline std::string to_string(Backend b) {
    switch (b) {
        case Backend::Rnn: return "rnn";
        case Backend::Lstm: return "lstm";
        case Backend::Gru: return "gru";
        case Backend::SelectiveSsm: return "mamba";
    }
    return "?";
}

inline Backend backend_from_string(const std::string& s) {
    if (s == "rnn" || s == "RNN") return Backend::Rnn;
    if (s == "lstm" || s == "LSTM") return Backend::Lstm;
    if (s == "gru" || s == "GRU") return Backend::Gru;
    if (s == "mamba" || s == "ssm" || s == "selective_ssm" || s == "SelectiveSSM") return Backend::SelectiveSsm;
    throw ConfigError("unknown backend '" + s + "'");
}

struct SsmConfig {
    Backend backend = Backend::SelectiveSsm;
    int hidden = 256;
    int layers = 2;
    // Drop the ReLU between the two affine maps of the state head.
    bool linear_state_head = false;

    void validate() const {
        if (hidden < 1) throw ConfigError("ssm hidden must be >= 1");
        if (layers < 1) throw ConfigError("ssm layers must be >= 1");
    }
};

namespace detail {

inline Var zeros_state(Eigen::Index batch, Eigen::Index width) { return ag::constant(Mat::Zero(batch, width)); }

template <typename Step>
Var scan(const Var& pre, Eigen::Index block, Eigen::Index width, Step&& step) {
    const Eigen::Index batch = pre.rows() / block;
    Var h = zeros_state(batch, width);
    std::vector<Var> out;
    out.reserve(static_cast<std::size_t>(block));
    for (Eigen::Index t = 0; t < block; ++t) {
        h = step(h, ag::rows_at(pre, t, block));
        out.push_back(h);
    }
    return ag::stack_steps(out);
}

}  // namespace detail

// h_t = tanh(W_h h_{t-1} + W_x x_t + b_h)
struct RnnCell {
    Linear input;  // W_x, b_h
    Var recurrent;  // W_h [D x D]

    RnnCell() = default;
    RnnCell(ParamStore& ps, const std::string& name, Eigen::Index din, Eigen::Index hidden, Rng& rng)
        : input(ps, name + ".input", din, hidden, rng),
          recurrent(ps.add(name + ".recurrent", uniform_init(hidden, hidden, 1.0 / std::sqrt(double(hidden)), rng))) {}

    Var step_projected(const Var& h_prev, const Var& x_proj) const {
        return ag::tanh(ag::add(x_proj, ag::linear(h_prev, recurrent)));
    }
    Var step(const Var& h_prev, const Var& x) const { return step_projected(h_prev, input(x)); }

    Var run(const Var& u, Eigen::Index block) const {
        return detail::scan(input(u), block, recurrent.rows(),
                            [this](const Var& h, const Var& xp) { return step_projected(h, xp); });
    }
};

// Gate order in the packed projections: input, forget, cell, output.
struct LstmCell {
    Linear input;   // [4D x din]
    Var recurrent;  // [4D x D]

    LstmCell() = default;
    LstmCell(ParamStore& ps, const std::string& name, Eigen::Index din, Eigen::Index hidden, Rng& rng)
        : input(ps, name + ".input", din, 4 * hidden, rng),
          recurrent(ps.add(name + ".recurrent", uniform_init(4 * hidden, hidden, 1.0 / std::sqrt(double(hidden)), rng))) {}

    Eigen::Index hidden() const { return recurrent.cols(); }

    std::pair<Var, Var> step_projected(const Var& h_prev, const Var& c_prev, const Var& x_proj) const {
        const Eigen::Index d = hidden();
        Var pre = ag::add(x_proj, ag::linear(h_prev, recurrent));
        Var i = ag::sigmoid(ag::slice_cols(pre, 0, d));
        Var f = ag::sigmoid(ag::slice_cols(pre, d, d));
        Var g = ag::tanh(ag::slice_cols(pre, 2 * d, d));
        Var o = ag::sigmoid(ag::slice_cols(pre, 3 * d, d));
        Var c = ag::add(ag::mul(f, c_prev), ag::mul(i, g));
        return {ag::mul(o, ag::tanh(c)), c};
    }
    std::pair<Var, Var> step(const Var& h_prev, const Var& c_prev, const Var& x) const {
        return step_projected(h_prev, c_prev, input(x));
    }

    Var run(const Var& u, Eigen::Index block) const {
        const Eigen::Index d = hidden();
        Var c = detail::zeros_state(u.rows() / block, d);
        return detail::scan(input(u), block, d, [&](const Var& h, const Var& xp) {
            auto [h_next, c_next] = step_projected(h, c, xp);
            c = c_next;
            return h_next;
        });
    }
};

// r = sigmoid(.), z = sigmoid(.), n = tanh(x_n + r * (W_hn h + b_hn)),
// h_t = (1 - z) * n + z * h_{t-1}. Gate order: reset, update, candidate.
struct GruCell {
    Linear input;     // [3D x din]
    Linear recurrent;  // [3D x D] with bias

    GruCell() = default;
    GruCell(ParamStore& ps, const std::string& name, Eigen::Index din, Eigen::Index hidden, Rng& rng)
        : input(ps, name + ".input", din, 3 * hidden, rng), recurrent(ps, name + ".recurrent", hidden, 3 * hidden, rng) {}

    Eigen::Index hidden() const { return recurrent.in_features(); }

    Var step_projected(const Var& h_prev, const Var& x_proj) const {
        const Eigen::Index d = hidden();
        Var hp = recurrent(h_prev);
        Var r = ag::sigmoid(ag::add(ag::slice_cols(x_proj, 0, d), ag::slice_cols(hp, 0, d)));
        Var z = ag::sigmoid(ag::add(ag::slice_cols(x_proj, d, d), ag::slice_cols(hp, d, d)));
        Var n = ag::tanh(ag::add(ag::slice_cols(x_proj, 2 * d, d), ag::mul(r, ag::slice_cols(hp, 2 * d, d))));
        // (1 - z) * n + z * h = n + z * (h - n)
        return ag::add(n, ag::mul(z, ag::sub(h_prev, n)));
    }
    Var step(const Var& h_prev, const Var& x) const { return step_projected(h_prev, input(x)); }

    Var run(const Var& u, Eigen::Index block) const {
        return detail::scan(input(u), block, hidden(),
                            [this](const Var& h, const Var& xp) { return step_projected(h, xp); });
    }
};

// Zero-order-hold discretization of a diagonal system:
//   A_bar = exp(dt * a),  B_bar = (dt*a)^{-1} (exp(dt*a) - 1) * dt * B.
struct Discretized {
    Vec a_bar;  // diagonal of A_bar
    Mat b_bar;  // [D x din]
};

inline Discretized zoh_discretize(const Vec& a_diag, const Mat& B, const Vec& dt) {
    if (a_diag.size() != dt.size() || B.rows() != a_diag.size())
        throw ShapeError("zoh_discretize: dimension mismatch");
    for (Eigen::Index i = 0; i < dt.size(); ++i)
        if (!(dt(i) > 0.0)) throw ConfigError("zoh_discretize: step sizes must be positive");
    Discretized out;
    out.a_bar.resize(a_diag.size());
    out.b_bar.resize(B.rows(), B.cols());
    for (Eigen::Index i = 0; i < a_diag.size(); ++i) {
        const double z = dt(i) * a_diag(i);
        out.a_bar(i) = std::exp(z);
        out.b_bar.row(i) = ag::zoh_phi_value(z) * dt(i) * B.row(i);
    }
    return out;
}

// Plain-value view of the selective SSM parameters.
struct SelectiveSsmParams {
    Vec a;        // diagonal evolution, negative
    Mat b;        // [D x din]
    Mat dt_weight;  // [D x din]
    RowVec dt_bias;  // [D]
};

// Diagonal selective state space layer: per-step dt_t = softplus(W_dt x_t + b_dt),
// then h_t = A_bar_t h_{t-1} + B_bar_t x_t with A_bar_t, B_bar_t from zoh_discretize.
struct SelectiveSsmCell {
    Var a_log;   // a = -exp(a_log), [1 x D]
    Linear dt;   // [D x din]
    Var b;       // [D x din]

    SelectiveSsmCell() = default;
    SelectiveSsmCell(ParamStore& ps, const std::string& name, Eigen::Index din, Eigen::Index hidden, Rng& rng) {
        Mat alog(1, hidden), dtb(1, hidden);
        for (Eigen::Index i = 0; i < hidden; ++i) {
            const double frac = hidden > 1 ? double(i) / double(hidden - 1) : 0.0;
            alog(0, i) = std::log(std::pow(10.0, -3.0 + 3.0 * frac));   // |a| in [1e-3, 1]
            const double dt0 = std::pow(10.0, -3.0 + 2.0 * frac);         // dt in [1e-3, 1e-1]
            dtb(0, i) = std::log(std::expm1(dt0));
        }
        a_log = ps.add(name + ".a_log", alog);
        dt = Linear(ps, name + ".dt", din, hidden, rng);
        dt.bias.mutable_value() = dtb;
        b = ps.add(name + ".b", uniform_init(hidden, din, 1.0 / std::sqrt(double(din)), rng));
    }

    Eigen::Index hidden() const { return b.rows(); }

    SelectiveSsmParams params() const {
        SelectiveSsmParams p;
        p.a = -a_log.value().row(0).array().exp().transpose();
        p.b = b.value();
        p.dt_weight = dt.weight.value();
        p.dt_bias = dt.bias.value().row(0);
        return p;
    }

    // Returns (A_bar, drive) for stacked inputs, drive = B_bar x.
    std::pair<Var, Var> discretize(const Var& x) const {
        Var step = ag::softplus(dt(x));
        Var a = ag::scale(ag::exp(a_log), -1.0);
        Var z = ag::mul_row(step, a);
        Var a_bar = ag::exp(z);
        Var drive = ag::mul(ag::mul(ag::zoh_phi(z), step), ag::linear(x, b));
        return {a_bar, drive};
    }

    Var step(const Var& h_prev, const Var& x) const {
        auto [a_bar, drive] = discretize(x);
        return ag::add(ag::mul(a_bar, h_prev), drive);
    }

    Var run(const Var& u, Eigen::Index block) const {
        auto [a_bar, drive] = discretize(u);
        Var packed = ag::concat_cols({a_bar, drive});
        const Eigen::Index d = hidden();
        return detail::scan(packed, block, d, [d](const Var& h, const Var& p) {
            return ag::add(ag::mul(ag::slice_cols(p, 0, d), h), ag::slice_cols(p, d, d));
        });
    }
};

// Single-sequence scan, x is [W x din].
inline Mat selective_scan(const Mat& x, const SelectiveSsmCell& cell) {
    ag::NoGradGuard ng;
    return cell.run(ag::constant(x), x.rows()).value();
}

// o_t = W2 act(W1 [h_{t-1} ; x_t] + b1) + b2
struct StateHead {
    Linear first;
    Linear second;
    bool linear = false;

    StateHead() = default;
    StateHead(ParamStore& ps, const std::string& name, Eigen::Index hidden, Eigen::Index din, bool linear_, Rng& rng)
        : first(ps, name + ".first", hidden + din, hidden, rng), second(ps, name + ".second", hidden, hidden, rng),
          linear(linear_) {}

    Var operator()(const Var& h_prev, const Var& x) const {
        Var a = first(ag::concat_cols({h_prev, x}));
        return second(linear ? a : ag::relu(a));
    }
};

using RecurrentLayer = std::variant<RnnCell, LstmCell, GruCell, SelectiveSsmCell>;

struct StatePair {
    Var h_seq;  // [(B*W) x D] transition representations
    Var o_seq;  // [(B*W) x D] state representations
};

class SsmBackbone {
public:
    SsmBackbone() = default;
    SsmBackbone(ParamStore& ps, const std::string& name, Eigen::Index din, const SsmConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const Eigen::Index d = cfg.hidden;
        input_ = Linear(ps, name + ".input", din, d, rng);
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string ln = name + ".layer" + std::to_string(l);
            switch (cfg.backend) {
                case Backend::Rnn: layers_.emplace_back(RnnCell(ps, ln, d, d, rng)); break;
                case Backend::Lstm: layers_.emplace_back(LstmCell(ps, ln, d, d, rng)); break;
                case Backend::Gru: layers_.emplace_back(GruCell(ps, ln, d, d, rng)); break;
                case Backend::SelectiveSsm: layers_.emplace_back(SelectiveSsmCell(ps, ln, d, d, rng)); break;
                default: throw ConfigError("unknown backend");
            }
        }
        head_ = StateHead(ps, name + ".head", d, din, cfg.linear_state_head, rng);
    }

    const SsmConfig& config() const { return cfg_; }
    Eigen::Index input_width() const { return input_.in_features(); }
    const Linear& input_projection() const { return input_; }
    const std::vector<RecurrentLayer>& layers() const { return layers_; }
    const StateHead& head() const { return head_; }

    // Hf is stacked [(B*W) x din].
    StatePair forward(const Var& Hf, Eigen::Index window) const {
        if (Hf.cols() != input_width()) throw ShapeError("ssm backbone: input width mismatch");
        Var u = input_(Hf);
        for (const auto& layer : layers_) u = std::visit([&](const auto& cell) { return cell.run(u, window); }, layer);
        StatePair out;
        out.h_seq = u;
        out.o_seq = head_(ag::shift_in_blocks(u, window), Hf);
        return out;
    }

    // Single-window form returning values.
    std::pair<Mat, Mat> run(const Mat& Hf) const {
        ag::NoGradGuard ng;
        auto sp = forward(ag::constant(Hf), Hf.rows());
        return {sp.h_seq.value(), sp.o_seq.value()};
    }

private:
    SsmConfig cfg_;
    Linear input_;
    std::vector<RecurrentLayer> layers_;
    StateHead head_;
};

}  // namespace hst
