#pragma once

#include "hst/autograd.hpp"
#include "hst/errors.hpp"
#include "hst/rng.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace hst {

using ag::Var;

// Named trainable tensors. Iteration order is the lexicographic name order,
// which is also the on-disk order in checkpoints.
class ParamStore {
public:
    Var add(const std::string& name, Mat init) {
        if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        Var v = ag::parameter(std::move(init));
        params_.emplace(name, v);
        return v;
    }

    const Var& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, Var>& all() const { return params_; }

    std::vector<Var> with_prefix(const std::vector<std::string>& prefixes) const {
        std::vector<Var> out;
        for (const auto& [name, v] : params_)
            for (const auto& p : prefixes)
                if (name.compare(0, p.size(), p) == 0) {
                    out.push_back(v);
                    break;
                }
        return out;
    }

    void zero_grad() {
        for (auto& [_, v] : params_) v.zero_grad();
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
        return n;
    }

private:
    std::map<std::string, Var> params_;
};

inline Mat uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
    return m;
}

struct Linear {
    Var weight;  // [out x in]
    Var bias;    // [1 x out]

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = ps.add(name + ".weight", uniform_init(out, in, bound, rng));
        bias = ps.add(name + ".bias", uniform_init(1, out, bound, rng));
    }

    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
    Eigen::Index in_features() const { return weight.cols(); }
    Eigen::Index out_features() const { return weight.rows(); }
};

struct LayerNorm {
    Var gain;
    Var bias;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, Eigen::Index width) {
        gain = ps.add(name + ".gain", Mat::Ones(1, width));
        bias = ps.add(name + ".bias", Mat::Zero(1, width));
    }

    Var operator()(const Var& x) const { return ag::layer_norm(x, gain, bias); }
};

// Pre-norm transformer encoder block operating on stacked sequences.
struct TransformerBlock {
    LayerNorm norm1;
    Linear qkv;
    Linear proj;
    LayerNorm norm2;
    Linear ff1;
    Linear ff2;
    int heads = 1;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& ps, const std::string& name, Eigen::Index width, int heads_, Rng& rng)
        : heads(heads_) {
        if (heads <= 0 || width % heads != 0)
            throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by " +
                              std::to_string(heads) + " heads");
        norm1 = LayerNorm(ps, name + ".norm1", width);
        qkv = Linear(ps, name + ".qkv", width, 3 * width, rng);
        proj = Linear(ps, name + ".proj", width, width, rng);
        norm2 = LayerNorm(ps, name + ".norm2", width);
        ff1 = Linear(ps, name + ".ff1", width, 2 * width, rng);
        ff2 = Linear(ps, name + ".ff2", 2 * width, width, rng);
    }

    Var operator()(const Var& x, Eigen::Index block) const {
        const Eigen::Index w = x.cols();
        Var y = norm1(x);
        Var packed = qkv(y);
        Var attn = ag::block_attention(ag::slice_cols(packed, 0, w), ag::slice_cols(packed, w, w),
                                       ag::slice_cols(packed, 2 * w, w), heads, block);
        Var h = ag::add(x, proj(attn));
        return ag::add(h, ff2(ag::relu(ff1(norm2(h)))));
    }
};

// Stack of dimension-preserving blocks with an optional learned positional table.
struct Transformer {
    std::vector<TransformerBlock> blocks;
    Var positional;  // [N x width] or undefined
    Eigen::Index width = 0;

    Transformer() = default;
    Transformer(ParamStore& ps, const std::string& name, Eigen::Index width_, int layers, int heads,
                Eigen::Index positions, bool learned_positions, Rng& rng)
        : width(width_) {
        if (layers <= 0) throw ConfigError(name + ": layers must be positive");
        for (int l = 0; l < layers; ++l)
            blocks.emplace_back(ps, name + ".block" + std::to_string(l), width, heads, rng);
        if (learned_positions) positional = ps.add(name + ".positional", uniform_init(positions, width, 0.02, rng));
    }

    Var operator()(Var x, Eigen::Index block) const {
        if (x.cols() != width)
            throw ShapeError("transformer: token width " + std::to_string(x.cols()) + " != " + std::to_string(width));
        if (positional.defined()) {
            if (positional.rows() != block) throw ShapeError("transformer: sequence length differs from positional table");
            x = ag::add_block(x, positional);
        }
        for (const auto& b : blocks) x = b(x, block);
        return x;
    }
};

struct AdamConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.push_back(Mat::Zero(p.rows(), p.cols()));
            v_.push_back(Mat::Zero(p.rows(), p.cols()));
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const Mat& g = params_[i].grad();
            if (g.size() == 0) continue;
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
            params_[i].mutable_value().array() -=
                cfg_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<Var> params_;
    AdamConfig cfg_;
    std::vector<Mat> m_;
    std::vector<Mat> v_;
    long t_ = 0;
};

}  // namespace hst
