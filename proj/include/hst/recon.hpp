#pragma once

// Transformer decoder over concatenated quantized state/transition embeddings
// and the tokenizer objective
//
//   L = alpha ||x - x_hat||^2
//     + beta  (||sg(o) - o_hat||^2 + ||sg(h) - h_hat||^2)
//     + gamma (||sg(o - o_hat) - e_o||^2 + ||sg(h - h_hat) - e_h||^2)
//
// Reconstruction is mean-reduced over W x M; codebook terms are the squared
// L2 distance per time step, averaged over time steps.

#include "hst/autograd.hpp"
#include "hst/hquant.hpp"
#include "hst/nn.hpp"

#include <string>

namespace hst {

struct LossWeights {
    double alpha = 1.0;
    double beta = 0.1;
    double gamma_loss = 0.1;
    // ||o - sg(o_hat)||^2 weight; zero reproduces the objective exactly as stated.
    double commitment = 0.0;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0 || gamma_loss < 0.0 || commitment < 0.0)
            throw ConfigError("loss weights must be non-negative");
    }
};

struct LossBreakdown {
    double total = 0.0;
    double recon = 0.0;
    double state_cb = 0.0;
    double state_res_cb = 0.0;
    double transition_cb = 0.0;
    double transition_res_cb = 0.0;
    double commitment = 0.0;
};

struct Loss {
    Var total;
    LossBreakdown parts;
};

// Terms of the objective. o_hat / h_hat / e_o / e_h are the codebook rows
// selected for each time step (gathered from trainable codebook tensors, so
// the codebook terms train codebooks only). Residual codes may be left
// undefined for single-level quantization.
struct LossInputs {
    Var x;
    Var x_hat;
    Var o;
    Var o_hat;
    Var e_o;
    Var h;
    Var h_hat;
    Var e_h;
};

inline Loss total_loss(const LossInputs& in, const LossWeights& w) {
    w.validate();
    Loss out;
    std::vector<std::pair<double, Var>> terms;

    Var recon = ag::mse(in.x_hat, in.x);
    out.parts.recon = recon.scalar();
    terms.emplace_back(w.alpha, recon);

    auto first_level = [&](const Var& z, const Var& zq, double& slot) {
        Var t = ag::mean_row_sqdist(ag::detach(z), zq);
        slot = t.scalar();
        terms.emplace_back(w.beta, t);
    };
    auto residual_level = [&](const Var& z, const Var& zq, const Var& e, double& slot) {
        if (!e.defined()) return;
        Var target = ag::constant(z.value() - zq.value());
        Var t = ag::mean_row_sqdist(target, e);
        slot = t.scalar();
        terms.emplace_back(w.gamma_loss, t);
    };
    first_level(in.o, in.o_hat, out.parts.state_cb);
    residual_level(in.o, in.o_hat, in.e_o, out.parts.state_res_cb);
    first_level(in.h, in.h_hat, out.parts.transition_cb);
    residual_level(in.h, in.h_hat, in.e_h, out.parts.transition_res_cb);

    if (w.commitment > 0.0) {
        Var c = ag::add_scalars({{1.0, ag::mean_row_sqdist(in.o, ag::detach(in.o_hat))},
                                 {1.0, ag::mean_row_sqdist(in.h, ag::detach(in.h_hat))}});
        out.parts.commitment = c.scalar();
        terms.emplace_back(w.commitment, c);
    }

    out.total = ag::add_scalars(terms);
    out.parts.total = out.total.scalar();
    return out;
}

struct DecoderConfig {
    int layers = 2;
    int heads = 4;
};

class Decoder {
public:
    Decoder() = default;
    Decoder(ParamStore& ps, const std::string& name, Eigen::Index latent, Eigen::Index window, Eigen::Index rois,
            const DecoderConfig& cfg, Rng& rng)
        : latent_(latent), window_(window) {
        body_ = Transformer(ps, name + ".body", 2 * latent, cfg.layers, cfg.heads, window, true, rng);
        out_ = Linear(ps, name + ".out", 2 * latent, rois, rng);
    }

    // qs, qt stacked [(B*W) x D] -> [(B*W) x M].
    Var operator()(const Var& qs, const Var& qt) const {
        if (qs.cols() != latent_ || qt.cols() != latent_)
            throw ShapeError("decode: embedding width " + std::to_string(qs.cols()) + "/" + std::to_string(qt.cols()) +
                             " != " + std::to_string(latent_));
        return out_(body_(ag::concat_cols({qs, qt}), window_));
    }

    Mat decode(const TokenizedSequence& tokens) const {
        if (tokens.quantized_states.rows() == 0 || tokens.quantized_transitions.rows() == 0)
            throw ShapeError("decode: missing quantized embeddings");
        ag::NoGradGuard ng;
        return (*this)(ag::constant(tokens.quantized_states), ag::constant(tokens.quantized_transitions)).value();
    }

    const Transformer& body() const { return body_; }
    const Linear& output() const { return out_; }

private:
    Eigen::Index latent_ = 0;
    Eigen::Index window_ = 0;
    Transformer body_;
    Linear out_;
};

}  // namespace hst
