#pragma once

// Full tokenizer: spatio-temporal encoder -> sequence backbone -> hierarchical
// quantizer -> decoder, plus the downstream MLP classifier head.

#include "hst/autograd.hpp"
#include "hst/hquant.hpp"
#include "hst/nn.hpp"
#include "hst/recon.hpp"
#include "hst/ssmcore.hpp"
#include "hst/stencoder.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hst {

struct ClassifierConfig {
    int hidden1 = 256;
    int hidden2 = 64;
    int classes = 2;
    // Pool the unquantized (o, h) features instead of the quantized embeddings.
    bool continuous_input = false;

    void validate() const {
        if (hidden1 < 1 || hidden2 < 1) throw ConfigError("classifier widths must be positive");
        if (classes != 2) throw ConfigError("only binary classification is supported");
    }
};

struct HstConfig {
    int rois = 16;
    int window = 100;
    EncoderConfig encoder;
    SsmConfig ssm;
    QuantConfig quant;
    DecoderConfig decoder;
    LossWeights loss;
    ClassifierConfig classifier;

    void validate() const {
        if (rois < 1) throw ConfigError("rois must be >= 1");
        if (window < 2) throw ConfigError("window must be >= 2");
        encoder.validate();
        ssm.validate();
        quant.validate();
        loss.validate();
        classifier.validate();
    }
};

inline Var stack_windows(const std::vector<Mat>& windows) {
    if (windows.empty()) throw ShapeError("stack_windows: no windows");
    const Eigen::Index W = windows[0].rows(), M = windows[0].cols();
    Mat X(W * static_cast<Eigen::Index>(windows.size()), M);
    for (std::size_t b = 0; b < windows.size(); ++b) {
        if (windows[b].rows() != W || windows[b].cols() != M) throw ShapeError("stack_windows: ragged windows");
        X.middleRows(static_cast<Eigen::Index>(b) * W, W) = windows[b];
    }
    return ag::constant(std::move(X));
}

inline std::vector<Eigen::Index> to_index(const std::vector<int>& v) { return {v.begin(), v.end()}; }

struct TokenizerForward {
    Loss loss;
    Var x_hat;
    TokenizedSequence tokens;  // stacked over the batch
    Mat o;                     // continuous state features
    Mat h;                     // continuous transition features
    Mat o_first;               // level-one codes per row
    Mat h_first;
};

class HstModel {
public:
    HstModel(const HstConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg.validate();
        Rng rng(seed);
        encoder_ = SpatioTemporalEncoder(params_, "encoder", cfg.window, cfg.rois, cfg.encoder, rng);
        ssm_ = SsmBackbone(params_, "ssm", cfg.rois, cfg.ssm, rng);
        quant_ = HierarchicalQuantizer(params_, "quant", cfg.ssm.hidden, cfg.quant, rng);
        decoder_ = Decoder(params_, "decoder", cfg.ssm.hidden, cfg.window, cfg.rois, cfg.decoder, rng);
        const Eigen::Index d = cfg.ssm.hidden;
        cls1_ = Linear(params_, "classifier.fc1", 2 * d, cfg.classifier.hidden1, rng);
        cls2_ = Linear(params_, "classifier.fc2", cfg.classifier.hidden1, cfg.classifier.hidden2, rng);
        cls3_ = Linear(params_, "classifier.fc3", cfg.classifier.hidden2, cfg.classifier.classes, rng);
    }

    HstModel(const HstModel&) = delete;
    HstModel& operator=(const HstModel&) = delete;

    const HstConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const SpatioTemporalEncoder& encoder() const { return encoder_; }
    const SsmBackbone& backbone() const { return ssm_; }
    HierarchicalQuantizer& quantizer() { return quant_; }
    const HierarchicalQuantizer& quantizer() const { return quant_; }
    const Decoder& decoder() const { return decoder_; }

    bool codebooks_initialized() const { return codebooks_initialized_; }
    void set_codebooks_initialized(bool v) { codebooks_initialized_ = v; }

    static std::vector<std::string> tokenizer_prefixes() { return {"encoder.", "ssm.", "quant.", "decoder."}; }
    static std::vector<std::string> classifier_prefixes() { return {"encoder.", "ssm.", "classifier."}; }

    StatePair encode(const Var& X) const {
        auto fused = encoder_.forward(X);
        return ssm_.forward(fused.Hf, cfg_.window);
    }

    void initialize_codebooks(const std::vector<Mat>& windows, Rng& rng) {
        ag::NoGradGuard ng;
        auto sp = encode(stack_windows(windows));
        quant_.initialize_from(sp.o_seq.value(), sp.h_seq.value(), rng);
        codebooks_initialized_ = true;
    }

    TokenizerForward forward_tokenizer(const std::vector<Mat>& windows) const {
        Var X = stack_windows(windows);
        auto sp = encode(X);
        TokenizerForward out;
        out.o = sp.o_seq.value();
        out.h = sp.h_seq.value();
        out.tokens = quant_.quantize_pair(out.o, out.h);

        LossInputs li;
        li.x = X;
        li.o = sp.o_seq;
        li.h = sp.h_seq;
        if (quant_.mode() == QuantMode::Continuous) {
            // Unquantized latent with a unit Gaussian prior penalty in place of
            // the codebook terms.
            out.x_hat = decoder_(sp.o_seq, sp.h_seq);
            Var recon = ag::mse(out.x_hat, X);
            Var zero_o = ag::constant(Mat::Zero(out.o.rows(), out.o.cols()));
            Var prior_o = ag::scale(ag::mean_row_sqdist(sp.o_seq, zero_o), 0.5);
            Var prior_h = ag::scale(ag::mean_row_sqdist(sp.h_seq, ag::constant(Mat::Zero(out.h.rows(), out.h.cols()))), 0.5);
            out.loss.parts.recon = recon.scalar();
            out.loss.parts.state_cb = prior_o.scalar();
            out.loss.parts.transition_cb = prior_h.scalar();
            out.loss.total = ag::add_scalars({{cfg_.loss.alpha, recon}, {cfg_.loss.beta, prior_o}, {cfg_.loss.beta, prior_h}});
            out.loss.parts.total = out.loss.total.scalar();
            out.o_first = out.o;
            out.h_first = out.h;
            return out;
        }

        li.o_hat = ag::gather_rows(quant_.state().vectors, to_index(out.tokens.state_tokens));
        li.h_hat = ag::gather_rows(quant_.transition().vectors, to_index(out.tokens.transition_tokens));
        out.o_first = li.o_hat.value();
        out.h_first = li.h_hat.value();
        if (quant_.hierarchical()) {
            li.e_o = ag::gather_rows(quant_.state_residual().vectors, to_index(out.tokens.state_residual_tokens));
            li.e_h = ag::gather_rows(quant_.transition_residual_book().vectors,
                                     to_index(out.tokens.transition_residual_tokens));
        }
        Var qs = ag::straight_through(sp.o_seq, out.tokens.quantized_states);
        Var qt = ag::straight_through(sp.h_seq, out.tokens.quantized_transitions);
        out.x_hat = decoder_(qs, qt);
        li.x_hat = out.x_hat;
        out.loss = total_loss(li, cfg_.loss);
        return out;
    }

    // Count update and revival for every active codebook, using the features
    // and assignments of one forward pass.
    void revive(const TokenizerForward& fw) {
        if (quant_.mode() == QuantMode::Continuous || !cfg_.quant.revival) return;
        cluster_revive_update(quant_.state(), fw.o, fw.tokens.state_tokens);
        cluster_revive_update(quant_.transition(), fw.h, fw.tokens.transition_tokens);
        if (!quant_.hierarchical()) return;
        const Mat o_res = fw.o - fw.o_first;
        const Mat h_res = fw.h - fw.h_first;
        if (cfg_.quant.transition_residual_uses_state_book) {
            Mat feats(o_res.rows() + h_res.rows(), o_res.cols());
            feats << o_res, h_res;
            std::vector<int> idx = fw.tokens.state_residual_tokens;
            idx.insert(idx.end(), fw.tokens.transition_residual_tokens.begin(), fw.tokens.transition_residual_tokens.end());
            cluster_revive_update(quant_.state_residual(), feats, idx);
        } else {
            cluster_revive_update(quant_.state_residual(), o_res, fw.tokens.state_residual_tokens);
            cluster_revive_update(quant_.transition_residual(), h_res, fw.tokens.transition_residual_tokens);
        }
    }

    void enforce_codebook_pins() {
        for (auto* b : quant_.books()) b->enforce_pins();
    }

    // Per-window [B x 2D] pooled embedding fed to the classifier.
    Var pooled_embedding(const std::vector<Mat>& windows) const {
        auto sp = encode(stack_windows(windows));
        Var qs, qt;
        if (cfg_.classifier.continuous_input || quant_.mode() == QuantMode::Continuous) {
            qs = sp.o_seq;
            qt = sp.h_seq;
        } else {
            auto tokens = quant_.quantize_pair(sp.o_seq.value(), sp.h_seq.value());
            qs = ag::straight_through(sp.o_seq, tokens.quantized_states);
            qt = ag::straight_through(sp.h_seq, tokens.quantized_transitions);
        }
        return ag::block_mean(ag::concat_cols({qs, qt}), cfg_.window);
    }

    Var classify_pooled(const Var& pooled) const { return cls3_(ag::relu(cls2_(ag::relu(cls1_(pooled))))); }

    Var classifier_logits(const std::vector<Mat>& windows) const { return classify_pooled(pooled_embedding(windows)); }

    // Per-window class probabilities [B x classes].
    Mat predict_proba(const std::vector<Mat>& windows) const {
        ag::NoGradGuard ng;
        return ag::softmax_rows(classifier_logits(windows).value());
    }

    std::vector<TokenizedSequence> tokenize(const std::vector<Mat>& windows) const {
        ag::NoGradGuard ng;
        auto sp = encode(stack_windows(windows));
        auto all = quant_.quantize_pair(sp.o_seq.value(), sp.h_seq.value());
        std::vector<TokenizedSequence> out;
        for (std::size_t b = 0; b < windows.size(); ++b)
            out.push_back(all.slice(static_cast<Eigen::Index>(b) * cfg_.window, cfg_.window));
        return out;
    }

    std::vector<Mat> reconstruct(const std::vector<Mat>& windows) const {
        ag::NoGradGuard ng;
        auto fw = forward_tokenizer(windows);
        std::vector<Mat> out;
        for (std::size_t b = 0; b < windows.size(); ++b)
            out.emplace_back(fw.x_hat.value().middleRows(static_cast<Eigen::Index>(b) * cfg_.window, cfg_.window));
        return out;
    }

private:
    HstConfig cfg_;
    ParamStore params_;
    SpatioTemporalEncoder encoder_;
    SsmBackbone ssm_;
    HierarchicalQuantizer quant_;
    Decoder decoder_;
    Linear cls1_, cls2_, cls3_;
    bool codebooks_initialized_ = false;
};

}  // namespace hst
