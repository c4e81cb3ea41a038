#pragma once

// Spatio-temporal encoder: self-attention over time tokens and over ROI
// tokens, squeeze-excite gating of each branch, and cross fusion
//   Hf[t,m] = Ht[t,m] * As[m] + Hs[m,t] * At[t].

#include "hst/autograd.hpp"
#include "hst/nn.hpp"

#include <algorithm>
#include <string>

namespace hst {

struct EncoderConfig {
    int layers = 2;
    int heads = 4;
    double dropout = 0.0;
    // Learned positions on the temporal branch. ROI tokens are unordered and
    // never get positions.
    bool temporal_positions = true;
    // Compute the ROI gate from the temporal branch's column means instead
    // of the spatial branch.
    bool spatial_gate_from_temporal = false;

    void validate() const {
        if (layers < 1) throw ConfigError("encoder layers must be >= 1");
        if (heads < 1) throw ConfigError("encoder heads must be >= 1");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder dropout must be in [0,1)");
        if (dropout != 0.0) throw ConfigError("encoder dropout is not supported; use 0");
    }
};

inline Eigen::Index excite_bottleneck(Eigen::Index width) { return std::max<Eigen::Index>(4, width / 4); }

// Squeeze-excite gate over N tokens: mean over token width, then
// sigmoid(W2 relu(W1 s + b1) + b2).
struct ExciteGate {
    Linear squeeze;
    Linear expand;

    ExciteGate() = default;
    ExciteGate(ParamStore& ps, const std::string& name, Eigen::Index tokens, Rng& rng)
        : squeeze(ps, name + ".squeeze", tokens, excite_bottleneck(tokens), rng),
          expand(ps, name + ".expand", excite_bottleneck(tokens), tokens, rng) {}

    // s is [B x N] of squeezed token summaries; returns gates [B x N].
    Var from_summary(const Var& s) const { return ag::sigmoid(expand(ag::relu(squeeze(s)))); }

    // H is stacked [(B*N) x C].
    Var operator()(const Var& H, Eigen::Index tokens) const {
        return from_summary(ag::fold_column(ag::row_mean(H), tokens));
    }
};

// Stacked Ht [(B*W) x M], Hs [(B*M) x W], At [B x W], As [B x M] -> [(B*W) x M].
inline Var cross_fuse(const Var& Ht, const Var& Hs, const Var& At, const Var& As) {
    const Eigen::Index W = At.cols(), M = As.cols();
    if (Ht.cols() != M || Hs.cols() != W || Ht.rows() != At.rows() * W || Hs.rows() != As.rows() * M ||
        At.rows() != As.rows())
        throw ShapeError("cross_fuse: inconsistent shapes");
    return ag::add(ag::mul_block_row(Ht, As, W), ag::mul_col(ag::block_transpose(Hs, M), ag::unfold_rows(At)));
}

// Single-window form.
inline Mat cross_fuse(const Mat& Ht, const Mat& Hs, const Vec& At, const Vec& As) {
    if (Hs.rows() != Ht.cols() || Hs.cols() != Ht.rows() || At.size() != Ht.rows() || As.size() != Ht.cols())
        throw ShapeError("cross_fuse: inconsistent shapes");
    ag::NoGradGuard ng;
    return cross_fuse(ag::constant(Ht), ag::constant(Hs), ag::constant(Mat(At.transpose())),
                      ag::constant(Mat(As.transpose())))
        .value();
}

struct FusedRepresentation {
    Var Hf;  // [(B*W) x M]
    Var Ht;  // [(B*W) x M]
    Var Hs;  // [(B*M) x W]
    Var At;  // [B x W]
    Var As;  // [B x M]
};

class SpatioTemporalEncoder {
public:
    SpatioTemporalEncoder() = default;
    SpatioTemporalEncoder(ParamStore& ps, const std::string& name, Eigen::Index window, Eigen::Index rois,
                          const EncoderConfig& cfg, Rng& rng)
        : cfg_(cfg), window_(window), rois_(rois) {
        cfg.validate();
        temporal_ = Transformer(ps, name + ".temporal", rois, cfg.layers, cfg.heads, window, cfg.temporal_positions, rng);
        spatial_ = Transformer(ps, name + ".spatial", window, cfg.layers, cfg.heads, rois, false, rng);
        temporal_gate_ = ExciteGate(ps, name + ".gate_t", window, rng);
        spatial_gate_ = ExciteGate(ps, name + ".gate_s", rois, rng);
    }

    Eigen::Index window() const { return window_; }
    Eigen::Index rois() const { return rois_; }

    // X stacked [(B*W) x M].
    Var temporal(const Var& X) const { return temporal_(X, window_); }
    // X stacked [(B*W) x M] -> [(B*M) x W].
    Var spatial(const Var& X) const { return spatial_(ag::block_transpose(X, window_), rois_); }

    FusedRepresentation forward(const Var& X) const {
        check_input(X);
        FusedRepresentation f;
        f.Ht = temporal(X);
        f.Hs = spatial(X);
        f.At = temporal_gate_(f.Ht, window_);
        if (cfg_.spatial_gate_from_temporal)
            f.As = spatial_gate_.from_summary(ag::block_mean(f.Ht, window_));
        else
            f.As = spatial_gate_(f.Hs, rois_);
        f.Hf = cross_fuse(f.Ht, f.Hs, f.At, f.As);
        return f;
    }

    // Single-window evaluation helpers.
    Mat encode_temporal(const Mat& Xw) const {
        ag::NoGradGuard ng;
        return temporal(checked(Xw)).value();
    }
    Mat encode_spatial(const Mat& Xw) const {
        ag::NoGradGuard ng;
        return spatial(checked(Xw)).value();
    }
    Vec excite_temporal(const Mat& Ht) const {
        ag::NoGradGuard ng;
        return temporal_gate_(ag::constant(Ht), window_).value().row(0).transpose();
    }
    Vec excite_spatial(const Mat& Hs) const {
        ag::NoGradGuard ng;
        return spatial_gate_(ag::constant(Hs), rois_).value().row(0).transpose();
    }

    const Transformer& temporal_transformer() const { return temporal_; }
    const Transformer& spatial_transformer() const { return spatial_; }

private:
    void check_input(const Var& X) const {
        if (X.cols() != rois_ || X.rows() % window_ != 0)
            throw ConfigError("encoder: input " + std::to_string(X.rows()) + "x" + std::to_string(X.cols()) +
                              " incompatible with window " + std::to_string(window_) + " and " +
                              std::to_string(rois_) + " ROIs");
    }
    Var checked(const Mat& Xw) const {
        Var X = ag::constant(Xw);
        check_input(X);
        if (Xw.rows() != window_) throw ConfigError("encoder: expected a single window");
        return X;
    }

    EncoderConfig cfg_;
    Eigen::Index window_ = 0;
    Eigen::Index rois_ = 0;
    Transformer temporal_;
    Transformer spatial_;
    ExciteGate temporal_gate_;
    ExciteGate spatial_gate_;
};

}  // namespace hst
