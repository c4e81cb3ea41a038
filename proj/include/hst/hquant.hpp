#pragma once

// Hierarchical refined-cluster vector quantizer.
//
// Level one quantizes state outputs o_t and transition states h_t against
// separate codebooks. Level two quantizes each level-one residual against an
// error-feedback codebook whose index 0 is pinned to the zero vector, so the
// second stage can never increase the quantization error. Rarely used codes
// are pulled toward the batch feature nearest to them with weight
//   alpha_j = exp(-N_j * K * 10 / (1 - gamma)),  N_j <- gamma N_j + (1 - gamma) n_j.

#include "hst/autograd.hpp"
#include "hst/errors.hpp"
#include "hst/nn.hpp"
#include "hst/rng.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace hst {

enum class CodebookRole { State, Transition, StateResidual, TransitionResidual };

inline std::string to_string(CodebookRole r) {
    switch (r) {
        case CodebookRole::State: return "state";
        case CodebookRole::Transition: return "transition";
        case CodebookRole::StateResidual: return "state_residual";
        case CodebookRole::TransitionResidual: return "transition_residual";
    }
    return "?";
}

struct Codebook {
    Var vectors;  // [K x D], trainable
    Vec counts;   // EMA usage N_j
    double gamma = 0.99;
    CodebookRole role = CodebookRole::State;
    bool pin_zero = false;  // row 0 held at the zero vector

    Codebook() = default;
    Codebook(Var v, double gamma_, CodebookRole role_, bool pin_zero_)
        : vectors(std::move(v)), counts(Vec::Zero(vectors.rows())), gamma(gamma_), role(role_), pin_zero(pin_zero_) {
        validate();
        enforce_pins();
    }

    Eigen::Index size() const { return vectors.rows(); }
    Eigen::Index dim() const { return vectors.cols(); }
    const Mat& codes() const { return vectors.value(); }

    void validate() const {
        if (vectors.rows() < 2) throw ConfigError("codebook " + to_string(role) + ": K must be >= 2");
        if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("codebook " + to_string(role) + ": gamma must be in (0,1)");
        if (!vectors.value().allFinite()) throw ValidationError("codebook " + to_string(role) + ": non-finite vectors");
        if ((counts.array() < 0.0).any()) throw ValidationError("codebook " + to_string(role) + ": negative counts");
    }

    void enforce_pins() {
        if (pin_zero) vectors.mutable_value().row(0).setZero();
    }
};

struct Assignment {
    int index = 0;
    RowVec code;
};

// Index of the nearest code by Euclidean distance; ties go to the lowest index.
template <typename Row>
int nearest_index(const Row& z, const Mat& codes) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < codes.rows(); ++k) {
        const double d = (codes.row(k) - z).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

inline Assignment nearest_assign(const RowVec& z, const Codebook& cb) {
    if (cb.size() == 0) throw ConfigError("nearest_assign: empty codebook");
    if (z.size() != cb.dim()) throw ShapeError("nearest_assign: dimension mismatch");
    if (!z.allFinite()) throw ValidationError("nearest_assign: non-finite input");
    Assignment a;
    a.index = nearest_index(z, cb.codes());
    a.code = cb.codes().row(a.index);
    return a;
}

inline Assignment residual_assign(const RowVec& z, const RowVec& first_code, const Codebook& cb_res) {
    if (z.size() != first_code.size()) throw ShapeError("residual_assign: dimension mismatch");
    return nearest_assign(z - first_code, cb_res);
}

struct QuantizationResult {
    int index = 0;
    RowVec code;
    int residual_index = 0;
    RowVec residual_code;
    double error_first = 0.0;  // ||z - code||
    double error_post = 0.0;   // ||z - code - residual_code||
};

inline QuantizationResult quantize(const RowVec& z, const Codebook& cb, const Codebook& cb_res) {
    QuantizationResult r;
    auto first = nearest_assign(z, cb);
    auto second = residual_assign(z, first.code, cb_res);
    r.index = first.index;
    r.code = first.code;
    r.residual_index = second.index;
    r.residual_code = second.code;
    r.error_first = (z - r.code).norm();
    r.error_post = (z - r.code - r.residual_code).norm();
    return r;
}

// Row-wise nearest assignment for a feature matrix.
inline std::vector<int> assign_rows(const Mat& Z, const Mat& codes) {
    if (Z.cols() != codes.cols()) throw ShapeError("assign_rows: dimension mismatch");
    if (!Z.allFinite()) throw ValidationError("assign_rows: non-finite features");
    std::vector<int> idx(static_cast<std::size_t>(Z.rows()));
    for (Eigen::Index i = 0; i < Z.rows(); ++i) idx[static_cast<std::size_t>(i)] = nearest_index(Z.row(i), codes);
    return idx;
}

inline Mat gather_codes(const Mat& codes, const std::vector<int>& idx) {
    Mat out(static_cast<Eigen::Index>(idx.size()), codes.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = codes.row(idx[i]);
    return out;
}

inline double revival_weight(double count, Eigen::Index K, double gamma) {
    return std::exp(-count * static_cast<double>(K) * 10.0 / (1.0 - gamma));
}

struct RevivalReport {
    int moved = 0;        // codes whose vector changed
    int fully_revived = 0;  // codes with alpha == 1
};

// Count update first, then every code moves toward its nearest batch feature
// with weight computed from the updated count. Empty batches leave codes in
// place but still decay the counts.
inline RevivalReport cluster_revive_update(Codebook& cb, const Mat& features, const std::vector<int>& assignments) {
    if (static_cast<Eigen::Index>(assignments.size()) != features.rows())
        throw ShapeError("cluster_revive_update: assignment count mismatch");
    if (features.rows() > 0 && features.cols() != cb.dim())
        throw ShapeError("cluster_revive_update: feature width mismatch");
    const Eigen::Index K = cb.size();
    Vec n = Vec::Zero(K);
    for (int a : assignments) {
        if (a < 0 || a >= K) throw ShapeError("cluster_revive_update: assignment out of range");
        n(a) += 1.0;
    }
    cb.counts = cb.gamma * cb.counts + (1.0 - cb.gamma) * n;

    RevivalReport report;
    if (features.rows() == 0) return report;
    Mat& codes = cb.vectors.mutable_value();
    for (Eigen::Index j = 0; j < K; ++j) {
        if (cb.pin_zero && j == 0) continue;
        const double alpha = revival_weight(cb.counts(j), K, cb.gamma);
        if (alpha == 0.0) continue;
        const int nearest = nearest_index(codes.row(j), features);
        codes.row(j) = codes.row(j) * (1.0 - alpha) + features.row(nearest) * alpha;
        ++report.moved;
        if (alpha == 1.0) ++report.fully_revived;
    }
    return report;
}

struct CodebookMetrics {
    std::vector<long> usage;
    double perplexity = 0.0;
    int dead_codes = 0;
};

inline CodebookMetrics codebook_metrics(const std::vector<int>& assignments, Eigen::Index K) {
    CodebookMetrics m;
    m.usage.assign(static_cast<std::size_t>(K), 0);
    for (int a : assignments) {
        if (a < 0 || a >= K) throw ShapeError("codebook_metrics: assignment out of range");
        ++m.usage[static_cast<std::size_t>(a)];
    }
    double entropy = 0.0;
    const double total = static_cast<double>(assignments.size());
    for (long u : m.usage) {
        if (u == 0) {
            ++m.dead_codes;
            continue;
        }
        const double p = static_cast<double>(u) / total;
        entropy -= p * std::log(p);
    }
    m.perplexity = assignments.empty() ? 0.0 : std::exp(entropy);
    return m;
}

// k-means++ seeding: first center uniform, then proportional to squared
// distance from the nearest chosen center. Rows of `fixed` count as centers
// chosen beforehand and are not returned.
inline Mat kmeanspp_seed(const Mat& features, Eigen::Index K, Rng& rng, const Mat& fixed = Mat()) {
    if (features.rows() == 0) throw ValidationError("kmeanspp_seed: no features");
    Mat centers(K, features.cols());
    std::vector<double> d2(static_cast<std::size_t>(features.rows()), std::numeric_limits<double>::infinity());
    auto next_pick = [&](double total) {
        // With zero mass every feature coincides with a center; repeat one.
        return total > 0.0 ? rng.categorical(d2) : rng.index(static_cast<std::size_t>(features.rows()));
    };
    std::size_t pick;
    if (fixed.rows() > 0) {
        double total = 0.0;
        for (Eigen::Index i = 0; i < features.rows(); ++i) {
            auto& d = d2[static_cast<std::size_t>(i)];
            for (Eigen::Index f = 0; f < fixed.rows(); ++f) d = std::min(d, (features.row(i) - fixed.row(f)).squaredNorm());
            total += d;
        }
        pick = next_pick(total);
    } else {
        pick = rng.index(static_cast<std::size_t>(features.rows()));
    }
    for (Eigen::Index k = 0; k < K; ++k) {
        centers.row(k) = features.row(static_cast<Eigen::Index>(pick));
        double total = 0.0;
        for (Eigen::Index i = 0; i < features.rows(); ++i) {
            auto& d = d2[static_cast<std::size_t>(i)];
            d = std::min(d, (features.row(i) - centers.row(k)).squaredNorm());
            total += d;
        }
        if (k + 1 == K) break;
        pick = next_pick(total);
    }
    return centers;
}

enum class QuantMode { Hierarchical, Flat, Continuous };

inline std::string to_string(QuantMode m) {
    switch (m) {
        case QuantMode::Hierarchical: return "hierarchical";
        case QuantMode::Flat: return "flat";
        case QuantMode::Continuous: return "continuous";
    }
    return "?";
}

inline QuantMode quant_mode_from_string(const std::string& s) {
    if (s == "hierarchical") return QuantMode::Hierarchical;
    if (s == "flat") return QuantMode::Flat;
    if (s == "continuous") return QuantMode::Continuous;
    throw ConfigError("unknown quantizer mode '" + s + "'");
}

struct QuantConfig {
    int state_codes = 8;
    int transition_codes = 8;
    int state_residual_codes = 8;
    int transition_residual_codes = 8;
    double gamma = 0.99;
    QuantMode mode = QuantMode::Hierarchical;
    // Quantize the transition residual against the state residual codebook,
    // as the error-feedback formula is printed.
    bool transition_residual_uses_state_book = false;
    bool revival = true;

    void validate() const {
        for (int k : {state_codes, transition_codes, state_residual_codes, transition_residual_codes})
            if (k < 2) throw ConfigError("codebook sizes must be >= 2");
        if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must be in (0,1)");
    }
};

// Token stream for one window (or a stacked batch of windows).
struct TokenizedSequence {
    std::vector<int> state_tokens;
    std::vector<int> transition_tokens;
    std::vector<int> state_residual_tokens;       // empty unless hierarchical
    std::vector<int> transition_residual_tokens;  // empty unless hierarchical
    Mat quantized_states;                         // [W x D]
    Mat quantized_transitions;                    // [W x D]

    std::size_t length() const { return static_cast<std::size_t>(quantized_states.rows()); }

    TokenizedSequence slice(Eigen::Index start, Eigen::Index count) const {
        auto sub = [&](const std::vector<int>& v) {
            if (v.empty()) return std::vector<int>{};
            return std::vector<int>(v.begin() + start, v.begin() + start + count);
        };
        TokenizedSequence s;
        s.state_tokens = sub(state_tokens);
        s.transition_tokens = sub(transition_tokens);
        s.state_residual_tokens = sub(state_residual_tokens);
        s.transition_residual_tokens = sub(transition_residual_tokens);
        s.quantized_states = quantized_states.middleRows(start, count);
        s.quantized_transitions = quantized_transitions.middleRows(start, count);
        return s;
    }
};

class HierarchicalQuantizer {
public:
    HierarchicalQuantizer() = default;
    HierarchicalQuantizer(ParamStore& ps, const std::string& name, Eigen::Index dim, const QuantConfig& cfg, Rng& rng)
        : cfg_(cfg) {
        cfg.validate();
        auto book = [&](const char* suffix, int K, CodebookRole role, bool pin) {
            return Codebook(ps.add(name + "." + suffix, uniform_init(K, dim, 1.0, rng)), cfg.gamma, role, pin);
        };
        state_ = book("state", cfg.state_codes, CodebookRole::State, false);
        transition_ = book("transition", cfg.transition_codes, CodebookRole::Transition, false);
        state_residual_ = book("state_residual", cfg.state_residual_codes, CodebookRole::StateResidual, true);
        transition_residual_ =
            book("transition_residual", cfg.transition_residual_codes, CodebookRole::TransitionResidual, true);
    }

    const QuantConfig& config() const { return cfg_; }
    QuantMode mode() const { return cfg_.mode; }
    bool hierarchical() const { return cfg_.mode == QuantMode::Hierarchical; }

    Codebook& state() { return state_; }
    Codebook& transition() { return transition_; }
    Codebook& state_residual() { return state_residual_; }
    Codebook& transition_residual() { return transition_residual_; }
    const Codebook& state() const { return state_; }
    const Codebook& transition() const { return transition_; }
    const Codebook& state_residual() const { return state_residual_; }
    const Codebook& transition_residual() const { return transition_residual_; }

    // Codebook used for the transition residual.
    Codebook& transition_residual_book() {
        return cfg_.transition_residual_uses_state_book ? state_residual_ : transition_residual_;
    }
    const Codebook& transition_residual_book() const {
        return cfg_.transition_residual_uses_state_book ? state_residual_ : transition_residual_;
    }

    std::vector<Codebook*> books() { return {&state_, &transition_, &state_residual_, &transition_residual_}; }
    std::vector<const Codebook*> books() const {
        return {&state_, &transition_, &state_residual_, &transition_residual_};
    }

    TokenizedSequence quantize_pair(const Mat& o_seq, const Mat& h_seq) const {
        if (o_seq.rows() != h_seq.rows()) throw ShapeError("quantize_pair: sequence lengths differ");
        if (cfg_.mode == QuantMode::Continuous) {
            TokenizedSequence t;
            t.quantized_states = o_seq;
            t.quantized_transitions = h_seq;
            return t;
        }
        if (o_seq.cols() != state_.dim() || h_seq.cols() != transition_.dim())
            throw ShapeError("quantize_pair: feature width differs from codebook dimension");
        TokenizedSequence t;
        t.state_tokens = assign_rows(o_seq, state_.codes());
        t.transition_tokens = assign_rows(h_seq, transition_.codes());
        t.quantized_states = gather_codes(state_.codes(), t.state_tokens);
        t.quantized_transitions = gather_codes(transition_.codes(), t.transition_tokens);
        if (hierarchical()) {
            const Codebook& tres = transition_residual_book();
            t.state_residual_tokens = assign_rows(o_seq - t.quantized_states, state_residual_.codes());
            t.transition_residual_tokens = assign_rows(h_seq - t.quantized_transitions, tres.codes());
            t.quantized_states += gather_codes(state_residual_.codes(), t.state_residual_tokens);
            t.quantized_transitions += gather_codes(tres.codes(), t.transition_residual_tokens);
        }
        return t;
    }

    // k-means++ seeding of every codebook from one batch of features.
    void initialize_from(const Mat& o_feats, const Mat& h_feats, Rng& rng) {
        if (cfg_.mode == QuantMode::Continuous) return;
        state_.vectors.mutable_value() = kmeanspp_seed(o_feats, state_.size(), rng);
        transition_.vectors.mutable_value() = kmeanspp_seed(h_feats, transition_.size(), rng);
        const Mat o_res = o_feats - gather_codes(state_.codes(), assign_rows(o_feats, state_.codes()));
        const Mat h_res = h_feats - gather_codes(transition_.codes(), assign_rows(h_feats, transition_.codes()));
        seed_residual(state_residual_, o_res, rng);
        seed_residual(transition_residual_, cfg_.transition_residual_uses_state_book ? o_res : h_res, rng);
        for (auto* b : books()) b->counts.setZero();
    }

private:
    static void seed_residual(Codebook& cb, const Mat& residuals, Rng& rng) {
        Mat seeded(cb.size(), cb.dim());
        seeded.row(0).setZero();
        seeded.bottomRows(cb.size() - 1) = kmeanspp_seed(residuals, cb.size() - 1, rng, Mat::Zero(1, cb.dim()));
        cb.vectors.mutable_value() = seeded;
    }

    QuantConfig cfg_;
    Codebook state_;
    Codebook transition_;
    Codebook state_residual_;
    Codebook transition_residual_;
};

}  // namespace hst
