#pragma once

// Two-phase training: tokenizer pretraining (encoder, backbone, codebooks,
// decoder) for a fixed number of optimizer steps, then downstream fine-tuning
// of the encoder stages and an MLP classifier with quantizer and decoder frozen.

#include "hst/checkpoint.hpp"
#include "hst/config.hpp"
#include "hst/dataio.hpp"
#include "hst/model.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace hst {

struct WindowSet {
    std::vector<Mat> windows;
    std::vector<std::size_t> record;  // index of the source record per window
    std::vector<int> label;

    std::size_t size() const { return windows.size(); }
};

// z-scores each record, then cuts windows. Records shorter than the window
// contribute nothing; their ids are appended to `skipped` when given.
inline WindowSet make_windows(const std::vector<TimeSeriesRecord>& records, const WindowSpec& spec,
                              std::vector<std::string>* skipped = nullptr) {
    WindowSet ws;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.length() < spec.length) {
            if (skipped) skipped->push_back(r.subject_id);
            continue;
        }
        for (auto& w : window(zscore_normalize(r.X), spec)) {
            ws.windows.push_back(std::move(w));
            ws.record.push_back(i);
            ws.label.push_back(r.label);
        }
    }
    return ws;
}

// Cycles through shuffled epochs of window indices.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(std::min(batch, n)), rng_(std::move(rng)) {
        if (n == 0) throw ValidationError("no training windows");
        reshuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (out.size() < batch_) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        rng_.shuffle(order_);
        pos_ = 0;
    }

    std::size_t n_;
    std::size_t batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

inline std::vector<Mat> gather(const std::vector<Mat>& all, const std::vector<std::size_t>& idx) {
    std::vector<Mat> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(all[i]);
    return out;
}

inline nlohmann::json to_json(const LossBreakdown& l) {
    return {{"total", l.total},
            {"recon", l.recon},
            {"state_cb", l.state_cb},
            {"state_res_cb", l.state_res_cb},
            {"transition_cb", l.transition_cb},
            {"transition_res_cb", l.transition_res_cb},
            {"commitment", l.commitment}};
}

using MetricSink = std::function<void(const std::string&)>;

struct TrainResult {
    long steps = 0;
    std::vector<std::string> metrics;  // JSON lines in step order
};

inline nlohmann::json step_metrics(long step, const TokenizerForward& fw, const HstModel& model) {
    nlohmann::json j{{"phase", 1}, {"step", step}, {"loss", to_json(fw.loss.parts)}};
    if (model.quantizer().mode() != QuantMode::Continuous) {
        const auto& q = model.quantizer();
        auto add = [&](const char* key, const std::vector<int>& idx, Eigen::Index K) {
            auto m = codebook_metrics(idx, K);
            j["perplexity"][key] = m.perplexity;
            j["dead_codes"][key] = m.dead_codes;
        };
        add("state", fw.tokens.state_tokens, q.state().size());
        add("transition", fw.tokens.transition_tokens, q.transition().size());
        if (q.hierarchical()) {
            add("state_residual", fw.tokens.state_residual_tokens, q.state_residual().size());
            add("transition_residual", fw.tokens.transition_residual_tokens, q.transition_residual_book().size());
        }
    }
    return j;
}

// Phase 1. Runs exactly cfg.phase1_steps optimizer steps; per step: forward,
// loss, gradient update, count update and revival. Throws TrainingError on a
// non-finite loss.
inline TrainResult train_tokenizer(HstModel& model, const WindowSet& data, const TrainConfig& cfg,
                                   const MetricSink& sink = {}) {
    cfg.validate();
    TrainResult result;
    if (cfg.phase1_steps == 0) return result;
    if (data.size() == 0) throw ValidationError("train_tokenizer: dataset is empty after windowing");
    for (const auto& w : data.windows)
        if (w.rows() != model.config().window || w.cols() != model.config().rois)
            throw ConfigError("train_tokenizer: window shape differs from model configuration");

    Rng rng(cfg.seed);
    BatchSampler sampler(data.size(), static_cast<std::size_t>(cfg.batch_size), rng.split(1));
    Rng init_rng = rng.split(2);
    Adam adam(model.params().with_prefix(HstModel::tokenizer_prefixes()), AdamConfig{cfg.learning_rate});

    for (long step = 1; step <= cfg.phase1_steps; ++step) {
        const auto batch = gather(data.windows, sampler.next());
        if (!model.codebooks_initialized()) model.initialize_codebooks(batch, init_rng);

        model.params().zero_grad();
        auto fw = model.forward_tokenizer(batch);
        if (!std::isfinite(fw.loss.parts.total)) {
            throw TrainingError("non-finite loss at phase-1 step " + std::to_string(step) +
                                ": " + to_json(fw.loss.parts).dump());
        }
        ag::backward(fw.loss.total);
        adam.step();
        model.enforce_codebook_pins();
        model.revive(fw);

        if (step % cfg.log_every == 0 || step == cfg.phase1_steps) {
            auto line = step_metrics(step, fw, model).dump();
            if (sink) sink(line);
            result.metrics.push_back(std::move(line));
        }
        result.steps = step;
    }
    return result;
}

inline void require_binary_labels(const std::vector<int>& labels) {
    for (int y : labels)
        if (y != 0 && y != 1) throw ValidationError("classifier labels must be 0 or 1, found " + std::to_string(y));
}

// Phase 2. Cross-entropy on per-window labels for cfg.phase2_epochs epochs.
// Only encoder, backbone and classifier parameters are updated.
inline TrainResult train_classifier(HstModel& model, const WindowSet& data, const TrainConfig& cfg,
                                    const MetricSink& sink = {}) {
    cfg.validate();
    require_binary_labels(data.label);
    TrainResult result;
    if (cfg.phase2_epochs == 0) return result;
    if (data.size() == 0) throw ValidationError("train_classifier: dataset is empty after windowing");

    Rng rng(cfg.seed ^ 0xC1A55ULL);
    Adam adam(model.params().with_prefix(HstModel::classifier_prefixes()), AdamConfig{cfg.learning_rate});
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);

    for (int epoch = 1; epoch <= cfg.phase2_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        long correct = 0;
        for (std::size_t start = 0; start < order.size(); start += bs) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
            std::vector<int> labels;
            for (auto i : idx) labels.push_back(data.label[i]);
            model.params().zero_grad();
            Var logits = model.classifier_logits(gather(data.windows, idx));
            Var loss = ag::softmax_cross_entropy(logits, labels);
            if (!std::isfinite(loss.scalar()))
                throw TrainingError("non-finite classifier loss in epoch " + std::to_string(epoch));
            ag::backward(loss);
            adam.step();
            ++result.steps;
            loss_sum += loss.scalar() * static_cast<double>(idx.size());
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const int pred = logits.value()(static_cast<Eigen::Index>(r), 1) > logits.value()(static_cast<Eigen::Index>(r), 0);
                correct += pred == labels[r];
            }
        }
        nlohmann::json j{{"phase", 2},
                         {"epoch", epoch},
                         {"loss", loss_sum / static_cast<double>(order.size())},
                         {"train_accuracy", static_cast<double>(correct) / static_cast<double>(order.size())}};
        auto line = j.dump();
        if (sink) sink(line);
        result.metrics.push_back(std::move(line));
    }
    return result;
}

// Evaluates in chunks to bound memory.
inline Mat predict_windows(const HstModel& model, const std::vector<Mat>& windows, std::size_t chunk = 32) {
    Mat probs(static_cast<Eigen::Index>(windows.size()), model.config().classifier.classes);
    for (std::size_t s = 0; s < windows.size(); s += chunk) {
        std::vector<Mat> part(windows.begin() + static_cast<std::ptrdiff_t>(s),
                              windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), s + chunk)));
        probs.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(part.size())) = model.predict_proba(part);
    }
    return probs;
}

struct SubjectPrediction {
    std::string subject_id;
    int label = 0;
    double probability = 0.0;  // mean window probability of class 1
    int prediction = 0;
};

// Window probabilities averaged per subject, thresholded at 0.5.
inline std::vector<SubjectPrediction> predict_subjects(const HstModel& model, const std::vector<TimeSeriesRecord>& records,
                                                       const WindowSpec& spec) {
    std::vector<SubjectPrediction> out;
    for (const auto& r : records) {
        if (r.length() < spec.length) continue;
        auto ws = window(zscore_normalize(r.X), spec);
        Mat p = predict_windows(model, ws);
        SubjectPrediction sp;
        sp.subject_id = r.subject_id;
        sp.label = r.label;
        sp.probability = p.col(1).mean();
        sp.prediction = sp.probability >= 0.5 ? 1 : 0;
        out.push_back(sp);
    }
    return out;
}

// Convenience wrappers producing checkpoints.
inline HstCheckpoint run_tokenizer_phase(const HstConfig& model_cfg, const std::vector<TimeSeriesRecord>& records,
                                         const TrainConfig& cfg, const MetricSink& sink = {}) {
    HstModel model(model_cfg, cfg.seed);
    auto data = make_windows(records, cfg.windows);
    auto res = train_tokenizer(model, data, cfg, sink);
    return capture(model, cfg, static_cast<std::uint64_t>(res.steps), std::move(res.metrics));
}

inline HstCheckpoint run_classifier_phase(const HstCheckpoint& tokenizer, const std::vector<TimeSeriesRecord>& records,
                                          const TrainConfig& cfg, const MetricSink& sink = {}) {
    auto model = make_model(tokenizer);
    auto data = make_windows(records, cfg.windows);
    auto res = train_classifier(*model, data, cfg, sink);
    auto metrics = tokenizer.metrics;
    metrics.insert(metrics.end(), res.metrics.begin(), res.metrics.end());
    return capture(*model, cfg, tokenizer.step, std::move(metrics), true);
}

}  // namespace hst
