#pragma once

// Subject-level stratified cross-validation, confusion-matrix metrics,
// reconstruction fidelity and clustering agreement scores.

#include "hst/checkpoint.hpp"
#include "hst/trainkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace hst {

struct FoldPlan {
    int k = 5;
    std::uint64_t seed = 0;
    std::vector<int> assignments;  // fold index per subject

    std::vector<std::size_t> test_indices(int fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < assignments.size(); ++i)
            if (assignments[i] == fold) out.push_back(i);
        return out;
    }
    std::vector<std::size_t> train_indices(int fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < assignments.size(); ++i)
            if (assignments[i] != fold) out.push_back(i);
        return out;
    }
};

// Each class is shuffled and dealt round-robin; the dealing position carries
// over between classes so fold sizes stay within one subject of each other.
inline FoldPlan stratified_kfold(const std::vector<int>& labels, int k, std::uint64_t seed) {
    if (k < 2) throw ConfigError("k must be >= 2");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [c, members] : by_class)
        if (static_cast<int>(members.size()) < k)
            throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                                  " subjects, fewer than k=" + std::to_string(k));
    FoldPlan plan;
    plan.k = k;
    plan.seed = seed;
    plan.assignments.assign(labels.size(), -1);
    Rng rng(seed);
    std::size_t pos = 0;
    for (auto& [c, members] : by_class) {
        rng.shuffle(members);
        for (auto i : members) plan.assignments[i] = static_cast<int>(pos++ % static_cast<std::size_t>(k));
    }
    return plan;
}

inline FoldPlan stratified_kfold(const std::vector<TimeSeriesRecord>& records, int k, std::uint64_t seed) {
    std::vector<int> labels;
    for (const auto& r : records) labels.push_back(r.label);
    return stratified_kfold(labels, k, seed);
}

struct MetricReport {
    double accuracy = 0.0;
    std::optional<double> sensitivity;  // missing when the fold has no positives
    std::optional<double> specificity;  // missing when the fold has no negatives
    long tp = 0, fn = 0, tn = 0, fp = 0;
};

// Label 1 is the positive (patient) class.
inline MetricReport confusion_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) throw ShapeError("confusion_metrics: length mismatch");
    if (labels.empty()) throw ValidationError("confusion_metrics: no cases");
    require_binary_labels(labels);
    require_binary_labels(preds);
    MetricReport m;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == 1) (preds[i] == 1 ? m.tp : m.fn)++;
        else (preds[i] == 0 ? m.tn : m.fp)++;
    }
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(labels.size());
    if (m.tp + m.fn > 0) m.sensitivity = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    if (m.tn + m.fp > 0) m.specificity = static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
    return m;
}

struct Summary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation (n - 1); 0 for a single value
    std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
    Summary s;
    s.n = v.size();
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    return s;
}

struct FoldResult {
    int fold = 0;
    MetricReport metrics;
    std::vector<std::string> train_subjects;
    std::vector<std::string> test_subjects;
    std::vector<SubjectPrediction> predictions;
    std::optional<HstCheckpoint> tokenizer;
    std::optional<HstCheckpoint> classifier;
};

struct CvReport {
    std::vector<FoldResult> folds;
    Summary accuracy, sensitivity, specificity;
};

struct CvOptions {
    int k = 5;
    std::uint64_t seed = 0;
    // Directory receiving fold{i}_tokenizer.ckpt / fold{i}_classifier.ckpt.
    std::optional<std::filesystem::path> checkpoint_dir;
    bool keep_checkpoints = false;
    MetricSink sink;
};

inline void check_no_leakage(const std::vector<std::string>& train, const std::vector<std::string>& test) {
    std::set<std::string> a(train.begin(), train.end());
    for (const auto& id : test)
        if (a.count(id)) throw ValidationError("subject " + id + " appears in both train and test splits");
}

inline CvReport cross_validate(const std::vector<TimeSeriesRecord>& records, const HstConfig& model_cfg,
                               const TrainConfig& train_cfg, const CvOptions& opt = {}) {
    const auto plan = stratified_kfold(records, opt.k, opt.seed);
    CvReport report;
    std::vector<double> acc, sen, spe;
    for (int f = 0; f < plan.k; ++f) {
        FoldResult fr;
        fr.fold = f;
        std::vector<TimeSeriesRecord> train, test;
        for (auto i : plan.train_indices(f)) {
            train.push_back(records[i]);
            fr.train_subjects.push_back(records[i].subject_id);
        }
        for (auto i : plan.test_indices(f)) {
            test.push_back(records[i]);
            fr.test_subjects.push_back(records[i].subject_id);
        }
        check_no_leakage(fr.train_subjects, fr.test_subjects);

        TrainConfig cfg = train_cfg;
        cfg.seed = train_cfg.seed + static_cast<std::uint64_t>(f);
        MetricSink sink;
        if (opt.sink) sink = [&](const std::string& line) { opt.sink("{\"fold\":" + std::to_string(f) + ",\"metrics\":" + line + "}"); };
        auto tok = run_tokenizer_phase(model_cfg, train, cfg, sink);
        auto cls = run_classifier_phase(tok, train, cfg, sink);
        auto model = make_model(cls);
        fr.predictions = predict_subjects(*model, test, cfg.windows);
        std::vector<int> preds, labels;
        for (const auto& p : fr.predictions) {
            preds.push_back(p.prediction);
            labels.push_back(p.label);
        }
        fr.metrics = confusion_metrics(preds, labels);
        acc.push_back(fr.metrics.accuracy);
        if (fr.metrics.sensitivity) sen.push_back(*fr.metrics.sensitivity);
        if (fr.metrics.specificity) spe.push_back(*fr.metrics.specificity);

        if (opt.checkpoint_dir) {
            std::filesystem::create_directories(*opt.checkpoint_dir);
            save_checkpoint(tok, *opt.checkpoint_dir / ("fold" + std::to_string(f) + "_tokenizer.ckpt"));
            save_checkpoint(cls, *opt.checkpoint_dir / ("fold" + std::to_string(f) + "_classifier.ckpt"));
        }
        if (opt.keep_checkpoints) {
            fr.tokenizer = std::move(tok);
            fr.classifier = std::move(cls);
        }
        report.folds.push_back(std::move(fr));
    }
    report.accuracy = summarize(acc);
    report.sensitivity = summarize(sen);
    report.specificity = summarize(spe);
    return report;
}

inline std::string format_optional(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
}

// Columns fold,acc,sen,spe; then "mean" and "std" summary rows. Missing
// sensitivity/specificity values are left empty.
inline void write_cv_csv(const CvReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out.precision(17);
    out << "fold,acc,sen,spe\n";
    for (const auto& f : r.folds)
        out << f.fold << "," << f.metrics.accuracy << "," << format_optional(f.metrics.sensitivity) << ","
            << format_optional(f.metrics.specificity) << "\n";
    auto opt = [](const Summary& s, double v) { return s.n ? format_optional(v) : std::string(); };
    out << "mean," << r.accuracy.mean << "," << opt(r.sensitivity, r.sensitivity.mean) << ","
        << opt(r.specificity, r.specificity.mean) << "\n";
    out << "std," << r.accuracy.std << "," << opt(r.sensitivity, r.sensitivity.std) << ","
        << opt(r.specificity, r.specificity.std) << "\n";
}

// Pearson correlation of two equally shaped matrices, flattened. Returns 0
// when either side has zero variance.
inline double pearson(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("pearson: shape mismatch");
    const double ma = a.mean(), mb = b.mean();
    const Mat da = a.array() - ma, db = b.array() - mb;
    const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
    return den > 0.0 ? (da.array() * db.array()).sum() / den : 0.0;
}

struct ReconstructionMetrics {
    double pearson_r = 0.0;  // per-window r averaged over windows
    double mse = 0.0;        // mean over all windows and entries
    std::vector<double> window_r;
    std::vector<double> window_mse;
};

inline ReconstructionMetrics reconstruction_metrics(const std::vector<Mat>& x, const std::vector<Mat>& x_hat) {
    if (x.size() != x_hat.size() || x.empty()) throw ShapeError("reconstruction_metrics: window count mismatch");
    ReconstructionMetrics m;
    for (std::size_t i = 0; i < x.size(); ++i) {
        m.window_r.push_back(pearson(x[i], x_hat[i]));
        m.window_mse.push_back((x[i] - x_hat[i]).squaredNorm() / static_cast<double>(x[i].size()));
    }
    m.pearson_r = summarize(m.window_r).mean;
    m.mse = summarize(m.window_mse).mean;
    return m;
}

inline ReconstructionMetrics reconstruction_metrics(const HstModel& model, const std::vector<Mat>& windows,
                                                    std::size_t chunk = 32) {
    std::vector<Mat> rec;
    for (std::size_t s = 0; s < windows.size(); s += chunk) {
        std::vector<Mat> part(windows.begin() + static_cast<std::ptrdiff_t>(s),
                              windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), s + chunk)));
        for (auto& r : model.reconstruct(part)) rec.push_back(std::move(r));
    }
    return reconstruction_metrics(windows, rec);
}

// Fraction of items whose cluster's majority class equals their class.
inline double cluster_purity(const std::vector<int>& clusters, const std::vector<int>& classes) {
    if (clusters.size() != classes.size() || clusters.empty()) throw ShapeError("cluster_purity: length mismatch");
    std::map<int, std::map<int, long>> table;
    for (std::size_t i = 0; i < clusters.size(); ++i) ++table[clusters[i]][classes[i]];
    long hit = 0;
    for (const auto& [c, row] : table) {
        long best = 0;
        for (const auto& [_, n] : row) best = std::max(best, n);
        hit += best;
    }
    return static_cast<double>(hit) / static_cast<double>(clusters.size());
}

inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("adjusted_rand_index: length mismatch");
    auto pairs = [](double n) { return n * (n - 1.0) / 2.0; };
    std::map<std::pair<int, int>, long> joint;
    std::map<int, long> ra, rb;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++joint[{a[i], b[i]}];
        ++ra[a[i]];
        ++rb[b[i]];
    }
    double sij = 0.0, sa = 0.0, sb = 0.0;
    for (const auto& [_, n] : joint) sij += pairs(static_cast<double>(n));
    for (const auto& [_, n] : ra) sa += pairs(static_cast<double>(n));
    for (const auto& [_, n] : rb) sb += pairs(static_cast<double>(n));
    const double total = pairs(static_cast<double>(a.size()));
    const double expected = total > 0.0 ? sa * sb / total : 0.0;
    const double max_index = 0.5 * (sa + sb);
    if (max_index == expected) return 1.0;
    return (sij - expected) / (max_index - expected);
}

}  // namespace hst
