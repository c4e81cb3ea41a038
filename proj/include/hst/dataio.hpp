#pragma once

// Dataset ingestion, per-ROI normalization, windowing and the switching
// linear dynamical system used as synthetic ground truth.

#include "hst/autograd.hpp"
#include "hst/errors.hpp"
#include "hst/rng.hpp"

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace hst {

struct TimeSeriesRecord {
    std::string subject_id;
    Mat X;  // T x M
    int label = 0;
    std::optional<std::string> site;
    std::optional<std::vector<int>> true_states;

    Eigen::Index length() const { return X.rows(); }
    Eigen::Index rois() const { return X.cols(); }

    void validate() const {
        if (X.rows() < 1 || X.cols() < 1) throw ValidationError(subject_id + ": empty matrix");
        if (!X.allFinite()) throw ValidationError(subject_id + ": matrix contains non-finite values");
        if (true_states && static_cast<Eigen::Index>(true_states->size()) != X.rows())
            throw ValidationError(subject_id + ": true_states length differs from T");
    }
};

struct WindowSpec {
    int length = 100;
    int stride = 100;

    void validate() const {
        if (length < 2) throw ConfigError("window length must be >= 2");
        if (stride < 1) throw ConfigError("window stride must be >= 1");
    }
};

using Warnings = std::vector<std::string>;

// ---------------------------------------------------------------------------
// CSV matrices

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
        s.remove_suffix(1);
    return s;
}

inline double parse_double(std::string_view cell, std::size_t row, std::size_t col) {
    cell = trim(cell);
    double v = 0.0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    if (!cell.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (cell.empty() || ec != std::errc() || ptr != last)
        throw ParseError("non-numeric cell '" + std::string(cell) + "'", row, col);
    return v;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace detail

struct CsvMatrix {
    std::vector<std::string> header;
    Mat values;
};

// Header row of column names, then one row of numbers per time point.
// Row/column numbers in errors are 1-based and count the header as row 1.
inline CsvMatrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open matrix file " + path.string());
    CsvMatrix out;
    std::string line;
    if (!std::getline(in, line)) throw ParseError("missing header row in " + path.string(), 1, 1);
    for (auto cell : detail::split_csv_line(line)) out.header.emplace_back(detail::trim(cell));

    std::vector<double> data;
    std::size_t rows = 0, row_no = 1;
    const std::size_t cols = out.header.size();
    while (std::getline(in, line)) {
        ++row_no;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != cols)
            throw ParseError("expected " + std::to_string(cols) + " cells, found " + std::to_string(cells.size()) +
                                 " in " + path.string(),
                             row_no, cells.size());
        for (std::size_t c = 0; c < cols; ++c) data.push_back(detail::parse_double(cells[c], row_no, c + 1));
        ++rows;
    }
    out.values = Eigen::Map<Mat>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    return out;
}

inline void write_matrix_csv(const std::filesystem::path& path, const Mat& X,
                             const std::vector<std::string>& header = {}) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        if (c) out << ',';
        out << (header.empty() ? "roi" + std::to_string(c) : header[static_cast<std::size_t>(c)]);
    }
    out << '\n';
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        for (Eigen::Index c = 0; c < X.cols(); ++c) {
            if (c) out << ',';
            out << detail::format_double(X(r, c));
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Manifest
//
// CSV with header `subject_id,path,label[,site][,states]`. Paths are resolved
// relative to the manifest's directory. `states` optionally points at a
// one-column CSV of integer ground-truth states (synthetic data).

struct ManifestEntry {
    std::string subject_id;
    std::string path;
    int label = 0;
    std::optional<std::string> site;
    std::optional<std::string> states_path;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty manifest", 1, 1);
    std::map<std::string, std::size_t> col;
    {
        auto cells = detail::split_csv_line(line);
        for (std::size_t i = 0; i < cells.size(); ++i) col[std::string(detail::trim(cells[i]))] = i;
    }
    for (const char* required : {"subject_id", "path", "label"})
        if (!col.count(required)) throw ParseError(std::string("manifest missing column '") + required + "'", 1, 0);

    std::vector<ManifestEntry> entries;
    std::size_t row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_csv_line(line);
        auto cell = [&](const char* name) -> std::optional<std::string> {
            auto it = col.find(name);
            if (it == col.end() || it->second >= cells.size()) return std::nullopt;
            std::string v(detail::trim(cells[it->second]));
            if (v.empty()) return std::nullopt;
            return v;
        };
        ManifestEntry e;
        auto id = cell("subject_id");
        auto path = cell("path");
        auto label = cell("label");
        if (!id) throw ParseError("missing subject_id", row_no, col["subject_id"] + 1);
        if (!path) throw ParseError("missing path for " + *id, row_no, col["path"] + 1);
        if (!label) throw ParseError("missing label for " + *id, row_no, col["label"] + 1);
        e.subject_id = *id;
        e.path = *path;
        int lv = 0;
        auto [ptr, ec] = std::from_chars(label->data(), label->data() + label->size(), lv);
        if (ec != std::errc() || ptr != label->data() + label->size())
            throw ParseError("non-integer label '" + *label + "'", row_no, col["label"] + 1);
        e.label = lv;
        e.site = cell("site");
        e.states_path = cell("states");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline void write_manifest(const std::filesystem::path& manifest_path, const std::vector<ManifestEntry>& entries) {
    std::ofstream out(manifest_path);
    if (!out) throw LoadError("cannot write manifest " + manifest_path.string());
    out << "subject_id,path,label,site,states\n";
    for (const auto& e : entries)
        out << e.subject_id << ',' << e.path << ',' << e.label << ',' << e.site.value_or("") << ','
            << e.states_path.value_or("") << '\n';
}

struct LoadedDataset {
    std::vector<TimeSeriesRecord> records;
    // Subjects shorter than the requested minimum length. They stay in
    // `records`; callers decide whether to exclude them.
    std::vector<std::string> short_subjects;
};

inline LoadedDataset load_dataset(const std::filesystem::path& manifest_path, int min_length = 0) {
    const auto base = manifest_path.parent_path();
    LoadedDataset out;
    for (const auto& e : read_manifest(manifest_path)) {
        const auto p = std::filesystem::path(e.path).is_absolute() ? std::filesystem::path(e.path) : base / e.path;
        if (!std::filesystem::exists(p))
            throw LoadError("subject " + e.subject_id + ": matrix file not found: " + p.string());
        TimeSeriesRecord r;
        r.subject_id = e.subject_id;
        try {
            r.X = read_matrix_csv(p).values;
        } catch (const ParseError& err) {
            throw ParseError("subject " + e.subject_id + ": " + err.what(), err.row(), err.column());
        }
        r.label = e.label;
        r.site = e.site;
        if (e.states_path) {
            const auto sp =
                std::filesystem::path(*e.states_path).is_absolute() ? std::filesystem::path(*e.states_path) : base / *e.states_path;
            const Mat s = read_matrix_csv(sp).values;
            std::vector<int> states(static_cast<std::size_t>(s.rows()));
            for (Eigen::Index t = 0; t < s.rows(); ++t) states[static_cast<std::size_t>(t)] = static_cast<int>(s(t, 0));
            r.true_states = std::move(states);
        }
        r.validate();
        if (r.length() < min_length) out.short_subjects.push_back(r.subject_id);
        out.records.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization and windowing

// Per-column z-score with the n-1 convention. Constant columns become zeros.
inline Mat zscore_normalize(const Mat& X, Warnings* warnings = nullptr) {
    if (X.rows() < 2) throw ValidationError("zscore_normalize: need at least 2 time points");
    Mat out(X.rows(), X.cols());
    const double n = static_cast<double>(X.rows());
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        const double mean = X.col(c).mean();
        const double var = (X.col(c).array() - mean).square().sum() / (n - 1.0);
        const double sd = std::sqrt(var);
        if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
            out.col(c).setZero();
            if (warnings) warnings->push_back("column " + std::to_string(c) + " has zero variance; set to 0");
            continue;
        }
        out.col(c) = (X.col(c).array() - mean) / sd;
    }
    return out;
}

inline std::vector<Eigen::Index> window_offsets(Eigen::Index T, const WindowSpec& spec) {
    spec.validate();
    std::vector<Eigen::Index> offsets;
    for (Eigen::Index off = 0; off + spec.length <= T; off += spec.stride) offsets.push_back(off);
    return offsets;
}

inline std::vector<Mat> window(const Mat& X, const WindowSpec& spec, Warnings* warnings = nullptr) {
    std::vector<Mat> out;
    const auto offsets = window_offsets(X.rows(), spec);
    if (offsets.empty() && warnings)
        warnings->push_back("series of length " + std::to_string(X.rows()) + " shorter than window " +
                            std::to_string(spec.length));
    for (auto off : offsets) out.emplace_back(X.middleRows(off, spec.length));
    return out;
}

// ---------------------------------------------------------------------------
// Switching linear dynamical system

struct SwitchingSystemSpec {
    int n_states = 4;
    int rois = 16;
    double dwell_mean = 20.0;
    std::vector<Mat> dynamics;  // n_states of [M x M]
    std::vector<Vec> means;     // n_states of [M]
    double noise_std = 0.0;
    Mat transition;  // [n_states x n_states], row-stochastic

    void validate() const {
        if (n_states < 1 || rois < 1) throw ConfigError("switching system: n_states and M must be positive");
        if (!(dwell_mean >= 1.0)) throw ConfigError("switching system: dwell_mean must be >= 1");
        if (noise_std < 0.0) throw ConfigError("switching system: noise_std must be non-negative");
        if (static_cast<int>(dynamics.size()) != n_states || static_cast<int>(means.size()) != n_states)
            throw ConfigError("switching system: need one dynamics matrix and mean per state");
        if (transition.rows() != n_states || transition.cols() != n_states)
            throw ConfigError("switching system: transition matrix shape");
        for (int i = 0; i < n_states; ++i) {
            if ((transition.row(i).array() < 0.0).any()) throw ConfigError("switching system: negative transition");
            if (std::abs(transition.row(i).sum() - 1.0) > 1e-9)
                throw ConfigError("switching system: transition row " + std::to_string(i) + " does not sum to 1");
            if (dynamics[static_cast<std::size_t>(i)].rows() != rois || dynamics[static_cast<std::size_t>(i)].cols() != rois ||
                means[static_cast<std::size_t>(i)].size() != rois)
                throw ConfigError("switching system: state " + std::to_string(i) + " has wrong dimensions");
            if (spectral_radius(dynamics[static_cast<std::size_t>(i)]) >= 1.0)
                throw ConfigError("switching system: dynamics matrix " + std::to_string(i) + " is unstable");
        }
    }

    static double spectral_radius(const Mat& A) {
        Eigen::EigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(A), false);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }
};

// Random spec with contractive dynamics (spectral radius `radius`) and
// state means drawn far apart.
inline SwitchingSystemSpec make_switching_spec(int n_states, int rois, double dwell_mean, double noise_std,
                                               std::uint64_t seed, double radius = 0.5, double mean_scale = 1.0) {
    Rng rng(seed);
    SwitchingSystemSpec s;
    s.n_states = n_states;
    s.rois = rois;
    s.dwell_mean = dwell_mean;
    s.noise_std = noise_std;
    for (int k = 0; k < n_states; ++k) {
        Mat A(rois, rois);
        for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] = rng.normal();
        const double rho = SwitchingSystemSpec::spectral_radius(A);
        A *= radius / rho;
        s.dynamics.push_back(A);
        Vec mu(rois);
        for (Eigen::Index i = 0; i < rois; ++i) mu(i) = mean_scale * rng.normal();
        s.means.push_back(mu);
    }
    s.transition = Mat::Constant(n_states, n_states, n_states > 1 ? 1.0 / (n_states - 1) : 1.0);
    if (n_states > 1) s.transition.diagonal().setZero();
    return s;
}

// State path: stay with probability 1 - 1/dwell_mean, otherwise jump along the
// transition row with the self-transition removed. Dwell times are therefore
// geometric with mean dwell_mean.
inline TimeSeriesRecord synth_switching_lds(const SwitchingSystemSpec& spec, Eigen::Index T, std::uint64_t seed,
                                            std::string subject_id = "synth", int label = 0) {
    spec.validate();
    if (T < 1) throw ConfigError("synth_switching_lds: T must be positive");
    Rng rng(seed);
    const double p_leave = 1.0 / spec.dwell_mean;
    std::vector<int> states(static_cast<std::size_t>(T));
    int s = static_cast<int>(rng.index(static_cast<std::size_t>(spec.n_states)));
    for (Eigen::Index t = 0; t < T; ++t) {
        if (t > 0 && rng.uniform() < p_leave) {
            std::vector<double> w(static_cast<std::size_t>(spec.n_states));
            double off = 0.0;
            for (int j = 0; j < spec.n_states; ++j) {
                w[static_cast<std::size_t>(j)] = j == s ? 0.0 : spec.transition(s, j);
                off += w[static_cast<std::size_t>(j)];
            }
            if (off > 0.0) s = static_cast<int>(rng.categorical(w));
        }
        states[static_cast<std::size_t>(t)] = s;
    }

    TimeSeriesRecord r;
    r.subject_id = std::move(subject_id);
    r.label = label;
    r.X.resize(T, spec.rois);
    Vec x = Vec::Zero(spec.rois);
    for (Eigen::Index t = 0; t < T; ++t) {
        const auto k = static_cast<std::size_t>(states[static_cast<std::size_t>(t)]);
        Vec next = spec.dynamics[k] * x + spec.means[k];
        if (spec.noise_std > 0.0)
            for (Eigen::Index i = 0; i < spec.rois; ++i) next(i) += spec.noise_std * rng.normal();
        x = next;
        r.X.row(t) = x.transpose();
    }
    r.true_states = std::move(states);
    return r;
}

// Jump matrix that keeps the chain mostly between states 0 and 1: each of
// them jumps to the other except for `leak` per remaining state, and every
// remaining state returns to 0 or 1 with equal probability.
inline Mat concentrated_transition(int n_states, double leak = 0.02) {
    if (n_states < 3) throw ConfigError("concentrated_transition: need at least 3 states");
    if (!(leak >= 0.0) || leak * (n_states - 2) >= 1.0) throw ConfigError("concentrated_transition: leak out of range");
    Mat P = Mat::Zero(n_states, n_states);
    for (int i = 0; i < 2; ++i) {
        P(i, 1 - i) = 1.0 - leak * (n_states - 2);
        for (int j = 2; j < n_states; ++j) P(i, j) = leak;
    }
    for (int i = 2; i < n_states; ++i) P(i, 0) = P(i, 1) = 0.5;
    return P;
}

// Adds white Gaussian observation noise so that, per column, signal variance
// over noise variance equals 10^(snr_db / 10).
inline Mat add_observation_noise(const Mat& X, double snr_db, std::uint64_t seed) {
    if (X.rows() < 2) throw ValidationError("add_observation_noise: need at least two time points");
    Rng rng(seed);
    Mat out = X;
    const double ratio = std::pow(10.0, snr_db / 10.0);
    for (Eigen::Index c = 0; c < X.cols(); ++c) {
        const double mean = X.col(c).mean();
        const double var = (X.col(c).array() - mean).square().sum() / static_cast<double>(X.rows() - 1);
        const double sd = std::sqrt(var / ratio);
        for (Eigen::Index t = 0; t < X.rows(); ++t) out(t, c) += sd * rng.normal();
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON form of the switching spec

inline nlohmann::json mat_to_json(const Mat& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
    }
    return rows;
}

inline Mat mat_from_json(const nlohmann::json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
    Mat m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw ConfigError("ragged matrix in JSON");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
    }
    return m;
}

inline nlohmann::json to_json(const SwitchingSystemSpec& s) {
    nlohmann::json j;
    j["n_states"] = s.n_states;
    j["rois"] = s.rois;
    j["dwell_mean"] = s.dwell_mean;
    j["noise_std"] = s.noise_std;
    j["transition"] = mat_to_json(s.transition);
    j["dynamics"] = nlohmann::json::array();
    j["means"] = nlohmann::json::array();
    for (const auto& A : s.dynamics) j["dynamics"].push_back(mat_to_json(A));
    for (const auto& mu : s.means) j["means"].push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
    return j;
}

inline SwitchingSystemSpec switching_spec_from_json(const nlohmann::json& j) {
    SwitchingSystemSpec s;
    s.n_states = j.at("n_states").get<int>();
    s.rois = j.at("rois").get<int>();
    s.dwell_mean = j.at("dwell_mean").get<double>();
    s.noise_std = j.value("noise_std", 0.0);
    s.transition = mat_from_json(j.at("transition"));
    for (const auto& A : j.at("dynamics")) s.dynamics.push_back(mat_from_json(A));
    for (const auto& mu : j.at("means")) {
        auto v = mu.get<std::vector<double>>();
        s.means.emplace_back(Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    s.validate();
    return s;
}

}  // namespace hst
