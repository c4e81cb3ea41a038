#pragma once

// Token occupancy, group comparison with Benjamini-Hochberg correction,
// per-token activation maps and CSV/SVG export.

#include "hst/autograd.hpp"
#include "hst/errors.hpp"
#include "hst/hquant.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace hst {

inline Vec occupancy(const std::vector<int>& tokens, int K) {
    if (tokens.empty()) throw ValidationError("occupancy: empty token sequence");
    if (K < 1) throw ConfigError("occupancy: K must be positive");
    Vec p = Vec::Zero(K);
    for (int t : tokens) {
        if (t < 0 || t >= K) throw ValidationError("occupancy: token " + std::to_string(t) + " outside [0, K)");
        p(t) += 1.0;
    }
    return p / static_cast<double>(tokens.size());
}

enum class TestKind { Welch, MannWhitney };

inline std::string to_string(TestKind k) { return k == TestKind::Welch ? "welch" : "mann-whitney"; }

inline TestKind test_kind_from_string(const std::string& s) {
    if (s == "welch") return TestKind::Welch;
    if (s == "mann-whitney" || s == "mannwhitney") return TestKind::MannWhitney;
    throw ConfigError("unknown test '" + s + "' (expected welch or mann-whitney)");
}

struct TestResult {
    double statistic = 0.0;
    double p = 1.0;
};

namespace detail {

inline void mean_var(const std::vector<double>& v, double& mean, double& var) {
    mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    var = ss / static_cast<double>(v.size() - 1);
}

}  // namespace detail

// Two-sided Welch t-test. Both groups constant: p = 1 if the means agree,
// otherwise p = 0 with an infinite statistic.
inline TestResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw ValidationError("welch_t_test: each group needs at least 2 subjects");
    double ma, va, mb, vb;
    detail::mean_var(a, ma, va);
    detail::mean_var(b, mb, vb);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    const double sa = va / na, sb = vb / nb;
    const double se2 = sa + sb;
    if (se2 == 0.0) {
        if (ma == mb) return {0.0, 1.0};
        return {ma > mb ? INFINITY : -INFINITY, 0.0};
    }
    TestResult r;
    r.statistic = (ma - mb) / std::sqrt(se2);
    const double df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    boost::math::students_t dist(df);
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.statistic))));
    return r;
}

// Two-sided Mann-Whitney U with normal approximation, tie correction and
// continuity correction. The statistic is U for group a.
inline TestResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2) throw ValidationError("mann_whitney_u: each group needs at least 2 subjects");
    const std::size_t na = a.size(), nb = b.size(), n = na + nb;
    std::vector<std::pair<double, int>> all;
    for (double x : a) all.emplace_back(x, 0);
    for (double x : b) all.emplace_back(x, 1);
    std::sort(all.begin(), all.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
    double rank_a = 0.0, tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && all[j].first == all[i].first) ++j;
        const double rank = 0.5 * static_cast<double>(i + 1 + j);
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        for (std::size_t k = i; k < j; ++k)
            if (all[k].second == 0) rank_a += rank;
        i = j;
    }
    const double fa = static_cast<double>(na), fb = static_cast<double>(nb), fn = static_cast<double>(n);
    TestResult r;
    r.statistic = rank_a - fa * (fa + 1.0) / 2.0;
    const double mu = fa * fb / 2.0;
    const double var = fa * fb / 12.0 * ((fn + 1.0) - tie_term / (fn * (fn - 1.0)));
    if (var <= 0.0) return {r.statistic, 1.0};
    const double z = std::max(0.0, std::abs(r.statistic - mu) - 0.5) / std::sqrt(var);
    boost::math::normal norm;
    r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(norm, z)));
    return r;
}

struct FdrResult {
    std::vector<double> adjusted;
    std::vector<bool> significant;
};

// Benjamini-Hochberg step-up adjustment; flags adjusted <= q.
inline FdrResult fdr_bh(const std::vector<double>& p, double q = 0.05) {
    for (double x : p)
        if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("fdr_bh: p-values must lie in [0, 1]");
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p[i] < p[j]; });
    FdrResult r;
    r.adjusted.assign(m, 1.0);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const std::size_t i = order[k];
        running = std::min(running, p[i] * static_cast<double>(m) / static_cast<double>(k + 1));
        r.adjusted[i] = std::min(1.0, running);
    }
    r.significant.resize(m);
    for (std::size_t i = 0; i < m; ++i) r.significant[i] = r.adjusted[i] <= q;
    return r;
}

struct TokenComparison {
    int token = 0;
    double mean_a = 0.0;
    double mean_b = 0.0;
    double statistic = 0.0;
    double p = 1.0;
    double q = 1.0;
    bool significant = false;
};

struct GroupComparisonReport {
    std::string vocabulary;
    TestKind test = TestKind::Welch;
    double fdr_q = 0.05;
    std::vector<TokenComparison> tokens;
};

// Rows are subjects, columns are tokens.
inline GroupComparisonReport group_compare(const std::vector<Vec>& occ_a, const std::vector<Vec>& occ_b,
                                           TestKind test = TestKind::Welch, double q = 0.05,
                                           std::string vocabulary = "state") {
    if (occ_a.size() < 2 || occ_b.size() < 2) throw ValidationError("group_compare: each group needs at least 2 subjects");
    const Eigen::Index K = occ_a.front().size();
    for (const auto* g : {&occ_a, &occ_b})
        for (const auto& v : *g)
            if (v.size() != K) throw ShapeError("group_compare: occupancy vectors differ in length");
    GroupComparisonReport rep;
    rep.vocabulary = std::move(vocabulary);
    rep.test = test;
    rep.fdr_q = q;
    std::vector<double> pvals;
    for (Eigen::Index k = 0; k < K; ++k) {
        std::vector<double> a, b;
        for (const auto& v : occ_a) a.push_back(v(k));
        for (const auto& v : occ_b) b.push_back(v(k));
        TokenComparison tc;
        tc.token = static_cast<int>(k);
        tc.mean_a = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
        tc.mean_b = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(b.size());
        const auto tr = test == TestKind::Welch ? welch_t_test(a, b) : mann_whitney_u(a, b);
        tc.statistic = tr.statistic;
        tc.p = tr.p;
        pvals.push_back(tr.p);
        rep.tokens.push_back(tc);
    }
    const auto fdr = fdr_bh(pvals, q);
    for (std::size_t i = 0; i < rep.tokens.size(); ++i) {
        rep.tokens[i].q = fdr.adjusted[i];
        rep.tokens[i].significant = fdr.significant[i];
    }
    return rep;
}

// Mean of the input rows assigned to `token`, pooled over subjects. Returns
// nullopt when the token never occurs.
inline std::optional<Vec> state_activation_map(const std::vector<Mat>& inputs, const std::vector<std::vector<int>>& tokens,
                                               int token) {
    if (inputs.size() != tokens.size()) throw ShapeError("state_activation_map: inputs and token streams differ in count");
    std::optional<Vec> sum;
    long n = 0;
    for (std::size_t s = 0; s < inputs.size(); ++s) {
        if (static_cast<std::size_t>(inputs[s].rows()) != tokens[s].size())
            throw ShapeError("state_activation_map: token stream length differs from input length");
        for (std::size_t t = 0; t < tokens[s].size(); ++t) {
            if (tokens[s][t] != token) continue;
            if (!sum) sum = Vec::Zero(inputs[s].cols());
            *sum += inputs[s].row(static_cast<Eigen::Index>(t)).transpose();
            ++n;
        }
    }
    if (!sum) return std::nullopt;
    return *sum / static_cast<double>(n);
}

struct SubjectTokens {
    std::string subject_id;
    int label = 0;
    TokenizedSequence tokens;
};

// Columns subject_id,t,state_token,transition_token,state_residual_token,
// transition_residual_token; residual columns hold -1 when absent.
inline void write_tokens_csv(const std::vector<SubjectTokens>& subjects, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out << "subject_id,t,state_token,transition_token,state_residual_token,transition_residual_token\n";
    for (const auto& s : subjects) {
        const auto& tk = s.tokens;
        for (std::size_t t = 0; t < tk.state_tokens.size(); ++t) {
            auto at = [&](const std::vector<int>& v) { return t < v.size() ? v[t] : -1; };
            out << s.subject_id << "," << t << "," << tk.state_tokens[t] << "," << at(tk.transition_tokens) << ","
                << at(tk.state_residual_tokens) << "," << at(tk.transition_residual_tokens) << "\n";
        }
    }
}

struct TokenStreams {
    std::vector<std::string> subject_ids;  // first-appearance order
    std::vector<std::vector<int>> state;
    std::vector<std::vector<int>> transition;
};

inline TokenStreams read_tokens_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("subject_id,t,state_token,transition_token", 0) != 0)
        throw ParseError("token CSV header missing or malformed", 1, 1);
    TokenStreams ts;
    std::map<std::string, std::size_t> index;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 6) throw ParseError("token CSV row has " + std::to_string(cells.size()) + " fields", row, 1);
        auto [it, fresh] = index.emplace(cells[0], ts.subject_ids.size());
        if (fresh) {
            ts.subject_ids.push_back(cells[0]);
            ts.state.emplace_back();
            ts.transition.emplace_back();
        }
        try {
            ts.state[it->second].push_back(std::stoi(cells[2]));
            ts.transition[it->second].push_back(std::stoi(cells[3]));
        } catch (const std::exception&) {
            throw ParseError("token CSV has a non-integer token", row, 3);
        }
    }
    return ts;
}

inline void write_report_csv(const GroupComparisonReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    out.precision(17);
    out << "token,mean_A,mean_B,stat,p,q,significant\n";
    for (const auto& t : r.tokens)
        out << t.token << "," << t.mean_a << "," << t.mean_b << "," << t.statistic << "," << t.p << "," << t.q << ","
            << (t.significant ? 1 : 0) << "\n";
}

// Grouped bar chart of mean occupancy per token; significant tokens marked "*".
inline void write_report_svg(const GroupComparisonReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw LoadError("cannot write " + path.string());
    const double bar = 14.0, gap = 12.0, height = 200.0, top = 30.0, left = 40.0;
    double peak = 1e-12;
    for (const auto& t : r.tokens) peak = std::max({peak, t.mean_a, t.mean_b});
    const double width = left + static_cast<double>(r.tokens.size()) * (2 * bar + gap) + gap;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + top + 30
        << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
    out << "<text x=\"" << left << "\" y=\"15\">" << r.vocabulary << " occupancy (A dark, B light)</text>\n";
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        const auto& t = r.tokens[i];
        const double x = left + gap + static_cast<double>(i) * (2 * bar + gap);
        const double ha = height * t.mean_a / peak, hb = height * t.mean_b / peak;
        out << "<rect x=\"" << x << "\" y=\"" << top + height - ha << "\" width=\"" << bar << "\" height=\"" << ha
            << "\" fill=\"#33658a\"/>\n";
        out << "<rect x=\"" << x + bar << "\" y=\"" << top + height - hb << "\" width=\"" << bar << "\" height=\"" << hb
            << "\" fill=\"#86bbd8\"/>\n";
        out << "<text x=\"" << x + bar << "\" y=\"" << top + height + 14 << "\" text-anchor=\"middle\">" << t.token
            << (t.significant ? "*" : "") << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace hst
