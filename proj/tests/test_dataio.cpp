#include "hst/dataio.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <map>

using namespace hst;
using hst::testing::random_mat;
using hst::testing::TempDir;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream(p) << s;
}

}  // namespace

TEST(MatrixCsv, RoundTripsExactly) {
    TempDir dir;
    Rng rng(71);
    const Mat X = random_mat(7, 3, rng, 1e3);
    write_matrix_csv(dir / "x.csv", X, {"a", "b", "c"});
    const auto m = read_matrix_csv(dir / "x.csv");
    EXPECT_EQ(m.header, (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(m.values, X);
}

TEST(MatrixCsv, NonNumericCellReportsRowAndColumn) {
    TempDir dir;
    write_text(dir / "x.csv", "a,b\n1,2\n3,abc\n");
    try {
        read_matrix_csv(dir / "x.csv");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.row(), 3u);
        EXPECT_EQ(e.column(), 2u);
    }
}

TEST(MatrixCsv, RaggedRowAndMissingFile) {
    TempDir dir;
    write_text(dir / "x.csv", "a,b\n1,2\n3\n");
    EXPECT_THROW(read_matrix_csv(dir / "x.csv"), ParseError);
    EXPECT_THROW(read_matrix_csv(dir / "missing.csv"), LoadError);
}

TEST(Manifest, LoadsRelativePathsLabelsAndStates) {
    TempDir dir;
    std::filesystem::create_directories(dir / "data");
    write_matrix_csv(dir / "data/s1.csv", Mat::Ones(5, 2));
    write_matrix_csv(dir / "data/s2.csv", Mat::Ones(3, 2));
    write_text(dir / "states.csv", "state\n0\n1\n1\n2\n0\n");
    write_text(dir / "m.csv", "subject_id,path,label,site,states\ns1,data/s1.csv,1,A,states.csv\ns2,data/s2.csv,0,,\n");
    const auto ds = load_dataset(dir / "m.csv", 4);
    ASSERT_EQ(ds.records.size(), 2u);
    EXPECT_EQ(ds.records[0].label, 1);
    EXPECT_EQ(*ds.records[0].site, "A");
    EXPECT_EQ(*ds.records[0].true_states, (std::vector<int>{0, 1, 1, 2, 0}));
    EXPECT_FALSE(ds.records[1].site.has_value());
    EXPECT_EQ(ds.short_subjects, (std::vector<std::string>{"s2"}));
}

TEST(Manifest, ErrorsNameTheProblem) {
    TempDir dir;
    write_text(dir / "m1.csv", "subject_id,path\ns1,x.csv\n");
    EXPECT_THROW(read_manifest(dir / "m1.csv"), ParseError);
    write_text(dir / "m2.csv", "subject_id,path,label\ns1,x.csv,yes\n");
    try {
        read_manifest(dir / "m2.csv");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.row(), 2u);
        EXPECT_EQ(e.column(), 3u);
    }
    write_text(dir / "m3.csv", "subject_id,path,label\ns1,nowhere.csv,0\n");
    try {
        load_dataset(dir / "m3.csv");
        FAIL();
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("s1"), std::string::npos);
    }
    write_text(dir / "bad.csv", "a\n1\nnan\n");
    write_text(dir / "m4.csv", "subject_id,path,label\ns9,bad.csv,0\n");
    EXPECT_THROW(load_dataset(dir / "m4.csv"), ValidationError);
}

TEST(Manifest, WriteThenReadRoundTrips) {
    TempDir dir;
    std::vector<ManifestEntry> in{{"a", "a.csv", 0, std::string("S1"), std::nullopt}, {"b", "b.csv", 1, std::nullopt, std::string("b_states.csv")}};
    write_manifest(dir / "m.csv", in);
    const auto out = read_manifest(dir / "m.csv");
    ASSERT_EQ(out.size(), 2u);
    EXPECT_EQ(out[0].site, in[0].site);
    EXPECT_EQ(out[1].states_path, in[1].states_path);
    EXPECT_EQ(out[1].label, 1);
}

TEST(Zscore, ColumnsHaveZeroMeanUnitSampleVariance) {
    Rng rng(72);
    Mat X = random_mat(50, 3, rng, 4.0);
    X.col(1).array() += 10.0;
    const Mat Z = zscore_normalize(X);
    for (int c = 0; c < 3; ++c) {
        double mean = 0.0, ss = 0.0;
        for (int t = 0; t < 50; ++t) mean += Z(t, c);
        mean /= 50;
        for (int t = 0; t < 50; ++t) ss += (Z(t, c) - mean) * (Z(t, c) - mean);
        EXPECT_NEAR(mean, 0.0, 1e-13);
        EXPECT_NEAR(ss / 49.0, 1.0, 1e-12);
    }
}

TEST(Zscore, ConstantColumnBecomesZeroWithWarning) {
    Mat X(3, 2);
    X << 1, 5, 2, 5, 3, 5;
    Warnings w;
    const Mat Z = zscore_normalize(X, &w);
    EXPECT_EQ(Z.col(1), Vec::Zero(3));
    ASSERT_EQ(w.size(), 1u);
    EXPECT_THROW(zscore_normalize(Mat::Ones(1, 2)), ValidationError);
}

TEST(Windows, OffsetsAndContents) {
    EXPECT_EQ(window_offsets(250, WindowSpec{100, 100}), (std::vector<Eigen::Index>{0, 100}));
    EXPECT_EQ(window_offsets(250, WindowSpec{100, 50}), (std::vector<Eigen::Index>{0, 50, 100, 150}));
    Mat X(6, 1);
    X << 0, 1, 2, 3, 4, 5;
    const auto w = window(X, WindowSpec{3, 2});
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[1](0, 0), 2.0);
    Warnings warn;
    EXPECT_TRUE(window(X, WindowSpec{10, 10}, &warn).empty());
    EXPECT_EQ(warn.size(), 1u);
    EXPECT_THROW(window(X, WindowSpec{1, 1}), ConfigError);
}

TEST(Synth, DwellTimesAndTransitionsFollowTheSpec) {
    auto spec = make_switching_spec(4, 6, 20.0, 0.0, 1);
    spec.transition = concentrated_transition(4);
    const auto r = synth_switching_lds(spec, 40000, 2);
    const auto& s = *r.true_states;
    long runs = 1;
    std::map<std::pair<int, int>, long> jumps;
    std::map<int, long> from;
    for (std::size_t t = 1; t < s.size(); ++t)
        if (s[t] != s[t - 1]) {
            ++runs;
            ++jumps[{s[t - 1], s[t]}];
            ++from[s[t - 1]];
        }
    EXPECT_NEAR(static_cast<double>(s.size()) / runs, 20.0, 1.5);
    EXPECT_NEAR(static_cast<double>(jumps[{0, 1}]) / from[0], 0.96, 0.03);
    EXPECT_EQ((jumps[{2, 3}]), 0);
}

TEST(Synth, NoiselessOutputFollowsStateDynamics) {
    const auto spec = make_switching_spec(3, 4, 10.0, 0.0, 3);
    const auto r = synth_switching_lds(spec, 50, 4);
    Vec x = Vec::Zero(4);
    for (int t = 0; t < 50; ++t) {
        const auto k = static_cast<std::size_t>((*r.true_states)[static_cast<std::size_t>(t)]);
        x = spec.dynamics[k] * x + spec.means[k];
        EXPECT_LT((r.X.row(t).transpose() - x).norm(), 1e-12);
    }
    EXPECT_EQ(synth_switching_lds(spec, 50, 4).X, r.X);
}

TEST(Synth, SpecSerializesAndValidates) {
    const auto spec = make_switching_spec(3, 4, 10.0, 0.1, 5);
    const auto back = switching_spec_from_json(to_json(spec));
    EXPECT_EQ(back.dynamics[2], spec.dynamics[2]);
    EXPECT_EQ(back.transition, spec.transition);
    auto bad = spec;
    bad.dwell_mean = 0.5;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_THROW(concentrated_transition(2), ConfigError);
    const Mat P = concentrated_transition(5, 0.01);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(P.row(i).sum(), 1.0, 1e-15);
}

TEST(Noise, AchievesRequestedSnr) {
    Rng rng(73);
    const Mat X = random_mat(20000, 2, rng, 3.0);
    const Mat Y = add_observation_noise(X, 10.0, 6);
    for (int c = 0; c < 2; ++c) {
        const Vec n = Y.col(c) - X.col(c);
        const double snr = 10.0 * std::log10((X.col(c).array() - X.col(c).mean()).square().mean() /
                                             (n.array() - n.mean()).square().mean());
        EXPECT_NEAR(snr, 10.0, 0.1);
    }
}
