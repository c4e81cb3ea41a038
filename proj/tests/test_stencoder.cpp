#include "hst/stencoder.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hst;
using hst::testing::gradient_check;
using hst::testing::named;
using hst::testing::random_mat;

namespace {

EncoderConfig small_config() {
    EncoderConfig c;
    c.layers = 1;
    c.heads = 2;
    return c;
}

}  // namespace

TEST(CrossFuse, MatchesElementwiseDefinition) {
    Rng rng(51);
    const int W = 5, M = 3;
    const Mat Ht = random_mat(W, M, rng), Hs = random_mat(M, W, rng);
    const Vec At = random_mat(W, 1, rng), As = random_mat(M, 1, rng);
    const Mat Hf = cross_fuse(Ht, Hs, At, As);
    for (int t = 0; t < W; ++t)
        for (int m = 0; m < M; ++m) EXPECT_NEAR(Hf(t, m), Ht(t, m) * As(m) + Hs(m, t) * At(t), 1e-14);
    EXPECT_THROW(cross_fuse(Ht, Ht, At, As), ShapeError);
}

TEST(ExciteGate, MatchesSqueezeExciteFormula) {
    Rng rng(52);
    ParamStore ps;
    ExciteGate g(ps, "g", 6, rng);
    const Mat H = random_mat(6, 3, rng);
    const Mat got = g(ag::constant(H), 6).value();
    ASSERT_EQ(got.rows(), 1);
    const Mat s = H.rowwise().mean().transpose();  // [1 x 6]
    Mat z = (s * g.squeeze.weight.value().transpose() + g.squeeze.bias.value()).cwiseMax(0.0);
    z = z * g.expand.weight.value().transpose() + g.expand.bias.value();
    for (int i = 0; i < 6; ++i) {
        EXPECT_NEAR(got(0, i), 1.0 / (1.0 + std::exp(-z(0, i))), 1e-14);
        EXPECT_GT(got(0, i), 0.0);
        EXPECT_LT(got(0, i), 1.0);
    }
    EXPECT_EQ(excite_bottleneck(6), 4);
    EXPECT_EQ(excite_bottleneck(100), 25);
}

TEST(Encoder, SpatialBranchIsRoiPermutationEquivariant) {
    Rng rng(53);
    ParamStore ps;
    SpatioTemporalEncoder enc(ps, "enc", 4, 6, small_config(), rng);
    const Mat X = random_mat(4, 6, rng);
    const std::vector<int> perm{3, 0, 5, 1, 4, 2};
    Mat Xp(4, 6);
    for (int m = 0; m < 6; ++m) Xp.col(m) = X.col(perm[m]);
    const Mat Hs = enc.encode_spatial(X), Hsp = enc.encode_spatial(Xp);
    for (int m = 0; m < 6; ++m) EXPECT_LT((Hsp.row(m) - Hs.row(perm[m])).norm(), 1e-12);
}

TEST(Encoder, ForwardComposesBranchesGatesAndFusion) {
    Rng rng(54);
    ParamStore ps;
    SpatioTemporalEncoder enc(ps, "enc", 4, 6, small_config(), rng);
    const Mat X = random_mat(4, 6, rng);
    ag::NoGradGuard ng;
    const auto f = enc.forward(ag::constant(X));
    const Mat Ht = enc.encode_temporal(X), Hs = enc.encode_spatial(X);
    const Vec At = enc.excite_temporal(Ht), As = enc.excite_spatial(Hs);
    EXPECT_LT((f.Hf.value() - cross_fuse(Ht, Hs, At, As)).norm(), 1e-13);
}

TEST(Encoder, BatchedForwardEqualsPerWindow) {
    Rng rng(55);
    ParamStore ps;
    SpatioTemporalEncoder enc(ps, "enc", 4, 6, small_config(), rng);
    const Mat X = random_mat(12, 6, rng);
    ag::NoGradGuard ng;
    const Mat all = enc.forward(ag::constant(X)).Hf.value();
    for (int b = 0; b < 3; ++b) {
        const Mat one = enc.forward(ag::constant(Mat(X.middleRows(b * 4, 4)))).Hf.value();
        EXPECT_LT((all.middleRows(b * 4, 4) - one).norm(), 1e-13);
    }
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
    for (bool from_temporal : {false, true}) {
        Rng rng(56);
        ParamStore ps;
        auto cfg = small_config();
        cfg.spatial_gate_from_temporal = from_temporal;
        SpatioTemporalEncoder enc(ps, "enc", 4, 4, cfg, rng);
        Var X = ag::parameter(random_mat(8, 4, rng));
        const Mat w = random_mat(8, 4, rng);
        auto params = named(ps);
        params.emplace_back("X", X);
        auto f = [&] { return ag::sum(ag::mul(enc.forward(X).Hf, ag::constant(w))); };
        const auto rep = gradient_check(params, f);
        EXPECT_LT(rep.worst, 1e-6) << rep.worst_name;
    }
}

TEST(Encoder, ConfigAndShapeErrors) {
    Rng rng(57);
    ParamStore ps;
    auto cfg = small_config();
    cfg.dropout = 0.1;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = small_config();
    cfg.heads = 3;
    EXPECT_THROW(SpatioTemporalEncoder(ps, "bad", 4, 6, cfg, rng), ConfigError);
    SpatioTemporalEncoder enc(ps, "enc", 4, 6, small_config(), rng);
    EXPECT_THROW(enc.forward(ag::constant(Mat::Zero(4, 5))), ConfigError);
    EXPECT_THROW(enc.forward(ag::constant(Mat::Zero(6, 6))), ConfigError);
    EXPECT_THROW(enc.encode_temporal(Mat::Zero(8, 6)), ConfigError);
}
