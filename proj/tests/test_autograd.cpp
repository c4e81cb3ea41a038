#include "hst/autograd.hpp"
#include "hst/nn.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hst;
using hst::testing::gradient_check;
using hst::testing::random_mat;

namespace {

constexpr double kTol = 1e-6;

// Weighted sum so every output entry carries a distinct upstream gradient.
Var probe(const Var& y, const Mat& w) { return ag::sum(ag::mul(y, ag::constant(w))); }

}  // namespace

TEST(Autograd, ElementwiseOpsMatchFiniteDifferences) {
    Rng rng(1);
    Var a = ag::parameter(random_mat(3, 4, rng));
    Var b = ag::parameter(random_mat(3, 4, rng));
    const Mat w = random_mat(3, 4, rng);
    auto f = [&] {
        Var y = ag::add(ag::mul(ag::tanh(a), ag::sigmoid(b)), ag::scale(ag::sub(ag::exp(ag::scale(a, 0.3)), ag::softplus(b)), 0.7));
        return probe(y, w);
    };
    EXPECT_LT(gradient_check({{"a", a}, {"b", b}}, f).worst, kTol);
}

TEST(Autograd, BroadcastOpsMatchFiniteDifferences) {
    Rng rng(2);
    Var a = ag::parameter(random_mat(6, 3, rng));
    Var row = ag::parameter(random_mat(1, 3, rng));
    Var col = ag::parameter(random_mat(6, 1, rng));
    Var g = ag::parameter(random_mat(2, 3, rng));
    const Mat w = random_mat(6, 3, rng);
    auto f = [&] {
        Var y = ag::mul_block_row(ag::mul_col(ag::mul_row(ag::add_row(a, row), row), col), g, 3);
        return probe(y, w);
    };
    EXPECT_LT(gradient_check({{"a", a}, {"row", row}, {"col", col}, {"g", g}}, f).worst, kTol);
}

TEST(Autograd, LinearAndMatmulMatchFiniteDifferences) {
    Rng rng(3);
    Var x = ag::parameter(random_mat(5, 4, rng));
    Var W = ag::parameter(random_mat(3, 4, rng));
    Var b = ag::parameter(random_mat(1, 3, rng));
    Var M = ag::parameter(random_mat(3, 2, rng));
    const Mat w = random_mat(5, 2, rng);
    auto f = [&] { return probe(ag::matmul(ag::linear(x, W, b), M), w); };
    EXPECT_LT(gradient_check({{"x", x}, {"W", W}, {"b", b}, {"M", M}}, f).worst, kTol);
}

TEST(Autograd, LinearForwardIsAffineMap) {
    Rng rng(4);
    const Mat x = random_mat(5, 4, rng), W = random_mat(3, 4, rng), b = random_mat(1, 3, rng);
    const Mat y = ag::linear(ag::constant(x), ag::constant(W), ag::constant(b)).value();
    for (Eigen::Index r = 0; r < 5; ++r)
        for (Eigen::Index c = 0; c < 3; ++c) {
            double acc = b(0, c);
            for (Eigen::Index k = 0; k < 4; ++k) acc += x(r, k) * W(c, k);
            EXPECT_NEAR(y(r, c), acc, 1e-12);
        }
}

TEST(Autograd, ReshapingOpsMatchFiniteDifferences) {
    Rng rng(5);
    Var a = ag::parameter(random_mat(6, 4, rng));
    Var p = ag::parameter(random_mat(3, 4, rng));
    const Mat w1 = random_mat(8, 3, rng);
    const Mat w2 = random_mat(6, 4, rng);
    const Mat w3 = random_mat(2, 3, rng);
    auto f = [&] {
        Var t = ag::block_transpose(a, 3);                 // [8 x 3]
        Var s = ag::shift_in_blocks(ag::add_block(a, p), 3);  // [6 x 4]
        Var c = ag::concat_cols({ag::slice_cols(a, 1, 2), ag::gather_rows(a, {5, 0, 0, 2, 1, 3})});
        Var m = ag::fold_column(ag::row_mean(a), 3);       // [2 x 3]
        Var bm = ag::block_mean(a, 3);                     // [2 x 4]
        Var u = ag::unfold_rows(m);                        // [6 x 1]
        return ag::add_scalars({{1.0, probe(t, w1)},
                                {0.5, probe(s, w2)},
                                {0.3, ag::sum(ag::mul(c, c))},
                                {2.0, probe(m, w3)},
                                {1.5, ag::sum(ag::mul(bm, bm))},
                                {0.7, ag::sum(ag::mul(u, u))},
                                {1.0, ag::sum(ag::transpose(ag::relu(a)))}});
    };
    EXPECT_LT(gradient_check({{"a", a}, {"p", p}}, f).worst, kTol);
}

TEST(Autograd, StepStackingRoundTrips) {
    Rng rng(6);
    const Mat a = random_mat(8, 2, rng);  // two blocks of four steps
    std::vector<Var> steps;
    for (Eigen::Index t = 0; t < 4; ++t) steps.push_back(ag::rows_at(ag::constant(a), t, 4));
    EXPECT_EQ(ag::stack_steps(steps).value(), a);
    EXPECT_EQ(steps[1].value().row(1), a.row(5));
}

TEST(Autograd, BlockTransposeSwapsAxesWithinBlocks) {
    Mat a(4, 3);
    a << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12;
    const Mat t = ag::block_transpose_values(a, 2);
    ASSERT_EQ(t.rows(), 6);
    ASSERT_EQ(t.cols(), 2);
    EXPECT_EQ(t.topRows(3), a.topRows(2).transpose());
    EXPECT_EQ(t.bottomRows(3), a.bottomRows(2).transpose());
}

TEST(Autograd, ShiftInBlocksInsertsZeroRowPerBlock) {
    Mat a(4, 1);
    a << 1, 2, 3, 4;
    const Mat s = ag::shift_in_blocks(ag::constant(a), 2).value();
    EXPECT_EQ(s(0, 0), 0.0);
    EXPECT_EQ(s(1, 0), 1.0);
    EXPECT_EQ(s(2, 0), 0.0);
    EXPECT_EQ(s(3, 0), 3.0);
}

TEST(Autograd, LossesMatchDirectFormulas) {
    Rng rng(7);
    const Mat a = random_mat(4, 3, rng), b = random_mat(4, 3, rng);
    double mse = 0.0, rows = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) mse += std::pow(a.data()[i] - b.data()[i], 2);
    rows = mse / 4.0;
    mse /= 12.0;
    EXPECT_NEAR(ag::mse(ag::constant(a), ag::constant(b)).scalar(), mse, 1e-14);
    EXPECT_NEAR(ag::mean_row_sqdist(ag::constant(a), ag::constant(b)).scalar(), rows, 1e-14);

    const std::vector<int> y{0, 2, 1, 2};
    double ce = 0.0;
    for (Eigen::Index r = 0; r < 4; ++r) {
        double z = 0.0;
        for (Eigen::Index c = 0; c < 3; ++c) z += std::exp(a(r, c));
        ce -= a(r, y[static_cast<std::size_t>(r)]) - std::log(z);
    }
    EXPECT_NEAR(ag::softmax_cross_entropy(ag::constant(a), y).scalar(), ce / 4.0, 1e-13);
}

TEST(Autograd, LossGradientsMatchFiniteDifferences) {
    Rng rng(8);
    Var a = ag::parameter(random_mat(4, 3, rng));
    Var b = ag::parameter(random_mat(4, 3, rng));
    auto f = [&] {
        return ag::add_scalars({{1.0, ag::mse(a, b)},
                                {0.5, ag::mean_row_sqdist(b, a)},
                                {2.0, ag::softmax_cross_entropy(ag::mul(a, b), {1, 0, 2, 2})}});
    };
    EXPECT_LT(gradient_check({{"a", a}, {"b", b}}, f).worst, kTol);
}

TEST(Autograd, LayerNormMatchesFormulaAndGradients) {
    Rng rng(9);
    Var x = ag::parameter(random_mat(5, 6, rng));
    Var g = ag::parameter(random_mat(1, 6, rng));
    Var b = ag::parameter(random_mat(1, 6, rng));
    const Mat y = ag::layer_norm(x, g, b).value();
    for (Eigen::Index r = 0; r < 5; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        for (Eigen::Index c = 0; c < 6; ++c)
            EXPECT_NEAR(y(r, c), (x.value()(r, c) - mu) / std::sqrt(var + 1e-5) * g.value()(0, c) + b.value()(0, c), 1e-12);
    }
    const Mat w = random_mat(5, 6, rng);
    auto f = [&] { return probe(ag::layer_norm(x, g, b), w); };
    EXPECT_LT(gradient_check({{"x", x}, {"g", g}, {"b", b}}, f).worst, kTol);
}

TEST(Autograd, BlockAttentionMatchesNaiveLoop) {
    Rng rng(10);
    const Eigen::Index block = 3, blocks = 2, c = 4;
    const int heads = 2;
    const Mat q = random_mat(block * blocks, c, rng), k = random_mat(block * blocks, c, rng), v = random_mat(block * blocks, c, rng);
    const Mat out = ag::block_attention(ag::constant(q), ag::constant(k), ag::constant(v), heads, block).value();
    const Eigen::Index dh = c / heads;
    for (Eigen::Index bb = 0; bb < blocks; ++bb)
        for (int h = 0; h < heads; ++h)
            for (Eigen::Index i = 0; i < block; ++i) {
                std::vector<double> s(static_cast<std::size_t>(block));
                double z = 0.0;
                for (Eigen::Index j = 0; j < block; ++j) {
                    double dot = 0.0;
                    for (Eigen::Index d = 0; d < dh; ++d) dot += q(bb * block + i, h * dh + d) * k(bb * block + j, h * dh + d);
                    s[static_cast<std::size_t>(j)] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
                    z += s[static_cast<std::size_t>(j)];
                }
                for (Eigen::Index d = 0; d < dh; ++d) {
                    double acc = 0.0;
                    for (Eigen::Index j = 0; j < block; ++j) acc += s[static_cast<std::size_t>(j)] / z * v(bb * block + j, h * dh + d);
                    EXPECT_NEAR(out(bb * block + i, h * dh + d), acc, 1e-12);
                }
            }
}

TEST(Autograd, BlockAttentionGradientsMatchFiniteDifferences) {
    Rng rng(11);
    Var q = ag::parameter(random_mat(6, 4, rng));
    Var k = ag::parameter(random_mat(6, 4, rng));
    Var v = ag::parameter(random_mat(6, 4, rng));
    const Mat w = random_mat(6, 4, rng);
    auto f = [&] { return probe(ag::block_attention(q, k, v, 2, 3), w); };
    EXPECT_LT(gradient_check({{"q", q}, {"k", k}, {"v", v}}, f).worst, kTol);
}

TEST(Autograd, ZohPhiIsStableNearZero) {
    EXPECT_NEAR(ag::zoh_phi_value(0.0), 1.0, 1e-15);
    EXPECT_NEAR(ag::zoh_phi_value(1e-12), 1.0 + 0.5e-12, 1e-15);
    EXPECT_NEAR(ag::zoh_phi_value(-2.0), std::expm1(-2.0) / -2.0, 1e-15);
    for (double z : {-3.0, -0.5, -1e-7, 0.0, 1e-7, 0.4}) {
        const double h = 1e-5;
        const double fd = (ag::zoh_phi_value(z + h) - ag::zoh_phi_value(z - h)) / (2 * h);
        EXPECT_NEAR(ag::zoh_phi_derivative(z), fd, 1e-8) << "z=" << z;
    }
}

TEST(Autograd, StopGradientOpsBlockFlow) {
    Rng rng(12);
    Var a = ag::parameter(random_mat(3, 2, rng));
    const Mat q = random_mat(3, 2, rng);
    Var st = ag::straight_through(a, q);
    EXPECT_EQ(st.value(), q);
    ag::backward(ag::sum(ag::mul(st, ag::constant(Mat::Constant(3, 2, 2.0)))));
    EXPECT_EQ(a.grad(), Mat::Constant(3, 2, 2.0));

    a.zero_grad();
    ag::backward(ag::sum(ag::add(ag::detach(a), ag::constant(q))));
    EXPECT_EQ(a.grad(), Mat::Zero(3, 2));
}

TEST(Autograd, NoGradGuardRecordsNothing) {
    Var a = ag::parameter(Mat::Ones(2, 2));
    ag::NoGradGuard ng;
    Var y = ag::sum(ag::mul(a, a));
    EXPECT_FALSE(y.requires_grad());
    EXPECT_DOUBLE_EQ(y.scalar(), 4.0);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
    Var a = ag::parameter(Mat::Constant(1, 1, 3.0));
    Var b = ag::mul(a, a);
    ag::backward(ag::add(b, b));  // 2 a^2
    EXPECT_DOUBLE_EQ(a.grad()(0, 0), 12.0);
}

TEST(Autograd, ShapeErrorsAreReported) {
    EXPECT_THROW(ag::add(ag::constant(Mat::Zero(2, 2)), ag::constant(Mat::Zero(2, 3))), ShapeError);
    EXPECT_THROW(ag::block_attention(ag::constant(Mat::Zero(4, 3)), ag::constant(Mat::Zero(4, 3)),
                                     ag::constant(Mat::Zero(4, 3)), 2, 2),
                 ShapeError);
    EXPECT_THROW(ag::backward(ag::parameter(Mat::Zero(2, 1))), ShapeError);
}

TEST(Nn, TransformerGradientsMatchFiniteDifferences) {
    Rng rng(13);
    ParamStore ps;
    Transformer tr(ps, "t", 4, 1, 2, 3, true, rng);
    Var x = ag::parameter(random_mat(6, 4, rng));
    const Mat w = random_mat(6, 4, rng);
    auto params = hst::testing::named(ps);
    params.emplace_back("x", x);
    auto f = [&] { return probe(tr(x, 3), w); };
    EXPECT_LT(gradient_check(params, f).worst, 1e-5);
}

TEST(Nn, TransformerRejectsIndivisibleHeads) {
    Rng rng(14);
    ParamStore ps;
    EXPECT_THROW(Transformer(ps, "t", 5, 1, 2, 3, false, rng), ConfigError);
}

TEST(Nn, ParamStoreRejectsDuplicatesAndFiltersPrefixes) {
    ParamStore ps;
    ps.add("a.x", Mat::Zero(1, 2));
    ps.add("b.y", Mat::Zero(3, 1));
    EXPECT_THROW(ps.add("a.x", Mat::Zero(1, 1)), ConfigError);
    EXPECT_EQ(ps.with_prefix({"a."}).size(), 1u);
    EXPECT_EQ(ps.count(), 5u);
}

TEST(Nn, AdamFirstStepMovesByLearningRate) {
    // With bias correction the first update is lr * g / (|g| + eps') ~ lr * sign(g).
    Var p = ag::parameter(Mat::Constant(1, 2, 1.0));
    p.grad_ref() << 0.5, -3.0;
    Adam opt({p}, AdamConfig{0.01});
    opt.step();
    EXPECT_NEAR(p.value()(0, 0), 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(p.value()(0, 1), 1.0 + 0.01, 1e-9);
    EXPECT_EQ(opt.steps(), 1);
}
