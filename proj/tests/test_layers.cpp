#include <gtest/gtest.h>

#include "helpers.hpp"
#include "maxglavit/layers.hpp"

using namespace maxglavit;
using mg_test::bits_equal;
using mg_test::expect_throws_with;
using mg_test::max_abs_diff;
using mg_test::random_tensor;

TEST(ParameterSet, RegistryBasics) {
    ParameterSet ps;
    Tensor a = ps.add("b.weight", Tensor::zeros({3, 2}, Dtype::real32));
    Tensor b = ps.add("a.bias", Tensor::zeros({5}, Dtype::real32));
    EXPECT_TRUE(ps.contains("b.weight"));
    EXPECT_FALSE(ps.contains("c"));
    EXPECT_EQ(ps.size(), 2u);
    EXPECT_EQ(ps.total_params(), 11);
    EXPECT_EQ(ps.get("a.bias").id(), b.id());
    std::vector<std::string> expected{"a.bias", "b.weight"};
    EXPECT_EQ(ps.names(), expected);
    (void)a;
}

TEST(ParameterSet, DuplicateNameRejected) {
    ParameterSet ps;
    ps.add("x", Tensor::zeros({1}, Dtype::real32));
    expect_throws_with([&] { ps.add("x", Tensor::zeros({1}, Dtype::real32)); },
                       "duplicate parameter name");
}

TEST(ParameterSet, MissingNameRejected) {
    ParameterSet ps;
    expect_throws_with([&] { ps.get("ghost"); }, "no parameter named");
}

TEST(Init, SeedAndNameDeterminism) {
    InitContext ctx;
    ctx.seed = 42;
    Tensor a = init_weight({4, 7}, "m.weight", ctx);
    Tensor b = init_weight({4, 7}, "m.weight", ctx);
    EXPECT_TRUE(bits_equal(a, b));
    Tensor c = init_weight({4, 7}, "other.weight", ctx);
    EXPECT_GT(max_abs_diff(a, c), 0.0);
    InitContext ctx2 = ctx;
    ctx2.seed = 43;
    Tensor d = init_weight({4, 7}, "m.weight", ctx2);
    EXPECT_GT(max_abs_diff(a, d), 0.0);
}

TEST(Init, RegistrationOrderDoesNotChangeValues) {
    InitContext ctx;
    ctx.seed = 9;
    ParameterSet p1, p2;
    Linear l1a(p1, "alpha", 6, 5, true, ctx);
    Linear l1b(p1, "beta", 5, 4, true, ctx);
    Linear l2b(p2, "beta", 5, 4, true, ctx);
    Linear l2a(p2, "alpha", 6, 5, true, ctx);
    for (const auto& name : p1.names()) EXPECT_TRUE(bits_equal(p1.get(name), p2.get(name)));
}

TEST(Init, TruncatedNormalStats) {
    InitContext ctx;
    ctx.seed = 3;
    ctx.dtype = Dtype::real64;
    Tensor w = init_weight({400, 100}, "big.weight", ctx);
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < w.numel(); ++i) {
        double v = w.value_at(i);
        ASSERT_LE(std::abs(v), 0.04 + 1e-12);
        sum += v;
        sq += v * v;
    }
    double n = double(w.numel());
    double mean = sum / n;
    double sd = std::sqrt(sq / n - mean * mean);
    EXPECT_LT(std::abs(mean), 1e-3);
    EXPECT_GT(sd, 0.015);
    EXPECT_LT(sd, 0.025);
    EXPECT_TRUE(w.requires_grad());
}

TEST(Init, ZerosContextForCheckpointLoad) {
    InitContext ctx;
    ctx.zeros = true;
    Tensor w = init_weight({3, 3}, "m.weight", ctx);
    for (int64_t i = 0; i < w.numel(); ++i) EXPECT_EQ(w.value_at(i), 0.0);
    EXPECT_TRUE(w.requires_grad());
    Tensor g = init_const({3}, 1.0, ctx);
    for (int64_t i = 0; i < g.numel(); ++i) EXPECT_EQ(g.value_at(i), 0.0);
}

TEST(LinearLayer, HandComputedForward) {
    ParameterSet ps;
    InitContext ctx;
    ctx.dtype = Dtype::real64;
    Linear l(ps, "fc", 2, 2, true, ctx);
    l.w.set_value_at(0, 1.0);
    l.w.set_value_at(1, 2.0);
    l.w.set_value_at(2, 3.0);
    l.w.set_value_at(3, 4.0);
    l.b.set_value_at(0, 0.5);
    l.b.set_value_at(1, -0.5);
    Tensor x = Tensor::from_values({1, 2}, {1.0, 1.0}, Dtype::real64);
    Tensor y = l.forward(x);
    EXPECT_DOUBLE_EQ(y.value_at(0), 3.5);
    EXPECT_DOUBLE_EQ(y.value_at(1), 6.5);
}

TEST(LinearLayer, ParamNamesAndCounts) {
    ParameterSet ps;
    InitContext ctx;
    Linear l(ps, "head.fc", 384, 467, true, ctx);
    EXPECT_TRUE(ps.contains("head.fc.weight"));
    EXPECT_TRUE(ps.contains("head.fc.bias"));
    EXPECT_EQ(ps.total_params(), 384 * 467 + 467);

    ParameterSet ps2;
    Linear nb(ps2, "fc", 8, 4, false, ctx);
    EXPECT_EQ(ps2.total_params(), 32);
    EXPECT_FALSE(nb.b.defined());
    EXPECT_FALSE(ps2.contains("fc.bias"));
}

TEST(ConvLayers, ParamCountsAndShapes) {
    ParameterSet ps;
    InitContext ctx;
    Conv2dLayer c(ps, "stem.conv1", 3, 64, 3, 3, 2, {1, 1}, 1, true, ctx);
    EXPECT_EQ(ps.get("stem.conv1.weight").shape(), (Shape{64, 3, 3, 3}));
    EXPECT_EQ(ps.total_params(), 64 * 3 * 9 + 64);
    Tensor x = Tensor::zeros({1, 3, 8, 8}, Dtype::real32);
    EXPECT_EQ(c.forward(x).shape(), (Shape{1, 64, 4, 4}));

    ParameterSet pd;
    Conv2dLayer dw(pd, "dw", 16, 16, 3, 3, 1, {1, 1}, 16, false, ctx);
    EXPECT_EQ(pd.get("dw.weight").shape(), (Shape{16, 1, 3, 3}));
    EXPECT_EQ(pd.total_params(), 16 * 9);
    (void)dw;
}

TEST(ConvLayers, Conv1dRequiresOddKernel) {
    ParameterSet ps;
    InitContext ctx;
    expect_throws_with([&] { Conv1dLayer(ps, "eca.conv", 1, 1, 4, 1, false, ctx); },
                       "odd");
}

TEST(BatchNormLayer, SeparatesParamsFromBuffers) {
    ParameterSet ps, bufs;
    InitContext ctx;
    ctx.dtype = Dtype::real64;
    BatchNorm2d bn(ps, bufs, "bn", 4, ctx);
    EXPECT_TRUE(ps.contains("bn.weight"));
    EXPECT_TRUE(ps.contains("bn.bias"));
    EXPECT_TRUE(bufs.contains("bn.running_mean"));
    EXPECT_TRUE(bufs.contains("bn.running_var"));
    EXPECT_EQ(ps.total_params(), 8);
    for (int64_t i = 0; i < 4; ++i) {
        EXPECT_EQ(bufs.get("bn.running_mean").value_at(i), 0.0);
        EXPECT_EQ(bufs.get("bn.running_var").value_at(i), 1.0);
    }
    Tensor x = random_tensor({2, 4, 3, 3}, Dtype::real64, 5);
    Tensor y = bn.forward(x, false);
    EXPECT_LT(max_abs_diff(x, y), 1e-4);  // fresh stats, eval mode is near identity
}

TEST(LayerNormLayers, IdentityInitialization) {
    ParameterSet ps;
    InitContext ctx;
    ctx.dtype = Dtype::real64;
    LayerNormChannels lnc(ps, "ln", 6, ctx);
    LayerNormTokens lnt(ps, "tln", 6, ctx);
    for (int64_t i = 0; i < 6; ++i) {
        EXPECT_EQ(lnc.gamma.value_at(i), 1.0);
        EXPECT_EQ(lnc.beta.value_at(i), 0.0);
        EXPECT_EQ(lnt.gamma.value_at(i), 1.0);
        EXPECT_EQ(lnt.beta.value_at(i), 0.0);
    }
    EXPECT_EQ(ps.total_params(), 24);
    Tensor x = random_tensor({2, 6, 2, 2}, Dtype::real64, 8);
    Tensor t = random_tensor({3, 4, 6}, Dtype::real64, 9);
    EXPECT_EQ(lnc.forward(x).shape(), x.shape());
    EXPECT_EQ(lnt.forward(t).shape(), t.shape());
}
