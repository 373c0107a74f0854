#include <gtest/gtest.h>

#include "helpers.hpp"
#include "maxglavit/conv_blocks.hpp"

using namespace maxglavit;
using mg_test::bits_equal;
using mg_test::collect_params;
using mg_test::expect_throws_with;
using mg_test::max_abs_diff;
using mg_test::random_tensor;
using mg_test::weighted_sum;

namespace {

void fill(Tensor t, double v) {
    for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, v);
}

void randomize(Tensor t, uint64_t seed, double lo = 0.5, double hi = 1.5) {
    RngState rng(seed);
    for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, rng.uniform(lo, hi));
}

// Writes a Dirac delta into a depthwise kernel so the conv becomes identity.
void set_delta(Tensor w, int64_t kh, int64_t kw) {
    fill(w, 0.0);
    int64_t out = w.dim(0);
    for (int64_t o = 0; o < out; ++o)
        w.set_value_at(o * kh * kw + (kh / 2) * kw + (kw / 2), 1.0);
}

InitContext ctx64(uint64_t seed) {
    InitContext ctx;
    ctx.seed = seed;
    ctx.dtype = Dtype::real64;
    return ctx;
}

}  // namespace

TEST(Grn, ZeroParamsIsIdentity) {
    Tensor x = random_tensor({2, 4, 3, 3}, Dtype::real64, 1);
    Tensor gamma = Tensor::zeros({4}, Dtype::real64);
    Tensor beta = Tensor::zeros({4}, Dtype::real64);
    EXPECT_EQ(max_abs_diff(grn(x, gamma, beta), x), 0.0);
}

TEST(Grn, ZeroInputStaysFiniteAndGivesBeta) {
    Tensor x = Tensor::zeros({1, 3, 2, 2}, Dtype::real64);
    Tensor gamma = Tensor::full({3}, 0.8, Dtype::real64);
    Tensor beta = Tensor::from_values({3}, {0.1, -0.2, 0.3}, Dtype::real64);
    Tensor y = grn(x, gamma, beta);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 4; ++i) {
            double v = y.value_at(c * 4 + i);
            ASSERT_TRUE(std::isfinite(v));
            EXPECT_DOUBLE_EQ(v, beta.value_at(c));
        }
}

TEST(Grn, MatchesManualReference) {
    const int64_t n = 2, c = 6, h = 3, w = 4;
    Tensor x = random_tensor({n, c, h, w}, Dtype::real64, 2);
    Tensor gamma = random_tensor({c}, Dtype::real64, 3);
    Tensor beta = random_tensor({c}, Dtype::real64, 4);
    Tensor y = grn(x, gamma, beta);
    for (int64_t nn = 0; nn < n; ++nn) {
        std::vector<double> g(size_t(c), 0.0);
        double gm = 0.0;
        for (int64_t cc = 0; cc < c; ++cc) {
            double s = 0.0;
            for (int64_t i = 0; i < h * w; ++i) {
                double v = x.value_at((nn * c + cc) * h * w + i);
                s += v * v;
            }
            g[size_t(cc)] = std::sqrt(s);
            gm += g[size_t(cc)];
        }
        gm /= double(c);
        for (int64_t cc = 0; cc < c; ++cc) {
            double norm = g[size_t(cc)] / (gm + 1e-6);
            for (int64_t i = 0; i < h * w; ++i) {
                int64_t flat = (nn * c + cc) * h * w + i;
                double expect =
                    gamma.value_at(cc) * x.value_at(flat) * norm + beta.value_at(cc) +
                    x.value_at(flat);
                EXPECT_NEAR(y.value_at(flat), expect, 1e-12);
            }
        }
    }
}

TEST(Grn, Gradient) {
    Tensor x = random_tensor({2, 3, 2, 2}, Dtype::real64, 5);
    Tensor gamma = random_tensor({3}, Dtype::real64, 6);
    Tensor beta = random_tensor({3}, Dtype::real64, 7);
    mg_test::expect_grad_ok([&] { return weighted_sum(grn(x, gamma, beta)); },
                            {x, gamma, beta});
}

TEST(MBConvBlock, ZeroProjectionIsIdentity) {
    ParameterSet ps, bufs;
    MBConv mb(ps, bufs, "mb", 8, 8, 1, 4, ctx64(1));
    EXPECT_FALSE(mb.shortcut.has_value());
    fill(mb.project.w, 0.0);
    fill(mb.project.b, 0.0);
    Tensor x = random_tensor({2, 8, 4, 4}, Dtype::real64, 2);
    EXPECT_EQ(max_abs_diff(mb.forward(x, false), x), 0.0);
}

TEST(MBConvBlock, Stride2ShapeAndShortcutPath) {
    ParameterSet ps, bufs;
    MBConv mb(ps, bufs, "mb", 4, 6, 2, 4, ctx64(3));
    ASSERT_TRUE(mb.shortcut.has_value());
    EXPECT_TRUE(ps.contains("mb.shortcut.weight"));
    Tensor x = random_tensor({2, 4, 8, 8}, Dtype::real64, 4);
    Tensor y = mb.forward(x, false);
    EXPECT_EQ(y.shape(), (Shape{2, 6, 4, 4}));

    fill(mb.project.w, 0.0);
    fill(mb.project.b, 0.0);
    Tensor expected = conv2d(avg_pool2d_2x2(x), mb.shortcut->w, mb.shortcut->b, 1,
                             std::pair<int, int>{0, 0}, 1);
    EXPECT_TRUE(bits_equal(mb.forward(x, false), expected));
}

TEST(MBConvBlock, ParamCountFormula) {
    ParameterSet ps, bufs;
    MBConv same(ps, bufs, "mb", 8, 8, 1, 4, ctx64(0));
    EXPECT_EQ(ps.total_params(), 1504);
    ParameterSet ps2, bufs2;
    MBConv down(ps2, bufs2, "mb", 8, 16, 2, 4, ctx64(0));
    EXPECT_EQ(ps2.total_params(), 1912);
    (void)same;
    (void)down;
}

TEST(ConvNeXtV1, ZeroLayerScaleIsIdentity) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnext;
    ConvNeXtBlock blk(ps, "blk", 8, false, v, ctx64(1));
    fill(blk.layerscale, 0.0);
    Tensor x = random_tensor({2, 8, 5, 5}, Dtype::real64, 2);
    EXPECT_EQ(max_abs_diff(blk.forward(x), x), 0.0);
}

TEST(ConvNeXtV1, DefaultLayerScaleKeepsBlockNearIdentity) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnext;
    ConvNeXtBlock blk(ps, "blk", 8, false, v, ctx64(3));
    for (int64_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(blk.layerscale.value_at(i), 1e-6);
    Tensor x = random_tensor({1, 8, 5, 5}, Dtype::real64, 4);
    EXPECT_LT(max_abs_diff(blk.forward(x), x), 1e-4);
}

TEST(ConvNeXtV2, ZeroPointwise2IsIdentity) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnextv2;
    ConvNeXtBlock blk(ps, "blk", 8, true, v, ctx64(5));
    fill(blk.pw2.w, 0.0);
    fill(blk.pw2.b, 0.0);
    Tensor x = random_tensor({2, 8, 5, 5}, Dtype::real64, 6);
    EXPECT_EQ(max_abs_diff(blk.forward(x), x), 0.0);
}

TEST(ConvNeXtV2, GrnParamsStartAtZeroSoGrnIsIdentity) {
    ParameterSet ps1, ps2;
    ConvBlockVariant v1;
    v1.kind = ConvBlockKind::convnext;
    ConvBlockVariant v2;
    v2.kind = ConvBlockKind::convnextv2;
    // Same prefix and seed give bitwise-identical shared weights.
    ConvNeXtBlock a(ps1, "blk", 8, false, v1, ctx64(7));
    ConvNeXtBlock b(ps2, "blk", 8, true, v2, ctx64(7));
    for (int64_t i = 0; i < b.grn_gamma.numel(); ++i) {
        EXPECT_EQ(b.grn_gamma.value_at(i), 0.0);
        EXPECT_EQ(b.grn_beta.value_at(i), 0.0);
    }
    fill(a.layerscale, 1.0);  // neutralize v1's only remaining difference
    Tensor x = random_tensor({2, 8, 4, 4}, Dtype::real64, 8);
    EXPECT_EQ(max_abs_diff(a.forward(x), b.forward(x)), 0.0);
}

TEST(InceptionNeXt, DeltaKernelsAndZeroMlpGiveIdentity) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::inceptionnext;
    InceptionNeXtBlock blk(ps, "blk", 16, v, ctx64(1));
    set_delta(blk.dw3.w, 3, 3);
    set_delta(blk.dw_w.w, 1, 11);
    set_delta(blk.dw_h.w, 11, 1);
    fill(blk.dw3.b, 0.0);
    fill(blk.dw_w.b, 0.0);
    fill(blk.dw_h.b, 0.0);
    Tensor x = random_tensor({2, 16, 6, 6}, Dtype::real64, 2);
    EXPECT_EQ(max_abs_diff(blk.mixer(x), x), 0.0);
    fill(blk.pw2.w, 0.0);
    fill(blk.pw2.b, 0.0);
    EXPECT_EQ(max_abs_diff(blk.forward(x), x), 0.0);
}

TEST(InceptionNeXt, IdentityBranchPassesThroughUntouched) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::inceptionnext;
    InceptionNeXtBlock blk(ps, "blk", 16, v, ctx64(3));
    EXPECT_EQ(blk.dw3.w.shape(), (Shape{2, 1, 3, 3}));
    EXPECT_EQ(blk.dw_w.w.shape(), (Shape{2, 1, 1, 11}));
    EXPECT_EQ(blk.dw_h.w.shape(), (Shape{2, 1, 11, 1}));
    Tensor x = random_tensor({1, 16, 4, 4}, Dtype::real64, 4);
    Tensor mixed = blk.mixer(x);
    EXPECT_TRUE(bits_equal(narrow_channels(mixed, 6, 10), narrow_channels(x, 6, 10)));
    EXPECT_GT(max_abs_diff(narrow_channels(mixed, 0, 6), narrow_channels(x, 0, 6)), 0.0);
}

TEST(InceptionNeXt, ChannelsMustBeDivisibleBy8) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::inceptionnext;
    expect_throws_with([&] { InceptionNeXtBlock(ps, "blk", 12, v, ctx64(0)); },
                       "divisible by 8");
}

TEST(ConvBlocks, ParamCountFormulas) {
    ConvBlockVariant v;
    {
        ParameterSet ps;
        v.kind = ConvBlockKind::convnext;
        ConvNeXtBlock blk(ps, "b", 8, false, v, ctx64(0));
        EXPECT_EQ(ps.total_params(), 976);  // 8C^2 + 58C
        (void)blk;
    }
    {
        ParameterSet ps;
        v.kind = ConvBlockKind::convnextv2;
        ConvNeXtBlock blk(ps, "b", 8, true, v, ctx64(0));
        EXPECT_EQ(ps.total_params(), 1032);  // 8C^2 + 65C
        (void)blk;
    }
    {
        ParameterSet ps;
        v.kind = ConvBlockKind::inceptionnext;
        InceptionNeXtBlock blk(ps, "b", 8, v, ctx64(0));
        EXPECT_EQ(ps.total_params(), 602);
        (void)blk;
    }
}

TEST(ConvBlocks, StageEntryDownsample) {
    ParameterSet ps, bufs;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnextv2;
    ConvBlock blk(ps, bufs, "s1.b0", 8, 16, 2, v, ctx64(1));
    EXPECT_TRUE(ps.contains("s1.b0.downsample.weight"));
    EXPECT_EQ(ps.get("s1.b0.downsample.weight").shape(), (Shape{16, 8, 2, 2}));
    Tensor x = random_tensor({2, 8, 14, 14}, Dtype::real64, 2);
    EXPECT_EQ(blk.forward(x, false).shape(), (Shape{2, 16, 7, 7}));
    EXPECT_EQ(ps.total_params(), 4 * 8 * 16 + 16 + 8 * 16 * 16 + 65 * 16);

    ParameterSet ps2, bufs2;
    ConvBlock same(ps2, bufs2, "s1.b1", 16, 16, 1, v, ctx64(1));
    EXPECT_FALSE(ps2.contains("s1.b1.downsample.weight"));
    Tensor x2 = random_tensor({1, 16, 7, 7}, Dtype::real64, 3);
    EXPECT_EQ(same.forward(x2, false).shape(), (Shape{1, 16, 7, 7}));
}

TEST(ConvBlocks, Stride1ChannelChangeRejectedOutsideMBConv) {
    ParameterSet ps, bufs;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnext;
    expect_throws_with([&] { ConvBlock(ps, bufs, "b", 8, 16, 1, v, ctx64(0)); },
                       "cannot change channels");
}

TEST(ConvBlocks, KindNamesRoundTrip) {
    for (ConvBlockKind kind : {ConvBlockKind::mbconv, ConvBlockKind::convnext,
                               ConvBlockKind::convnextv2, ConvBlockKind::inceptionnext})
        EXPECT_EQ(conv_block_kind_from_name(conv_block_kind_name(kind)), kind);
    expect_throws_with([] { conv_block_kind_from_name("resnet"); }, "unknown conv block kind");
}

TEST(ConvBlockGradients, MBConvTrainingMode) {
    ParameterSet ps, bufs;
    MBConv mb(ps, bufs, "mb", 4, 4, 1, 4, ctx64(11));
    Tensor x = random_tensor({2, 4, 4, 4}, Dtype::real64, 12);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(mb.forward(x, true)); }, inputs,
                                    48, 1e-5, 3e-6);
}

TEST(ConvBlockGradients, MBConvStride2) {
    ParameterSet ps, bufs;
    MBConv mb(ps, bufs, "mb", 4, 8, 2, 4, ctx64(13));
    Tensor x = random_tensor({2, 4, 4, 4}, Dtype::real64, 14);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(mb.forward(x, true)); }, inputs,
                                    48, 1e-5, 3e-6);
}

TEST(ConvBlockGradients, ConvNeXtV1) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnext;
    ConvNeXtBlock blk(ps, "b", 8, false, v, ctx64(15));
    randomize(blk.layerscale, 16);
    Tensor x = random_tensor({1, 8, 4, 4}, Dtype::real64, 17);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(blk.forward(x)); }, inputs, 48,
                                    1e-6, 1e-5);
}

TEST(ConvBlockGradients, ConvNeXtV2WithActiveGrn) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnextv2;
    ConvNeXtBlock blk(ps, "b", 8, true, v, ctx64(18));
    randomize(blk.grn_gamma, 19);
    randomize(blk.grn_beta, 20, -0.5, 0.5);
    Tensor x = random_tensor({1, 8, 4, 4}, Dtype::real64, 21);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(blk.forward(x)); }, inputs, 48,
                                    1e-6, 1e-5);
}

TEST(ConvBlockGradients, InceptionNeXt) {
    ParameterSet ps;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::inceptionnext;
    InceptionNeXtBlock blk(ps, "b", 8, v, ctx64(22));
    Tensor x = random_tensor({1, 8, 4, 4}, Dtype::real64, 23);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(blk.forward(x)); }, inputs, 48);
}

TEST(ConvBlockGradients, DownsampledConvNeXtV2) {
    ParameterSet ps, bufs;
    ConvBlockVariant v;
    v.kind = ConvBlockKind::convnextv2;
    ConvBlock blk(ps, bufs, "b", 4, 8, 2, v, ctx64(24));
    Tensor x = random_tensor({1, 4, 6, 6}, Dtype::real64, 25);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(blk.forward(x, false)); }, inputs,
                                    40);
}
