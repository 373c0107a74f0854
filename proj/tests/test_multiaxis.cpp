#include <gtest/gtest.h>

#include "helpers.hpp"
#include "maxglavit/multiaxis.hpp"

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

// Init-scale weights (std 0.02) leave q/k gradients near the float64
// finite-difference noise floor; use O(0.3) weights for end-to-end checks.
void randomize_params(ParameterSet& ps, uint64_t seed) {
    RngState rng(seed);
    for (const auto& name : ps.names()) {
        Tensor t = ps.get(name);
        for (int64_t i = 0; i < t.numel(); ++i) t.set_value_at(i, rng.uniform(-0.5, 0.5));
    }
}

InitContext ctx64(uint64_t seed) {
    InitContext ctx;
    ctx.seed = seed;
    ctx.dtype = Dtype::real64;
    return ctx;
}

Tensor iota_nchw(int64_t n, int64_t c, int64_t h, int64_t w) {
    Tensor x = Tensor::zeros({n, c, h, w}, Dtype::real64);
    for (int64_t i = 0; i < x.numel(); ++i) x.set_value_at(i, double(i));
    return x;
}

// Independent oracle: swaps the block index axes with the intra-block axes,
// out[n,c,i*(H/g)+a, j*(W/g)+b] = in[n,c,a*g+i, b*g+j].
Tensor transpose_block_axes(const Tensor& x, int64_t g) {
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int64_t hg = h / g, wg = w / g;
    Tensor out = Tensor::zeros({n, c, h, w}, x.dtype());
    for (int64_t nn = 0; nn < n; ++nn)
        for (int64_t cc = 0; cc < c; ++cc)
            for (int64_t i = 0; i < g; ++i)
                for (int64_t j = 0; j < g; ++j)
                    for (int64_t a = 0; a < hg; ++a)
                        for (int64_t b = 0; b < wg; ++b) {
                            int64_t dst = ((nn * c + cc) * h + (i * hg + a)) * w + (j * wg + b);
                            int64_t src = ((nn * c + cc) * h + (a * g + i)) * w + (b * g + j);
                            out.set_value_at(dst, x.value_at(src));
                        }
    return out;
}

}  // namespace

TEST(WindowPartition, HandComputedLayout) {
    Tensor x = iota_nchw(1, 1, 4, 4);
    Tensor t = window_partition(x, 2);
    ASSERT_EQ(t.shape(), (Shape{4, 4, 1}));
    const double expected[4][4] = {{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}};
    for (int64_t wi = 0; wi < 4; ++wi)
        for (int64_t tok = 0; tok < 4; ++tok)
            EXPECT_EQ(t.value_at(wi * 4 + tok), expected[wi][tok]) << wi << "," << tok;
}

TEST(GridPartition, HandComputedLayout) {
    Tensor x = iota_nchw(1, 1, 4, 4);
    Tensor t = grid_partition(x, 2);
    ASSERT_EQ(t.shape(), (Shape{4, 4, 1}));
    const double expected[4][4] = {{0, 2, 8, 10}, {1, 3, 9, 11}, {4, 6, 12, 14}, {5, 7, 13, 15}};
    for (int64_t p = 0; p < 4; ++p)
        for (int64_t tok = 0; tok < 4; ++tok)
            EXPECT_EQ(t.value_at(p * 4 + tok), expected[p][tok]) << p << "," << tok;
}

TEST(Partitions, TokensAreChannelsLast) {
    Tensor x = iota_nchw(1, 2, 4, 4);  // channel 1 values = channel 0 values + 16
    Tensor t = window_partition(x, 2);
    ASSERT_EQ(t.shape(), (Shape{4, 4, 2}));
    for (int64_t i = 0; i < 16; ++i)
        EXPECT_EQ(t.value_at(2 * i + 1), t.value_at(2 * i) + 16.0);
}

TEST(Partitions, StageShapesMatchArchitecture) {
    Tensor x = Tensor::zeros({2, 3, 14, 14}, Dtype::real32);
    EXPECT_EQ(window_partition(x, 7).shape(), (Shape{8, 49, 3}));
    EXPECT_EQ(grid_partition(x, 7).shape(), (Shape{98, 4, 3}));
}

TEST(Partitions, RoundTripIsBitExact) {
    Tensor x = random_tensor({2, 5, 8, 12}, Dtype::real64, 1);
    PartitionMeta meta{2, 5, 8, 12};
    EXPECT_TRUE(bits_equal(window_reverse(window_partition(x, 4), meta, 4), x));
    EXPECT_TRUE(bits_equal(grid_reverse(grid_partition(x, 4), meta, 4), x));
}

TEST(Partitions, DegenerateFullSpanCases) {
    Tensor x = random_tensor({3, 2, 4, 4}, Dtype::real64, 2);
    EXPECT_EQ(window_partition(x, 4).shape(), (Shape{3, 16, 2}));
    EXPECT_EQ(grid_partition(x, 4).shape(), (Shape{48, 1, 2}));
}

TEST(Partitions, GridIsWindowOnTransposedBlocks) {
    for (auto [hw, g] : {std::pair<int64_t, int64_t>{8, 2}, {4, 2}, {12, 3}}) {
        Tensor x = random_tensor({2, 3, hw, hw}, Dtype::real64, 3 + uint64_t(hw));
        Tensor lhs = grid_partition(x, g);
        Tensor rhs = window_partition(transpose_block_axes(x, g), hw / g);
        EXPECT_TRUE(bits_equal(lhs, rhs)) << "hw=" << hw << " g=" << g;
    }
}

TEST(Partitions, DivisibilityAndMetaErrors) {
    Tensor x = Tensor::zeros({1, 1, 5, 4}, Dtype::real32);
    expect_throws_with([&] { window_partition(x, 2); }, "not divisible");
    expect_throws_with([&] { grid_partition(x, 2); }, "not divisible");
    Tensor t = Tensor::zeros({4, 4, 1}, Dtype::real32);
    PartitionMeta bad{1, 1, 4, 6};
    expect_throws_with([&] { window_reverse(t, bad, 2); }, "does not match meta");
    expect_throws_with([&] { grid_reverse(t, bad, 2); }, "does not match meta");
    expect_throws_with([&] { window_reverse(Tensor::zeros({4, 4}, Dtype::real32), bad, 2); },
                       "rank 3");
}

TEST(Mhsa, AttentionRowsSumToOne) {
    ParameterSet ps;
    MultiHeadSelfAttention mhsa(ps, "attn", 8, 4, ctx64(1));
    Tensor tokens = random_tensor({2, 5, 8}, Dtype::real64, 2);
    Tensor attn;
    mhsa.forward(tokens, &attn);
    ASSERT_EQ(attn.shape(), (Shape{2, 2, 5, 5}));
    for (int64_t row = 0; row < 2 * 2 * 5; ++row) {
        double s = 0.0;
        for (int64_t col = 0; col < 5; ++col) s += attn.value_at(row * 5 + col);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Mhsa, SingleTokenAttendsToItself) {
    ParameterSet ps;
    MultiHeadSelfAttention mhsa(ps, "attn", 8, 4, ctx64(3));
    Tensor tokens = random_tensor({3, 1, 8}, Dtype::real64, 4);
    Tensor attn;
    Tensor y = mhsa.forward(tokens, &attn);
    EXPECT_EQ(y.shape(), tokens.shape());
    ASSERT_EQ(attn.shape(), (Shape{3, 2, 1, 1}));
    for (int64_t i = 0; i < attn.numel(); ++i) EXPECT_DOUBLE_EQ(attn.value_at(i), 1.0);
}

TEST(Mhsa, ZeroValuesLeaveOutputProjectionBias) {
    ParameterSet ps;
    MultiHeadSelfAttention mhsa(ps, "attn", 8, 2, ctx64(5));
    fill(mhsa.wv.w, 0.0);
    fill(mhsa.wv.b, 0.0);
    Tensor tokens = random_tensor({2, 4, 8}, Dtype::real64, 6);
    Tensor y = mhsa.forward(tokens);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t t = 0; t < 4; ++t)
            for (int64_t c = 0; c < 8; ++c)
                EXPECT_DOUBLE_EQ(y.value_at((b * 4 + t) * 8 + c), mhsa.wo.b.value_at(c));
}

TEST(Mhsa, ValidatesHeadDimAndRank) {
    ParameterSet ps;
    expect_throws_with([&] { MultiHeadSelfAttention(ps, "attn", 10, 4, ctx64(0)); },
                       "must divide channels");
    ParameterSet ps2;
    MultiHeadSelfAttention mhsa(ps2, "attn", 8, 4, ctx64(0));
    expect_throws_with([&] { mhsa.forward(Tensor::zeros({2, 8}, Dtype::real32)); },
                       "tokens must be");
}

TEST(Mhsa, ParamCountFormula) {
    const int64_t c = 16;
    ParameterSet ps;
    MultiHeadSelfAttention mhsa(ps, "attn", c, 8, ctx64(0));
    EXPECT_EQ(ps.total_params(), 4 * (c * c + c));
    (void)mhsa;
}

TEST(FeedForwardNet, DeadSecondLayerGivesZero) {
    ParameterSet ps;
    FeedForward ffn(ps, "ffn", 8, 4, ctx64(1));
    EXPECT_EQ(ps.get("ffn.fc1.weight").shape(), (Shape{32, 8}));
    fill(ffn.fc2.w, 0.0);
    fill(ffn.fc2.b, 0.0);
    Tensor t = random_tensor({2, 3, 8}, Dtype::real64, 2);
    Tensor y = ffn.forward(t);
    EXPECT_EQ(max_abs_diff(y, Tensor::zeros(y.shape(), y.dtype())), 0.0);
}

TEST(TransformerUnitTest, DeadBranchesGiveIdentity) {
    ParameterSet ps;
    TransformerUnit unit(ps, "u", 8, 4, 4, ctx64(3));
    fill(unit.mhsa.wo.w, 0.0);
    fill(unit.mhsa.wo.b, 0.0);
    fill(unit.ffn.fc2.w, 0.0);
    fill(unit.ffn.fc2.b, 0.0);
    Tensor t = random_tensor({2, 6, 8}, Dtype::real64, 4);
    EXPECT_EQ(max_abs_diff(unit.forward(t), t), 0.0);
}

TEST(TransformerUnitTest, ParamCountFormula) {
    const int64_t c = 32;
    ParameterSet ps;
    TransformerUnit unit(ps, "u", c, 8, 4, ctx64(0));
    EXPECT_EQ(ps.total_params(), 12 * c * c + 13 * c);
    (void)unit;
}

TEST(BlockAttentionTest, EditsStayInsideTheirWindow) {
    ParameterSet ps;
    BlockAttention ba(ps, "b", 4, 2, 2, 4, ctx64(5));
    Tensor x1 = random_tensor({1, 4, 4, 4}, Dtype::real64, 6);
    Tensor x2 = x1.clone();
    x2.set_value_at(x2.numel() - 1, 9.0);  // pixel (3,3), window (1,1)
    Tensor y1 = ba.forward(x1);
    Tensor y2 = ba.forward(x2);
    bool changed_inside = false;
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t h = 0; h < 4; ++h)
            for (int64_t w = 0; w < 4; ++w) {
                int64_t flat = (c * 4 + h) * 4 + w;
                double a = y1.value_at(flat), b = y2.value_at(flat);
                if (h >= 2 && w >= 2) {
                    if (a != b) changed_inside = true;
                } else {
                    EXPECT_EQ(a, b) << "leak at c=" << c << " h=" << h << " w=" << w;
                }
            }
    EXPECT_TRUE(changed_inside);
}

TEST(BlockAttentionTest, TileSwapEquivariance) {
    ParameterSet ps;
    BlockAttention ba(ps, "b", 4, 2, 2, 4, ctx64(7));
    Tensor x = random_tensor({1, 4, 4, 4}, Dtype::real64, 8);
    // Swap tiles (0,0) and (1,1).
    auto swap_tiles = [](const Tensor& in) {
        Tensor out = in.clone();
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t p = 0; p < 2; ++p)
                for (int64_t q = 0; q < 2; ++q) {
                    int64_t a = (c * 4 + p) * 4 + q;
                    int64_t b = (c * 4 + (2 + p)) * 4 + (2 + q);
                    out.set_value_at(a, in.value_at(b));
                    out.set_value_at(b, in.value_at(a));
                }
        return out;
    };
    Tensor y_direct = ba.forward(swap_tiles(x));
    Tensor y_swapped = swap_tiles(ba.forward(x));
    EXPECT_TRUE(bits_equal(y_direct, y_swapped));
}

TEST(GridAttentionTest, EqualsTransposeConjugatedBlockAttention) {
    const int64_t hw = 8, g = 2;
    ParameterSet ps1, ps2;
    GridAttention ga(ps1, "u", 8, g, 4, 4, ctx64(9));
    BlockAttention ba(ps2, "u", 8, hw / g, 4, 4, ctx64(9));  // same names, same weights
    for (const auto& name : ps1.names())
        ASSERT_TRUE(bits_equal(ps1.get(name), ps2.get(name))) << name;
    Tensor x = random_tensor({2, 8, hw, hw}, Dtype::real64, 10);
    Tensor y_grid = ga.forward(x);
    Tensor y_block = ba.forward(transpose_block_axes(x, g));
    EXPECT_TRUE(bits_equal(y_grid, transpose_block_axes(y_block, hw / g)));
}

TEST(MultiAxisGradients, PartitionsArePurePermutations) {
    Tensor x = random_tensor({1, 3, 4, 4}, Dtype::real64, 11);
    mg_test::expect_grad_ok([&] { return weighted_sum(window_partition(x, 2)); }, {x});
    mg_test::expect_grad_ok([&] { return weighted_sum(grid_partition(x, 2)); }, {x});
    PartitionMeta meta{1, 3, 4, 4};
    Tensor t = random_tensor({4, 4, 3}, Dtype::real64, 12);
    mg_test::expect_grad_ok([&] { return weighted_sum(window_reverse(t, meta, 2)); }, {t});
    mg_test::expect_grad_ok([&] { return weighted_sum(grid_reverse(t, meta, 2)); }, {t});
}

TEST(MultiAxisGradients, TransformerUnitOnTokens) {
    ParameterSet ps;
    TransformerUnit unit(ps, "u", 8, 4, 4, ctx64(13));
    Tensor t = random_tensor({2, 3, 8}, Dtype::real64, 14);
    auto inputs = collect_params(ps);
    inputs.push_back(t);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(unit.forward(t)); }, inputs, 40);
}

TEST(MultiAxisGradients, BlockAndGridAttentionEndToEnd) {
    ParameterSet ps;
    BlockAttention ba(ps, "b", 4, 2, 2, 4, ctx64(15));
    randomize_params(ps, 18);
    Tensor x = random_tensor({1, 4, 4, 4}, Dtype::real64, 16);
    auto inputs = collect_params(ps);
    inputs.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(ba.forward(x)); }, inputs, 40,
                                    1e-6, 1e-5);

    ParameterSet ps2;
    GridAttention ga(ps2, "g", 4, 2, 2, 4, ctx64(17));
    randomize_params(ps2, 19);
    auto inputs2 = collect_params(ps2);
    inputs2.push_back(x);
    mg_test::expect_grad_ok_sampled([&] { return weighted_sum(ga.forward(x)); }, inputs2, 40,
                                    1e-6, 1e-5);
}
