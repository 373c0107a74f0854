#pragma once

// Multi-axis attention: window (block) partition for local attention within
// PxP tiles, grid partition for sparse global attention across a GxG lattice,
// and the shared pre-norm transformer unit applied to either token layout.

#include "layers.hpp"

namespace maxglavit {

struct PartitionMeta {
    int64_t n = 0, c = 0, h = 0, w = 0;
};

namespace detail {

// Bijective token remap between NCHW and [B', T, C] layouts. `block` converts
// x -> tokens when forward_to_tokens, tokens -> x otherwise; the index walk is
// identical either way, only the read/write direction flips.
template <typename MapFn>
Tensor token_remap(const char* op, Tensor x, Shape out_shape, MapFn map_pair,
                   int64_t pair_count) {
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xs = x.data<T>();
        T* os = out.data<T>();
        for (int64_t i = 0; i < pair_count; ++i) {
            auto [src, dst] = map_pair(i);
            os[size_t(dst)] = xs[size_t(src)];
        }
    });
    record_op(op, {x}, out, [x, out, map_pair, pair_count]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t i = 0; i < pair_count; ++i) {
                auto [src, dst] = map_pair(i);
                gx[size_t(src)] += go[size_t(dst)];
            }
        });
    });
    return out;
}

inline void check_divisible(const char* op, int64_t h, int64_t w, int64_t p) {
    check(p >= 1 && h % p == 0 && w % p == 0,
          std::string(op) + ": spatial size " + std::to_string(h) + "x" + std::to_string(w) +
              " not divisible by " + std::to_string(p));
}

}  // namespace detail

// [N,C,H,W] -> [N*(H/P)*(W/P), P*P, C]; window (i,j) holds the contiguous
// PxP tile at (i*P, j*P), tokens in row-major (p, q) order.
inline Tensor window_partition(Tensor x, int64_t p) {
    check_nchw("window_partition", x);
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::check_divisible("window_partition", h, w, p);
    int64_t nh = h / p, nw = w / p;
    auto map_pair = [=](int64_t i) {
        int64_t ch = i % c, rest = i / c;
        int64_t q = rest % p;
        rest /= p;
        int64_t pp = rest % p;
        rest /= p;
        int64_t j = rest % nw;
        rest /= nw;
        int64_t wi = rest % nh, nn = rest / nh;
        int64_t src = ((nn * c + ch) * h + (wi * p + pp)) * w + (j * p + q);
        int64_t dst = (((nn * nh + wi) * nw + j) * (p * p) + (pp * p + q)) * c + ch;
        return std::pair<int64_t, int64_t>(src, dst);
    };
    return detail::token_remap("window_partition", x, {n * nh * nw, p * p, c}, map_pair,
                               x.numel());
}

inline Tensor window_reverse(Tensor t, const PartitionMeta& meta, int64_t p) {
    check(t.rank() == 3, "window_reverse: tokens must be rank 3, got " + shape_str(t.shape()));
    int64_t n = meta.n, c = meta.c, h = meta.h, w = meta.w;
    detail::check_divisible("window_reverse", h, w, p);
    int64_t nh = h / p, nw = w / p;
    check(t.dim(0) == n * nh * nw && t.dim(1) == p * p && t.dim(2) == c,
          "window_reverse: token shape " + shape_str(t.shape()) + " does not match meta");
    auto map_pair = [=](int64_t i) {
        int64_t ch = i % c, rest = i / c;
        int64_t q = rest % p;
        rest /= p;
        int64_t pp = rest % p;
        rest /= p;
        int64_t j = rest % nw;
        rest /= nw;
        int64_t wi = rest % nh, nn = rest / nh;
        int64_t img = ((nn * c + ch) * h + (wi * p + pp)) * w + (j * p + q);
        int64_t tok = (((nn * nh + wi) * nw + j) * (p * p) + (pp * p + q)) * c + ch;
        return std::pair<int64_t, int64_t>(tok, img);
    };
    return detail::token_remap("window_reverse", t, {n, c, h, w}, map_pair, t.numel());
}

// [N,C,H,W] -> [N*G*G, (H/G)*(W/G), C]; partition (u,v) gathers the strided
// lattice of pixels (a*G+u, b*G+v), tokens in row-major (a, b) order.
inline Tensor grid_partition(Tensor x, int64_t g) {
    check_nchw("grid_partition", x);
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    detail::check_divisible("grid_partition", h, w, g);
    int64_t hg = h / g, wg = w / g;
    auto map_pair = [=](int64_t i) {
        int64_t ch = i % c, rest = i / c;
        int64_t b = rest % wg;
        rest /= wg;
        int64_t a = rest % hg;
        rest /= hg;
        int64_t v = rest % g;
        rest /= g;
        int64_t u = rest % g, nn = rest / g;
        int64_t src = ((nn * c + ch) * h + (a * g + u)) * w + (b * g + v);
        int64_t dst = (((nn * g + u) * g + v) * (hg * wg) + (a * wg + b)) * c + ch;
        return std::pair<int64_t, int64_t>(src, dst);
    };
    return detail::token_remap("grid_partition", x, {n * g * g, hg * wg, c}, map_pair,
                               x.numel());
}

inline Tensor grid_reverse(Tensor t, const PartitionMeta& meta, int64_t g) {
    check(t.rank() == 3, "grid_reverse: tokens must be rank 3, got " + shape_str(t.shape()));
    int64_t n = meta.n, c = meta.c, h = meta.h, w = meta.w;
    detail::check_divisible("grid_reverse", h, w, g);
    int64_t hg = h / g, wg = w / g;
    check(t.dim(0) == n * g * g && t.dim(1) == hg * wg && t.dim(2) == c,
          "grid_reverse: token shape " + shape_str(t.shape()) + " does not match meta");
    auto map_pair = [=](int64_t i) {
        int64_t ch = i % c, rest = i / c;
        int64_t b = rest % wg;
        rest /= wg;
        int64_t a = rest % hg;
        rest /= hg;
        int64_t v = rest % g;
        rest /= g;
        int64_t u = rest % g, nn = rest / g;
        int64_t img = ((nn * c + ch) * h + (a * g + u)) * w + (b * g + v);
        int64_t tok = (((nn * g + u) * g + v) * (hg * wg) + (a * wg + b)) * c + ch;
        return std::pair<int64_t, int64_t>(tok, img);
    };
    return detail::token_remap("grid_reverse", t, {n, c, h, w}, map_pair, t.numel());
}

struct MultiHeadSelfAttention {
    Linear wq, wk, wv, wo;
    int64_t channels = 0, head_dim = 0, heads = 0;

    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(ParameterSet& ps, const std::string& prefix, int64_t c,
                           int64_t head_dim_, const InitContext& ctx)
        : channels(c), head_dim(head_dim_) {
        check(head_dim >= 1 && c % head_dim == 0,
              "MultiHeadSelfAttention: head_dim " + std::to_string(head_dim) +
                  " must divide channels " + std::to_string(c) + " at " + prefix);
        heads = c / head_dim;
        wq = Linear(ps, prefix + ".wq", c, c, true, ctx);
        wk = Linear(ps, prefix + ".wk", c, c, true, ctx);
        wv = Linear(ps, prefix + ".wv", c, c, true, ctx);
        wo = Linear(ps, prefix + ".wo", c, c, true, ctx);
    }

    // tokens: [B, T, C]; attn_out (optional) receives the [B, heads, T, T]
    // softmax weights.
    Tensor forward(Tensor tokens, Tensor* attn_out = nullptr) const {
        check(tokens.rank() == 3 && tokens.dim(2) == channels,
              "MultiHeadSelfAttention: tokens must be [B, T, " + std::to_string(channels) +
                  "], got " + shape_str(tokens.shape()));
        int64_t b = tokens.dim(0), t = tokens.dim(1);
        auto split = [&](Tensor y) {
            return permute(reshape(y, {b, t, heads, head_dim}), {0, 2, 1, 3});
        };
        Tensor q = split(wq.forward(tokens));
        Tensor k = split(wk.forward(tokens));
        Tensor v = split(wv.forward(tokens));
        Tensor scores = mul_scalar(matmul(q, transpose_last2(k)),
                                   1.0 / std::sqrt(double(head_dim)));
        Tensor attn = softmax(scores, -1);
        if (attn_out) *attn_out = attn;
        Tensor ctxv = permute(matmul(attn, v), {0, 2, 1, 3});
        return wo.forward(reshape(ctxv, {b, t, channels}));
    }
};

struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(ParameterSet& ps, const std::string& prefix, int64_t c, int expansion,
                const InitContext& ctx) {
        fc1 = Linear(ps, prefix + ".fc1", c, c * expansion, true, ctx);
        fc2 = Linear(ps, prefix + ".fc2", c * expansion, c, true, ctx);
    }

    Tensor forward(Tensor x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// Pre-norm transformer unit: t += MHSA(LN(t)); t += FFN(LN(t)).
struct TransformerUnit {
    LayerNormTokens ln1, ln2;
    MultiHeadSelfAttention mhsa;
    FeedForward ffn;

    TransformerUnit() = default;
    TransformerUnit(ParameterSet& ps, const std::string& prefix, int64_t c, int64_t head_dim,
                    int ffn_expansion, const InitContext& ctx) {
        ln1 = LayerNormTokens(ps, prefix + ".ln1", c, ctx);
        mhsa = MultiHeadSelfAttention(ps, prefix + ".mhsa", c, head_dim, ctx);
        ln2 = LayerNormTokens(ps, prefix + ".ln2", c, ctx);
        ffn = FeedForward(ps, prefix + ".ffn", c, ffn_expansion, ctx);
    }

    Tensor forward(Tensor t, Tensor* attn_out = nullptr) const {
        t = add(t, mhsa.forward(ln1.forward(t), attn_out));
        return add(t, ffn.forward(ln2.forward(t)));
    }
};

struct BlockAttention {
    TransformerUnit unit;
    int64_t window = 7;

    BlockAttention() = default;
    BlockAttention(ParameterSet& ps, const std::string& prefix, int64_t c, int64_t window_,
                   int64_t head_dim, int ffn_expansion, const InitContext& ctx)
        : unit(ps, prefix, c, head_dim, ffn_expansion, ctx), window(window_) {}

    Tensor forward(Tensor x, Tensor* attn_out = nullptr) const {
        PartitionMeta meta{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
        Tensor t = window_partition(x, window);
        t = unit.forward(t, attn_out);
        return window_reverse(t, meta, window);
    }
};

struct GridAttention {
    TransformerUnit unit;
    int64_t grid = 7;

    GridAttention() = default;
    GridAttention(ParameterSet& ps, const std::string& prefix, int64_t c, int64_t grid_,
                  int64_t head_dim, int ffn_expansion, const InitContext& ctx)
        : unit(ps, prefix, c, head_dim, ffn_expansion, ctx), grid(grid_) {}

    Tensor forward(Tensor x, Tensor* attn_out = nullptr) const {
        PartitionMeta meta{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
        Tensor t = grid_partition(x, grid);
        t = unit.forward(t, attn_out);
        return grid_reverse(t, meta, grid);
    }
};

}  // namespace maxglavit
