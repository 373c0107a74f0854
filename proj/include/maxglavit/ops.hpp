#pragma once

// Differentiable tensor operations.
//
// Conventions: inputs are validated up front and violations throw
// std::invalid_argument naming the offending shapes; outputs are freshly
// allocated; every kernel iterates in fixed row-major order. Matmul and conv
// accumulate in the storage scalar type; mean/variance style reductions
// accumulate in double for accuracy. Transcendentals evaluate through double.

#include <cmath>

#include "autograd.hpp"

namespace maxglavit {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// ---------------------------------------------------------------- elementwise

namespace detail {

template <class T, class FwdT, class BwdT>
Tensor binary_ew(const char* name, Tensor a, Tensor b, FwdT fwd, BwdT bwd);

template <class Fwd, class Bwd>
Tensor binary_op(const char* name, Tensor a, Tensor b, Fwd fwd, Bwd bwd) {
    check_same_shape(name, a, b);
    check_same_dtype(name, a, b);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    int64_t n = a.numel();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    });
    record_op(name, {a, b}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            T* gb = b.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) {
                auto [da, db] = bwd(pa[i], pb[i], go[i]);
                ga[i] += da;
                gb[i] += db;
            }
        });
    });
    return out;
}

}  // namespace detail

inline Tensor add(Tensor a, Tensor b) {
    return detail::binary_op(
        "add", a, b, [](auto x, auto y) { return x + y; },
        [](auto, auto, auto g) { return std::pair{g, g}; });
}

inline Tensor sub(Tensor a, Tensor b) {
    return detail::binary_op(
        "sub", a, b, [](auto x, auto y) { return x - y; },
        [](auto, auto, auto g) { return std::pair{g, decltype(g)(-g)}; });
}

inline Tensor mul(Tensor a, Tensor b) {
    return detail::binary_op(
        "mul", a, b, [](auto x, auto y) { return x * y; },
        [](auto x, auto y, auto g) { return std::pair{g * y, g * x}; });
}

inline Tensor div(Tensor a, Tensor b) {
    return detail::binary_op(
        "div", a, b, [](auto x, auto y) { return x / y; },
        [](auto x, auto y, auto g) {
            auto da = g / y;
            return std::pair{da, decltype(da)(-g * x / (y * y))};
        });
}

inline Tensor add_scalar(Tensor a, double c) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    int64_t n = a.numel();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + T(c);
    });
    record_op("add_scalar", {a}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
        });
    });
    return out;
}

inline Tensor mul_scalar(Tensor a, double c) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    int64_t n = a.numel();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = T(double(pa[i]) * c);
    });
    record_op("mul_scalar", {a}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) ga[i] += T(double(go[i]) * c);
        });
    });
    return out;
}

// --------------------------------------------------------------------- unary

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, Tensor a, Fwd fwd, Bwd bwd) {
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    int64_t n = a.numel();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = T(fwd(double(pa[i])));
    });
    record_op(name, {a}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pa = a.data<T>();
            const T* po = out.data<T>();
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            for (int64_t i = 0; i < n; ++i)
                ga[i] += T(double(go[i]) * bwd(double(pa[i]), double(po[i])));
        });
    });
    return out;
}

}  // namespace detail

inline Tensor relu(Tensor a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Exact erf form: 0.5 * x * (1 + erf(x / sqrt(2))).
inline Tensor gelu(Tensor a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op(
        "gelu", a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

inline Tensor sigmoid(Tensor a) {
    return detail::unary_op(
        "sigmoid", a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

// Derivative at 0 is taken as 0 (subgradient) so zero inputs stay finite.
inline Tensor sqrt(Tensor a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

// ------------------------------------------------------------ shape movement

inline Tensor reshape(Tensor a, Shape new_shape) {
    check(shape_numel(new_shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tensor out = Tensor::zeros(std::move(new_shape), a.dtype());
    int64_t n = a.numel();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        std::memcpy(po, pa, size_t(n) * sizeof(T));
    });
    record_op("reshape", {a}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
        });
    });
    return out;
}

inline Tensor permute(Tensor a, const std::vector<int>& perm) {
    size_t r = a.rank();
    check(perm.size() == r, "permute: axis list size mismatch for " + shape_str(a.shape()));
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) {
        check(perm[i] >= 0 && size_t(perm[i]) < r && !seen[size_t(perm[i])],
              "permute: invalid axis permutation");
        seen[size_t(perm[i])] = true;
        out_shape[i] = a.shape()[size_t(perm[i])];
    }
    Tensor out = Tensor::zeros(out_shape, a.dtype());
    auto in_strides = row_major_strides(a.shape());
    // stride of output axis i in the input layout
    std::vector<int64_t> gather(r);
    for (size_t i = 0; i < r; ++i) gather[i] = in_strides[size_t(perm[i])];
    int64_t n = a.numel();
    auto map_index = [out_shape, gather, r](int64_t flat) {
        int64_t src = 0;
        for (size_t i = r; i-- > 0;) {
            src += (flat % out_shape[i]) * gather[i];
            flat /= out_shape[i];
        }
        return src;
    };
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[map_index(i)];
    });
    record_op("permute", {a}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) ga[map_index(i)] += go[i];
        });
    });
    return out;
}

inline Tensor transpose_last2(Tensor a) {
    check(a.rank() >= 2, "transpose_last2: rank must be >= 2, got " + shape_str(a.shape()));
    std::vector<int> perm(a.rank());
    for (size_t i = 0; i < a.rank(); ++i) perm[i] = int(i);
    std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
    return permute(a, perm);
}

// -------------------------------------------------------------------- matmul

// Batched matrix product. Leading (batch) dimensions must match exactly, or
// one operand may be a plain matrix, which is then shared across the batch.
inline Tensor matmul(Tensor a, Tensor b) {
    check_same_dtype("matmul", a, b);
    check(a.rank() >= 2 && b.rank() >= 2,
          "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
              shape_str(b.shape()));
    int64_t M = a.shape()[a.rank() - 2], K = a.shape()[a.rank() - 1];
    int64_t K2 = b.shape()[b.rank() - 2], N = b.shape()[b.rank() - 1];
    check(K == K2, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    check(a_batch == b_batch || a_batch.empty() || b_batch.empty(),
          "matmul: batch dimensions incompatible, " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
    Shape batch = a_batch.empty() ? b_batch : a_batch;
    int64_t B = shape_numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor out = Tensor::zeros(out_shape, a.dtype());

    bool a_shared = a_batch.empty() && !b_batch.empty();
    bool b_shared = b_batch.empty() && !a_batch.empty();
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        for (int64_t bi = 0; bi < B; ++bi) {
            const T* A = pa + (a_shared ? 0 : bi * M * K);
            const T* Bm = pb + (b_shared ? 0 : bi * K * N);
            T* O = po + bi * M * N;
            for (int64_t i = 0; i < M; ++i)
                for (int64_t k = 0; k < K; ++k) {
                    T av = A[i * K + k];
                    const T* brow = Bm + k * N;
                    T* orow = O + i * N;
                    for (int64_t j = 0; j < N; ++j) orow[j] += av * brow[j];
                }
        }
    });
    bool need_da = a.requires_grad(), need_db = b.requires_grad();
    record_op("matmul", {a, b}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            const T* go = out.grad_data<T>();
            for (int64_t bi = 0; bi < B; ++bi) {
                const T* A = pa + (a_shared ? 0 : bi * M * K);
                const T* Bm = pb + (b_shared ? 0 : bi * K * N);
                const T* G = go + bi * M * N;
                if (need_da) {
                    T* ga = a.grad_data<T>() + (a_shared ? 0 : bi * M * K);
                    // dA = G * B^T
                    for (int64_t i = 0; i < M; ++i)
                        for (int64_t j = 0; j < N; ++j) {
                            T gv = G[i * N + j];
                            const T* brow = Bm + j;  // column j of B
                            for (int64_t k = 0; k < K; ++k) ga[i * K + k] += gv * brow[k * N];
                        }
                }
                if (need_db) {
                    T* gb = b.grad_data<T>() + (b_shared ? 0 : bi * K * N);
                    // dB = A^T * G
                    for (int64_t k = 0; k < K; ++k)
                        for (int64_t i = 0; i < M; ++i) {
                            T av = A[i * K + k];
                            const T* grow = G + i * N;
                            T* gbrow = gb + k * N;
                            for (int64_t j = 0; j < N; ++j) gbrow[j] += av * grow[j];
                        }
                }
            }
        });
    });
    return out;
}

// -------------------------------------------------------------------- linear

// y[..., o] = sum_i x[..., i] * w[o, i] + b[o]; bias may be undefined.
inline Tensor linear(Tensor x, Tensor w, Tensor b) {
    check(x.rank() >= 1, "linear: input rank must be >= 1");
    check(w.rank() == 2, "linear: weight must be [out, in], got " + shape_str(w.shape()));
    check_same_dtype("linear", x, w);
    int64_t in = x.shape()[x.rank() - 1];
    int64_t out_f = w.shape()[0];
    check(w.shape()[1] == in, "linear: input features " + shape_str(x.shape()) +
                                  " do not match weight " + shape_str(w.shape()));
    if (b.defined())
        check(b.shape() == Shape{out_f}, "linear: bias shape " + shape_str(b.shape()) +
                                             " does not match weight " + shape_str(w.shape()));
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 1] = out_f;
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    int64_t rows = x.numel() / in;
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pw = w.data<T>();
        const T* pb = b.defined() ? b.data<T>() : nullptr;
        T* po = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * in;
            T* orow = po + r * out_f;
            for (int64_t o = 0; o < out_f; ++o) {
                T acc = pb ? pb[o] : T(0);
                const T* wr = pw + o * in;
                for (int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
                orow[o] = acc;
            }
        }
    });
    bool need_dx = x.requires_grad();
    record_op("linear", {x, w, b}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pw = w.data<T>();
            const T* go = out.grad_data<T>();
            T* gw = w.grad_data<T>();
            T* gb = b.defined() ? b.grad_data<T>() : nullptr;
            T* gx = need_dx ? x.grad_data<T>() : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * in;
                const T* grow = go + r * out_f;
                T* gxr = gx ? gx + r * in : nullptr;
                for (int64_t o = 0; o < out_f; ++o) {
                    T gv = grow[o];
                    const T* wr = pw + o * in;
                    T* gwr = gw + o * in;
                    for (int64_t i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                    if (gxr)
                        for (int64_t i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                    if (gb) gb[o] += gv;
                }
            }
        });
    });
    return out;
}

// --------------------------------------------------------------- convolution

// Zero padding; output extent floor((H + 2p - k) / stride) + 1. Asymmetric
// (ph, pw) supports the 1xk / kx1 kernels of the Inception mixer.
inline Tensor conv2d(Tensor x, Tensor w, Tensor bias, int stride,
                     std::pair<int, int> padding, int groups = 1) {
    check(x.rank() == 4, "conv2d: input must be NCHW, got " + shape_str(x.shape()));
    check(w.rank() == 4, "conv2d: weight must be [out, in/groups, kh, kw], got " +
                             shape_str(w.shape()));
    check_same_dtype("conv2d", x, w);
    check(stride >= 1, "conv2d: stride must be >= 1");
    check(groups >= 1, "conv2d: groups must be >= 1");
    auto [ph, pw_] = padding;
    check(ph >= 0 && pw_ >= 0, "conv2d: padding must be >= 0");
    int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t Co = w.dim(0), Cig = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    check(Ci % groups == 0 && Co % groups == 0,
          "conv2d: channels not divisible by groups: input " + shape_str(x.shape()) +
              ", weight " + shape_str(w.shape()) + ", groups " + std::to_string(groups));
    check(Cig == Ci / groups, "conv2d: weight in-channels " + shape_str(w.shape()) +
                                  " do not match input " + shape_str(x.shape()) + " with groups " +
                                  std::to_string(groups));
    check(kh <= H + 2 * ph && kw <= W + 2 * pw_,
          "conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
              shape_str(x.shape()));
    if (bias.defined())
        check(bias.shape() == Shape{Co}, "conv2d: bias shape " + shape_str(bias.shape()) +
                                             " does not match weight " + shape_str(w.shape()));
    int64_t Ho = (H + 2 * ph - kh) / stride + 1;
    int64_t Wo = (W + 2 * pw_ - kw) / stride + 1;
    Tensor out = Tensor::zeros({N, Co, Ho, Wo}, x.dtype());
    int64_t cog = Co / groups;

    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pwv = w.data<T>();
        const T* pb = bias.defined() ? bias.data<T>() : nullptr;
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Co; ++co) {
                int64_t g = co / cog;
                const T* wbase = pwv + co * Cig * kh * kw;
                T bval = pb ? pb[co] : T(0);
                for (int64_t ho = 0; ho < Ho; ++ho)
                    for (int64_t wo = 0; wo < Wo; ++wo) {
                        T acc = bval;
                        int64_t h0 = ho * stride - ph, w0 = wo * stride - pw_;
                        for (int64_t cg = 0; cg < Cig; ++cg) {
                            const T* xc = px + ((n * Ci + g * Cig + cg) * H) * W;
                            const T* wc = wbase + cg * kh * kw;
                            for (int64_t ki = 0; ki < kh; ++ki) {
                                int64_t h = h0 + ki;
                                if (h < 0 || h >= H) continue;
                                const T* xrow = xc + h * W;
                                const T* wrow = wc + ki * kw;
                                for (int64_t kj = 0; kj < kw; ++kj) {
                                    int64_t wp = w0 + kj;
                                    if (wp < 0 || wp >= W) continue;
                                    acc += xrow[wp] * wrow[kj];
                                }
                            }
                        }
                        po[((n * Co + co) * Ho + ho) * Wo + wo] = acc;
                    }
            }
    });

    bool need_dx = x.requires_grad();
    record_op("conv2d", {x, w, bias}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pwv = w.data<T>();
            const T* go = out.grad_data<T>();
            T* gw = w.grad_data<T>();
            T* gb = bias.defined() ? bias.grad_data<T>() : nullptr;
            T* gx = need_dx ? x.grad_data<T>() : nullptr;
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Co; ++co) {
                    int64_t g = co / cog;
                    const T* wbase = pwv + co * Cig * kh * kw;
                    T* gwbase = gw + co * Cig * kh * kw;
                    for (int64_t ho = 0; ho < Ho; ++ho)
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            T gv = go[((n * Co + co) * Ho + ho) * Wo + wo];
                            if (gv == T(0)) continue;
                            if (gb) gb[co] += gv;
                            int64_t h0 = ho * stride - ph, w0 = wo * stride - pw_;
                            for (int64_t cg = 0; cg < Cig; ++cg) {
                                int64_t cbase = ((n * Ci + g * Cig + cg) * H) * W;
                                const T* xc = px + cbase;
                                const T* wc = wbase + cg * kh * kw;
                                T* gwc = gwbase + cg * kh * kw;
                                T* gxc = gx ? gx + cbase : nullptr;
                                for (int64_t ki = 0; ki < kh; ++ki) {
                                    int64_t h = h0 + ki;
                                    if (h < 0 || h >= H) continue;
                                    for (int64_t kj = 0; kj < kw; ++kj) {
                                        int64_t wp = w0 + kj;
                                        if (wp < 0 || wp >= W) continue;
                                        gwc[ki * kw + kj] += gv * xc[h * W + wp];
                                        if (gxc) gxc[h * W + wp] += gv * wc[ki * kw + kj];
                                    }
                                }
                            }
                        }
                }
        });
    });
    return out;
}

inline Tensor conv2d(Tensor x, Tensor w, Tensor bias, int stride = 1,
                     int padding = 0, int groups = 1) {
    return conv2d(x, w, bias, stride, std::pair<int, int>{padding, padding}, groups);
}

// 1-D convolution over [N, C, L]; kernel size must be odd so padding keeps
// the length with p = k / 2.
inline Tensor conv1d(Tensor x, Tensor w, Tensor bias, int stride = 1,
                     int padding = 0, int groups = 1) {
    check(x.rank() == 3, "conv1d: input must be [N, C, L], got " + shape_str(x.shape()));
    check(w.rank() == 3, "conv1d: weight must be [out, in/groups, k], got " +
                             shape_str(w.shape()));
    check(w.dim(2) % 2 == 1, "conv1d: kernel size must be odd, got " + shape_str(w.shape()));
    Tensor x4 = reshape(x, {x.dim(0), x.dim(1), 1, x.dim(2)});
    Tensor w4 = reshape(w, {w.dim(0), w.dim(1), 1, w.dim(2)});
    Tensor y4 = conv2d(x4, w4, bias, stride, std::pair<int, int>{0, padding}, groups);
    return reshape(y4, {y4.dim(0), y4.dim(1), y4.dim(3)});
}

// ------------------------------------------------------------------- pooling

inline void check_nchw(const char* op, Tensor x) {
    check(x.rank() == 4, std::string(op) + ": input must be NCHW, got " + shape_str(x.shape()));
}

inline Tensor global_avg_pool(Tensor x) {
    check_nchw("global_avg_pool", x);
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t HW = H * W;
    Tensor out = Tensor::zeros({N, C, 1, 1}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            double acc = 0.0;
            const T* base = px + nc * HW;
            for (int64_t i = 0; i < HW; ++i) acc += double(base[i]);
            po[nc] = T(acc / double(HW));
        }
    });
    record_op("global_avg_pool", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                T gv = T(double(go[nc]) / double(HW));
                T* base = gx + nc * HW;
                for (int64_t i = 0; i < HW; ++i) base[i] += gv;
            }
        });
    });
    return out;
}

// Max over the spatial extent; ties route the gradient to the first maximum
// in scan order.
inline Tensor spatial_max_pool(Tensor x) {
    check_nchw("spatial_max_pool", x);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({N, C, 1, 1}, x.dtype());
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N * C));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* base = px + nc * HW;
            int64_t best = 0;
            for (int64_t i = 1; i < HW; ++i)
                if (base[i] > base[best]) best = i;
            (*argmax)[size_t(nc)] = best;
            po[nc] = base[best];
        }
    });
    record_op("spatial_max_pool", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t nc = 0; nc < N * C; ++nc)
                gx[nc * HW + (*argmax)[size_t(nc)]] += go[nc];
        });
    });
    return out;
}

inline Tensor avg_pool2d_2x2(Tensor x) {
    check_nchw("avg_pool2d_2x2", x);
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0,
          "avg_pool2d_2x2: spatial dims must be even, got " + shape_str(x.shape()));
    int64_t Ho = H / 2, Wo = W / 2;
    Tensor out = Tensor::zeros({N, C, Ho, Wo}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* in = px + nc * H * W;
            T* dst = po + nc * Ho * Wo;
            for (int64_t i = 0; i < Ho; ++i)
                for (int64_t j = 0; j < Wo; ++j) {
                    const T* r0 = in + (2 * i) * W + 2 * j;
                    const T* r1 = r0 + W;
                    dst[i * Wo + j] = T((double(r0[0]) + double(r0[1]) + double(r1[0]) +
                                         double(r1[1])) * 0.25);
                }
        }
    });
    record_op("avg_pool2d_2x2", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                const T* gsrc = go + nc * Ho * Wo;
                T* gdst = gx + nc * H * W;
                for (int64_t i = 0; i < Ho; ++i)
                    for (int64_t j = 0; j < Wo; ++j) {
                        T gv = T(double(gsrc[i * Wo + j]) * 0.25);
                        T* r0 = gdst + (2 * i) * W + 2 * j;
                        r0[0] += gv;
                        r0[1] += gv;
                        r0[W] += gv;
                        r0[W + 1] += gv;
                    }
            }
        });
    });
    return out;
}

// Mean over channels: [N, C, H, W] -> [N, 1, H, W].
inline Tensor channel_mean(Tensor x) {
    check_nchw("channel_mean", x);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({N, 1, x.dim(2), x.dim(3)}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                double acc = 0.0;
                for (int64_t c = 0; c < C; ++c) acc += double(px[(n * C + c) * HW + i]);
                po[n * HW + i] = T(acc / double(C));
            }
    });
    record_op("channel_mean", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < HW; ++i) {
                    T gv = T(double(go[n * HW + i]) / double(C));
                    for (int64_t c = 0; c < C; ++c) gx[(n * C + c) * HW + i] += gv;
                }
        });
    });
    return out;
}

// Max over channels: [N, C, H, W] -> [N, 1, H, W]; first-max tie break.
inline Tensor channel_max(Tensor x) {
    check_nchw("channel_max", x);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({N, 1, x.dim(2), x.dim(3)}, x.dtype());
    auto argmax = std::make_shared<std::vector<int64_t>>(size_t(N * HW));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                int64_t best = 0;
                T bv = px[n * C * HW + i];
                for (int64_t c = 1; c < C; ++c) {
                    T v = px[(n * C + c) * HW + i];
                    if (v > bv) {
                        bv = v;
                        best = c;
                    }
                }
                (*argmax)[size_t(n * HW + i)] = best;
                po[n * HW + i] = bv;
            }
    });
    record_op("channel_max", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < HW; ++i)
                    gx[(n * C + (*argmax)[size_t(n * HW + i)]) * HW + i] += go[n * HW + i];
        });
    });
    return out;
}

// Sum over the spatial extent: [N, C, H, W] -> [N, C, 1, 1].
inline Tensor spatial_sum(Tensor x) {
    check_nchw("spatial_sum", x);
    int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({x.dim(0), x.dim(1), 1, 1}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t nc = 0; nc < NC; ++nc) {
            double acc = 0.0;
            for (int64_t i = 0; i < HW; ++i) acc += double(px[nc * HW + i]);
            po[nc] = T(acc);
        }
    });
    record_op("spatial_sum", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t nc = 0; nc < NC; ++nc)
                for (int64_t i = 0; i < HW; ++i) gx[nc * HW + i] += go[nc];
        });
    });
    return out;
}

// Mean over channels of a [N, C, 1, 1] descriptor -> [N, 1, 1, 1].
inline Tensor mean_channels_nc11(Tensor x) {
    check_nchw("mean_channels_nc11", x);
    check(x.dim(2) == 1 && x.dim(3) == 1,
          "mean_channels_nc11: expected [N, C, 1, 1], got " + shape_str(x.shape()));
    int64_t N = x.dim(0), C = x.dim(1);
    Tensor out = Tensor::zeros({N, 1, 1, 1}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n) {
            double acc = 0.0;
            for (int64_t c = 0; c < C; ++c) acc += double(px[n * C + c]);
            po[n] = T(acc / double(C));
        }
    });
    record_op("mean_channels_nc11", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t n = 0; n < N; ++n) {
                T gv = T(double(go[n]) / double(C));
                for (int64_t c = 0; c < C; ++c) gx[n * C + c] += gv;
            }
        });
    });
    return out;
}

// [N, C, 1, 1] / [N, 1, 1, 1], the denominator broadcast over channels.
inline Tensor div_broadcast_c(Tensor a, Tensor b) {
    check_nchw("div_broadcast_c", a);
    check(a.dim(2) == 1 && a.dim(3) == 1 && b.rank() == 4 && b.dim(1) == 1 && b.dim(2) == 1 &&
              b.dim(3) == 1 && b.dim(0) == a.dim(0),
          "div_broadcast_c: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    check_same_dtype("div_broadcast_c", a, b);
    int64_t N = a.dim(0), C = a.dim(1);
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch_dtype(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) po[n * C + c] = pa[n * C + c] / pb[n];
    });
    record_op("div_broadcast_c", {a, b}, out, [=]() mutable {
        dispatch_dtype(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            const T* go = out.grad_data<T>();
            T* ga = a.grad_data<T>();
            T* gb = b.grad_data<T>();
            for (int64_t n = 0; n < N; ++n) {
                double gacc = 0.0;
                for (int64_t c = 0; c < C; ++c) {
                    ga[n * C + c] += go[n * C + c] / pb[n];
                    gacc -= double(go[n * C + c]) * double(pa[n * C + c]) /
                            (double(pb[n]) * double(pb[n]));
                }
                gb[n] += T(gacc);
            }
        });
    });
    return out;
}

// [N, C, H, W] * [N, C, 1, 1] gate.
inline Tensor mul_channels(Tensor x, Tensor s) {
    check_nchw("mul_channels", x);
    check(s.rank() == 4 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1) && s.dim(2) == 1 &&
              s.dim(3) == 1,
          "mul_channels: gate shape " + shape_str(s.shape()) + " does not match input " +
              shape_str(x.shape()));
    check_same_dtype("mul_channels", x, s);
    int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* ps = s.data<T>();
        T* po = out.data<T>();
        for (int64_t nc = 0; nc < NC; ++nc) {
            T sv = ps[nc];
            for (int64_t i = 0; i < HW; ++i) po[nc * HW + i] = px[nc * HW + i] * sv;
        }
    });
    record_op("mul_channels", {x, s}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* ps = s.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gs = s.grad_data<T>();
            for (int64_t nc = 0; nc < NC; ++nc) {
                T sv = ps[nc];
                double acc = 0.0;
                for (int64_t i = 0; i < HW; ++i) {
                    gx[nc * HW + i] += go[nc * HW + i] * sv;
                    acc += double(go[nc * HW + i]) * double(px[nc * HW + i]);
                }
                gs[nc] += T(acc);
            }
        });
    });
    return out;
}

// [N, C, H, W] * [N, 1, H, W] mask.
inline Tensor mul_spatial(Tensor x, Tensor m) {
    check_nchw("mul_spatial", x);
    check(m.rank() == 4 && m.dim(0) == x.dim(0) && m.dim(1) == 1 && m.dim(2) == x.dim(2) &&
              m.dim(3) == x.dim(3),
          "mul_spatial: mask shape " + shape_str(m.shape()) + " does not match input " +
              shape_str(x.shape()));
    check_same_dtype("mul_spatial", x, m);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pm = m.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < HW; ++i)
                    po[(n * C + c) * HW + i] = px[(n * C + c) * HW + i] * pm[n * HW + i];
    });
    record_op("mul_spatial", {x, m}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pm = m.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gm = m.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < HW; ++i) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        int64_t idx = (n * C + c) * HW + i;
                        gx[idx] += go[idx] * pm[n * HW + i];
                        acc += double(go[idx]) * double(px[idx]);
                    }
                    gm[n * HW + i] += T(acc);
                }
        });
    });
    return out;
}

// Per-channel affine pieces with [C] parameters broadcast over N, H, W.
inline Tensor scale_channels(Tensor x, Tensor g) {
    check_nchw("scale_channels", x);
    check(g.rank() == 1 && g.dim(0) == x.dim(1),
          "scale_channels: scale shape " + shape_str(g.shape()) + " does not match input " +
              shape_str(x.shape()));
    check_same_dtype("scale_channels", x, g);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pg = g.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                T gv = pg[c];
                const T* xin = px + (n * C + c) * HW;
                T* dst = po + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) dst[i] = xin[i] * gv;
            }
    });
    record_op("scale_channels", {x, g}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pg = g.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gg = g.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    int64_t base = (n * C + c) * HW;
                    double acc = 0.0;
                    for (int64_t i = 0; i < HW; ++i) {
                        gx[base + i] += go[base + i] * pg[c];
                        acc += double(go[base + i]) * double(px[base + i]);
                    }
                    gg[c] += T(acc);
                }
        });
    });
    return out;
}

inline Tensor bias_channels(Tensor x, Tensor b) {
    check_nchw("bias_channels", x);
    check(b.rank() == 1 && b.dim(0) == x.dim(1),
          "bias_channels: bias shape " + shape_str(b.shape()) + " does not match input " +
              shape_str(x.shape()));
    check_same_dtype("bias_channels", x, b);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                T bv = pb[c];
                int64_t base = (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) po[base + i] = px[base + i] + bv;
            }
    });
    record_op("bias_channels", {x, b}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gb = b.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    int64_t base = (n * C + c) * HW;
                    double acc = 0.0;
                    for (int64_t i = 0; i < HW; ++i) {
                        gx[base + i] += go[base + i];
                        acc += double(go[base + i]);
                    }
                    gb[c] += T(acc);
                }
        });
    });
    return out;
}

// --------------------------------------------------------- channel narrowing

inline Tensor narrow_channels(Tensor x, int64_t start, int64_t len) {
    check_nchw("narrow_channels", x);
    check(start >= 0 && len >= 1 && start + len <= x.dim(1),
          "narrow_channels: slice [" + std::to_string(start) + ", " +
              std::to_string(start + len) + ") out of range for " + shape_str(x.shape()));
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out = Tensor::zeros({N, len, x.dim(2), x.dim(3)}, x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < len; ++c)
                std::memcpy(po + (n * len + c) * HW, px + (n * C + start + c) * HW,
                            size_t(HW) * sizeof(T));
    });
    record_op("narrow_channels", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < len; ++c) {
                    const T* src = go + (n * len + c) * HW;
                    T* dst = gx + (n * C + start + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) dst[i] += src[i];
                }
        });
    });
    return out;
}

inline Tensor concat_channels(std::vector<Tensor> parts) {
    check(!parts.empty(), "concat_channels: no inputs");
    const Tensor& first = parts[0];
    check_nchw("concat_channels", first);
    int64_t N = first.dim(0), H = first.dim(2), W = first.dim(3), HW = H * W;
    int64_t C = 0;
    for (const Tensor& p : parts) {
        check_nchw("concat_channels", p);
        check(p.dim(0) == N && p.dim(2) == H && p.dim(3) == W,
              "concat_channels: shape " + shape_str(p.shape()) + " does not match " +
                  shape_str(first.shape()));
        check_same_dtype("concat_channels", first, p);
        C += p.dim(1);
    }
    Tensor out = Tensor::zeros({N, C, H, W}, first.dtype());
    dispatch_dtype(first.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t coff = 0;
        for (const Tensor& p : parts) {
            const T* pp = p.data<T>();
            int64_t pc = p.dim(1);
            for (int64_t n = 0; n < N; ++n)
                std::memcpy(po + (n * C + coff) * HW, pp + n * pc * HW,
                            size_t(pc * HW) * sizeof(T));
            coff += pc;
        }
    });
    bool rec = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) rec = true;
    if (rec && active_record()) {
        OpNode node;
        node.op = "concat_channels";
        for (const Tensor& p : parts) node.inputs.push_back(p.impl());
        node.output = out.impl();
        auto parts_copy = parts;
        Tensor out_copy = out;
        node.backward = [parts_copy, out_copy, N, C, HW]() mutable {
            dispatch_dtype(out_copy.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* go = out_copy.grad_data<T>();
                int64_t coff = 0;
                for (Tensor& p : parts_copy) {
                    T* gp = p.grad_data<T>();
                    int64_t pc = p.dim(1);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* src = go + (n * C + coff) * HW;
                        T* dst = gp + n * pc * HW;
                        for (int64_t i = 0; i < pc * HW; ++i) dst[i] += src[i];
                    }
                    coff += pc;
                }
            });
        };
        out.set_requires_grad(true);
        active_record()->append(std::move(node));
    }
    return out;
}

// ------------------------------------------------------------------- softmax

// Numerically stable softmax along one axis (negative counts from the back).
inline Tensor softmax(Tensor x, int axis = -1) {
    int r = int(x.rank());
    check(r >= 1, "softmax: input must have rank >= 1");
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "softmax: axis out of range for " + shape_str(x.shape()));
    int64_t K = x.shape()[size_t(axis)];
    int64_t inner = 1;
    for (int i = axis + 1; i < r; ++i) inner *= x.shape()[size_t(i)];
    int64_t outer = x.numel() / (K * inner);
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                int64_t base = o * K * inner + in;
                double mx = double(px[base]);
                for (int64_t k = 1; k < K; ++k)
                    mx = std::max(mx, double(px[base + k * inner]));
                double denom = 0.0;
                for (int64_t k = 0; k < K; ++k)
                    denom += std::exp(double(px[base + k * inner]) - mx);
                for (int64_t k = 0; k < K; ++k)
                    po[base + k * inner] =
                        T(std::exp(double(px[base + k * inner]) - mx) / denom);
            }
    });
    record_op("softmax", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* py = out.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    int64_t base = o * K * inner + in;
                    double dot = 0.0;
                    for (int64_t k = 0; k < K; ++k)
                        dot += double(go[base + k * inner]) * double(py[base + k * inner]);
                    for (int64_t k = 0; k < K; ++k)
                        gx[base + k * inner] +=
                            T(double(py[base + k * inner]) *
                              (double(go[base + k * inner]) - dot));
                }
        });
    });
    return out;
}

// ----------------------------------------------------------------- reduction

inline Tensor sum(Tensor x) {
    Tensor out = Tensor::zeros(Shape{}, x.dtype());
    int64_t n = x.numel();
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += double(px[i]);
        out.data<T>()[0] = T(acc);
    });
    record_op("sum", {x}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            T gv = out.grad_data<T>()[0];
            T* gx = x.grad_data<T>();
            for (int64_t i = 0; i < n; ++i) gx[i] += gv;
        });
    });
    return out;
}

// ------------------------------------------------------------- normalization

// Batch norm over (N, H, W) per channel. Training mode normalizes with the
// biased batch statistics and updates the running buffers in place with the
// same biased variance; eval mode uses the running buffers.
inline Tensor batchnorm2d(Tensor x, Tensor gamma, Tensor beta,
                          Tensor running_mean, Tensor running_var, bool training,
                          double momentum = 0.1, double eps = 1e-5) {
    check_nchw("batchnorm2d", x);
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const auto* p : {&gamma, &beta, &running_mean, &running_var})
        check(p->defined() && p->rank() == 1 && p->dim(0) == C,
              "batchnorm2d: parameter shape does not match input " + shape_str(x.shape()));
    int64_t M = N * H * W;
    if (training)
        check(M >= 2, "batchnorm2d: training mode needs N*H*W >= 2, got " +
                          shape_str(x.shape()));
    int64_t HW = H * W;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    auto mean = std::make_shared<std::vector<double>>(size_t(C));
    auto var = std::make_shared<std::vector<double>>(size_t(C));
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pg = gamma.data<T>();
        const T* pb = beta.data<T>();
        T* po = out.data<T>();
        for (int64_t c = 0; c < C; ++c) {
            double m, v;
            if (training) {
                double s = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* base = px + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) s += double(base[i]);
                }
                m = s / double(M);
                double sq = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* base = px + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        double d = double(base[i]) - m;
                        sq += d * d;
                    }
                }
                v = sq / double(M);
                running_mean.set_value_at(c, (1.0 - momentum) * running_mean.value_at(c) +
                                                 momentum * m);
                running_var.set_value_at(c, (1.0 - momentum) * running_var.value_at(c) +
                                                momentum * v);
            } else {
                m = running_mean.value_at(c);
                v = running_var.value_at(c);
            }
            (*mean)[size_t(c)] = m;
            (*var)[size_t(c)] = v;
            double inv = 1.0 / std::sqrt(v + eps);
            double g = double(pg[c]), bv = double(pb[c]);
            for (int64_t n = 0; n < N; ++n) {
                const T* base = px + (n * C + c) * HW;
                T* dst = po + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i)
                    dst[i] = T((double(base[i]) - m) * inv * g + bv);
            }
        }
    });
    record_op("batchnorm2d", {x, gamma, beta}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pg = gamma.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gg = gamma.grad_data<T>();
            T* gb = beta.grad_data<T>();
            for (int64_t c = 0; c < C; ++c) {
                double m = (*mean)[size_t(c)], v = (*var)[size_t(c)];
                double inv = 1.0 / std::sqrt(v + eps);
                double g = double(pg[c]);
                double sum_dy = 0.0, sum_dy_xh = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* xb = px + (n * C + c) * HW;
                    const T* gob = go + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        double xh = (double(xb[i]) - m) * inv;
                        sum_dy += double(gob[i]);
                        sum_dy_xh += double(gob[i]) * xh;
                    }
                }
                gg[c] += T(sum_dy_xh);
                gb[c] += T(sum_dy);
                for (int64_t n = 0; n < N; ++n) {
                    const T* xb = px + (n * C + c) * HW;
                    const T* gob = go + (n * C + c) * HW;
                    T* gxb = gx + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        if (training) {
                            double xh = (double(xb[i]) - m) * inv;
                            gxb[i] += T(g * inv *
                                        (double(gob[i]) - sum_dy / double(M) -
                                         xh * sum_dy_xh / double(M)));
                        } else {
                            gxb[i] += T(g * inv * double(gob[i]));
                        }
                    }
                }
            }
        });
    });
    return out;
}

// Layer norm over the channel axis of NCHW, one fiber per (n, h, w).
inline Tensor layernorm_channels(Tensor x, Tensor gamma, Tensor beta,
                                 double eps = 1e-6) {
    check_nchw("layernorm_channels", x);
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    check(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
          "layernorm_channels: parameter shapes do not match input " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pg = gamma.data<T>();
        const T* pb = beta.data<T>();
        T* po = out.data<T>();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t i = 0; i < HW; ++i) {
                double m = 0.0;
                for (int64_t c = 0; c < C; ++c) m += double(px[(n * C + c) * HW + i]);
                m /= double(C);
                double v = 0.0;
                for (int64_t c = 0; c < C; ++c) {
                    double d = double(px[(n * C + c) * HW + i]) - m;
                    v += d * d;
                }
                v /= double(C);
                double inv = 1.0 / std::sqrt(v + eps);
                for (int64_t c = 0; c < C; ++c) {
                    double xh = (double(px[(n * C + c) * HW + i]) - m) * inv;
                    po[(n * C + c) * HW + i] = T(xh * double(pg[c]) + double(pb[c]));
                }
            }
    });
    record_op("layernorm_channels", {x, gamma, beta}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pg = gamma.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gg = gamma.grad_data<T>();
            T* gb = beta.grad_data<T>();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t i = 0; i < HW; ++i) {
                    double m = 0.0;
                    for (int64_t c = 0; c < C; ++c) m += double(px[(n * C + c) * HW + i]);
                    m /= double(C);
                    double v = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        double d = double(px[(n * C + c) * HW + i]) - m;
                        v += d * d;
                    }
                    v /= double(C);
                    double inv = 1.0 / std::sqrt(v + eps);
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        int64_t idx = (n * C + c) * HW + i;
                        double xh = (double(px[idx]) - m) * inv;
                        double dxh = double(go[idx]) * double(pg[c]);
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        gg[c] += T(double(go[idx]) * xh);
                        gb[c] += T(double(go[idx]));
                    }
                    for (int64_t c = 0; c < C; ++c) {
                        int64_t idx = (n * C + c) * HW + i;
                        double xh = (double(px[idx]) - m) * inv;
                        double dxh = double(go[idx]) * double(pg[c]);
                        gx[idx] += T(inv * (dxh - sum_dxh / double(C) -
                                            xh * sum_dxh_xh / double(C)));
                    }
                }
        });
    });
    return out;
}

// Layer norm over the last axis (token layout [..., D]).
inline Tensor layernorm_last(Tensor x, Tensor gamma, Tensor beta,
                             double eps = 1e-6) {
    check(x.rank() >= 1, "layernorm_last: input must have rank >= 1");
    int64_t D = x.shape()[x.rank() - 1];
    check(gamma.rank() == 1 && gamma.dim(0) == D && beta.rank() == 1 && beta.dim(0) == D,
          "layernorm_last: parameter shapes do not match input " + shape_str(x.shape()));
    int64_t rows = x.numel() / D;
    Tensor out = Tensor::zeros(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x.data<T>();
        const T* pg = gamma.data<T>();
        const T* pb = beta.data<T>();
        T* po = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * D;
            T* orow = po + r * D;
            double m = 0.0;
            for (int64_t d = 0; d < D; ++d) m += double(xr[d]);
            m /= double(D);
            double v = 0.0;
            for (int64_t d = 0; d < D; ++d) {
                double dv = double(xr[d]) - m;
                v += dv * dv;
            }
            v /= double(D);
            double inv = 1.0 / std::sqrt(v + eps);
            for (int64_t d = 0; d < D; ++d)
                orow[d] = T((double(xr[d]) - m) * inv * double(pg[d]) + double(pb[d]));
        }
    });
    record_op("layernorm_last", {x, gamma, beta}, out, [=]() mutable {
        dispatch_dtype(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* px = x.data<T>();
            const T* pg = gamma.data<T>();
            const T* go = out.grad_data<T>();
            T* gx = x.grad_data<T>();
            T* gg = gamma.grad_data<T>();
            T* gb = beta.grad_data<T>();
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = px + r * D;
                const T* gor = go + r * D;
                T* gxr = gx + r * D;
                double m = 0.0;
                for (int64_t d = 0; d < D; ++d) m += double(xr[d]);
                m /= double(D);
                double v = 0.0;
                for (int64_t d = 0; d < D; ++d) {
                    double dv = double(xr[d]) - m;
                    v += dv * dv;
                }
                v /= double(D);
                double inv = 1.0 / std::sqrt(v + eps);
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int64_t d = 0; d < D; ++d) {
                    double xh = (double(xr[d]) - m) * inv;
                    double dxh = double(gor[d]) * double(pg[d]);
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    gg[d] += T(double(gor[d]) * xh);
                    gb[d] += T(double(gor[d]));
                }
                for (int64_t d = 0; d < D; ++d) {
                    double xh = (double(xr[d]) - m) * inv;
                    double dxh = double(gor[d]) * double(pg[d]);
                    gxr[d] += T(inv * (dxh - sum_dxh / double(D) - xh * sum_dxh_xh / double(D)));
                }
            }
        });
    });
    return out;
}

}  // namespace maxglavit
