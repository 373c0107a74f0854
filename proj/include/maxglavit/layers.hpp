#pragma once

// Parameterized layers: thin structs that register their tensors in a
// ParameterSet and forward through ops.hpp.
//
// Initialization policy: conv/linear weights are truncated normal
// (std 0.02, clipped at 2 std), biases zero, norm scales one, norm shifts
// zero. Convolutions carry a bias only when no BatchNorm follows them; the
// caller states that via `bias`.

#include "ops.hpp"
#include "params.hpp"

namespace maxglavit {

struct InitContext {
    uint64_t seed = 0;
    Dtype dtype = Dtype::real32;
    bool zeros = false;  // checkpoint loading overwrites everything anyway
    double weight_std = 0.02;
};

inline Tensor init_weight(Shape shape, const std::string& name, const InitContext& ctx) {
    Tensor t = Tensor::zeros(std::move(shape), ctx.dtype);
    if (!ctx.zeros) {
        RngState rng = param_stream(ctx.seed, name);
        for (int64_t i = 0; i < t.numel(); ++i)
            t.set_value_at(i, rng.truncated_normal(0.0, ctx.weight_std, 2.0));
    }
    t.set_requires_grad(true);
    return t;
}

inline Tensor init_const(Shape shape, double value, const InitContext& ctx) {
    Tensor t = Tensor::full(std::move(shape), ctx.zeros ? 0.0 : value, ctx.dtype);
    t.set_requires_grad(true);
    return t;
}

struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(ParameterSet& ps, const std::string& prefix, int64_t in, int64_t out, bool bias,
           const InitContext& ctx) {
        check(in >= 1 && out >= 1, "Linear: feature counts must be >= 1 at " + prefix);
        w = ps.add(prefix + ".weight", init_weight({out, in}, prefix + ".weight", ctx));
        if (bias) b = ps.add(prefix + ".bias", init_const({out}, 0.0, ctx));
    }

    Tensor forward(Tensor x) const { return linear(x, w, b); }
};

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1, pad_h = 0, pad_w = 0, groups = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParameterSet& ps, const std::string& prefix, int64_t in, int64_t out, int64_t kh,
                int64_t kw, int stride_, std::pair<int, int> padding, int groups_, bool bias,
                const InitContext& ctx)
        : stride(stride_), pad_h(padding.first), pad_w(padding.second), groups(groups_) {
        check(in % groups == 0 && out % groups == 0,
              "Conv2dLayer: channels not divisible by groups at " + prefix);
        w = ps.add(prefix + ".weight",
                   init_weight({out, in / groups, kh, kw}, prefix + ".weight", ctx));
        if (bias) b = ps.add(prefix + ".bias", init_const({out}, 0.0, ctx));
    }

    Tensor forward(Tensor x) const {
        return conv2d(x, w, b, stride, std::pair<int, int>{pad_h, pad_w}, groups);
    }
};

struct Conv1dLayer {
    Tensor w, b;
    int pad = 0, groups = 1;

    Conv1dLayer() = default;
    Conv1dLayer(ParameterSet& ps, const std::string& prefix, int64_t in, int64_t out, int64_t k,
                int groups_, bool bias, const InitContext& ctx)
        : pad(int(k / 2)), groups(groups_) {
        check(k % 2 == 1, "Conv1dLayer: kernel size must be odd at " + prefix);
        w = ps.add(prefix + ".weight", init_weight({out, in / groups, k}, prefix + ".weight", ctx));
        if (bias) b = ps.add(prefix + ".bias", init_const({out}, 0.0, ctx));
    }

    Tensor forward(Tensor x) const { return conv1d(x, w, b, 1, pad, groups); }
};

struct BatchNorm2d {
    Tensor gamma, beta, running_mean, running_var;
    double momentum = 0.1, eps = 1e-5;

    BatchNorm2d() = default;
    BatchNorm2d(ParameterSet& ps, ParameterSet& buffers, const std::string& prefix, int64_t c,
                const InitContext& ctx) {
        gamma = ps.add(prefix + ".weight", init_const({c}, 1.0, ctx));
        beta = ps.add(prefix + ".bias", init_const({c}, 0.0, ctx));
        running_mean = buffers.add(prefix + ".running_mean", Tensor::zeros({c}, ctx.dtype));
        running_var = buffers.add(prefix + ".running_var",
                                  Tensor::full({c}, ctx.zeros ? 0.0 : 1.0, ctx.dtype));
    }

    Tensor forward(Tensor x, bool training) const {
        return batchnorm2d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
    }
};

struct LayerNormChannels {
    Tensor gamma, beta;
    double eps = 1e-6;

    LayerNormChannels() = default;
    LayerNormChannels(ParameterSet& ps, const std::string& prefix, int64_t c,
                      const InitContext& ctx) {
        gamma = ps.add(prefix + ".weight", init_const({c}, 1.0, ctx));
        beta = ps.add(prefix + ".bias", init_const({c}, 0.0, ctx));
    }

    Tensor forward(Tensor x) const { return layernorm_channels(x, gamma, beta, eps); }
};

struct LayerNormTokens {
    Tensor gamma, beta;
    double eps = 1e-6;

    LayerNormTokens() = default;
    LayerNormTokens(ParameterSet& ps, const std::string& prefix, int64_t d,
                    const InitContext& ctx) {
        gamma = ps.add(prefix + ".weight", init_const({d}, 1.0, ctx));
        beta = ps.add(prefix + ".bias", init_const({d}, 0.0, ctx));
    }

    Tensor forward(Tensor x) const { return layernorm_last(x, gamma, beta, eps); }
};

}  // namespace maxglavit
