#pragma once

// Channel attention modules: squeeze-excitation, efficient channel attention
// (1-D conv over the channel descriptor, kernel adapted to channel count),
// and CBAM (channel stage then 7x7 spatial stage). All preserve NCHW shape.

#include <optional>

#include "layers.hpp"

namespace maxglavit {

enum class AttentionKind { none, se, eca, cbam };

inline const char* attention_kind_name(AttentionKind k) {
    switch (k) {
        case AttentionKind::none: return "none";
        case AttentionKind::se: return "se";
        case AttentionKind::eca: return "eca";
        case AttentionKind::cbam: return "cbam";
    }
    return "?";
}

inline AttentionKind attention_kind_from_name(const std::string& s) {
    if (s == "none") return AttentionKind::none;
    if (s == "se") return AttentionKind::se;
    if (s == "eca") return AttentionKind::eca;
    if (s == "cbam") return AttentionKind::cbam;
    throw std::invalid_argument("unknown attention kind: " + s);
}

struct AttentionVariant {
    AttentionKind kind = AttentionKind::none;
    int se_reduction = 16;
    double eca_gamma = 2.0;
    double eca_b = 1.0;
    int eca_fixed_k = 0;  // 0 = adaptive
    int cbam_reduction = 16;
    int cbam_spatial_kernel = 7;
};

// k(C) = nearest odd >= floor(|log2(C)/gamma + b/gamma|).
inline int eca_kernel_size(int64_t channels, double gamma = 2.0, double b = 1.0) {
    check(channels >= 1, "eca_kernel_size: channels must be >= 1");
    int t = int(std::floor(std::abs(std::log2(double(channels)) / gamma + b / gamma)));
    int k = (t % 2 == 1) ? t : t + 1;
    return k < 1 ? 1 : k;
}

struct SqueezeExcite {
    Linear fc1, fc2;
    int64_t channels = 0;

    SqueezeExcite() = default;
    SqueezeExcite(ParameterSet& ps, const std::string& prefix, int64_t c, int reduction,
                  const InitContext& ctx)
        : channels(c) {
        check(reduction >= 1 && c % reduction == 0,
              "SqueezeExcite: reduction " + std::to_string(reduction) +
                  " must divide channels " + std::to_string(c) + " at " + prefix);
        fc1 = Linear(ps, prefix + ".fc1", c, c / reduction, true, ctx);
        fc2 = Linear(ps, prefix + ".fc2", c / reduction, c, true, ctx);
    }

    Tensor forward(Tensor x) const {
        int64_t n = x.dim(0);
        Tensor d = reshape(global_avg_pool(x), {n, channels});
        Tensor gate = sigmoid(fc2.forward(relu(fc1.forward(d))));
        return mul_channels(x, reshape(gate, {n, channels, 1, 1}));
    }
};

struct EfficientChannelAttention {
    Conv1dLayer conv;
    int64_t channels = 0;
    int kernel = 1;

    EfficientChannelAttention() = default;
    EfficientChannelAttention(ParameterSet& ps, const std::string& prefix, int64_t c,
                              const AttentionVariant& v, const InitContext& ctx)
        : channels(c) {
        kernel = v.eca_fixed_k > 0 ? v.eca_fixed_k : eca_kernel_size(c, v.eca_gamma, v.eca_b);
        check(kernel % 2 == 1, "EfficientChannelAttention: kernel must be odd at " + prefix);
        conv = Conv1dLayer(ps, prefix + ".conv", 1, 1, kernel, 1, /*bias=*/false, ctx);
    }

    Tensor forward(Tensor x) const {
        int64_t n = x.dim(0);
        Tensor d = reshape(global_avg_pool(x), {n, 1, channels});
        Tensor gate = sigmoid(conv.forward(d));
        return mul_channels(x, reshape(gate, {n, channels, 1, 1}));
    }
};

struct Cbam {
    Linear fc1, fc2;  // shared MLP for both channel descriptors
    Conv2dLayer spatial;
    int64_t channels = 0;

    Cbam() = default;
    Cbam(ParameterSet& ps, const std::string& prefix, int64_t c, const AttentionVariant& v,
         const InitContext& ctx)
        : channels(c) {
        check(v.cbam_reduction >= 1 && c % v.cbam_reduction == 0,
              "Cbam: reduction " + std::to_string(v.cbam_reduction) +
                  " must divide channels " + std::to_string(c) + " at " + prefix);
        check(v.cbam_spatial_kernel % 2 == 1,
              "Cbam: spatial kernel must be odd at " + prefix);
        fc1 = Linear(ps, prefix + ".fc1", c, c / v.cbam_reduction, true, ctx);
        fc2 = Linear(ps, prefix + ".fc2", c / v.cbam_reduction, c, true, ctx);
        int k = v.cbam_spatial_kernel;
        spatial = Conv2dLayer(ps, prefix + ".spatial", 2, 1, k, k, 1, {k / 2, k / 2}, 1,
                              /*bias=*/true, ctx);
    }

    Tensor forward(Tensor x, Tensor* mc_out = nullptr, Tensor* ms_out = nullptr) const {
        int64_t n = x.dim(0);
        auto mlp = [&](Tensor d) { return fc2.forward(relu(fc1.forward(d))); };
        Tensor avg = reshape(global_avg_pool(x), {n, channels});
        Tensor mx = reshape(spatial_max_pool(x), {n, channels});
        Tensor mc = reshape(sigmoid(add(mlp(avg), mlp(mx))), {n, channels, 1, 1});
        Tensor gated = mul_channels(x, mc);
        Tensor sdesc = concat_channels({channel_mean(gated), channel_max(gated)});
        Tensor ms = sigmoid(spatial.forward(sdesc));
        if (mc_out) *mc_out = mc;
        if (ms_out) *ms_out = ms;
        return mul_spatial(gated, ms);
    }
};

// Tagged holder so stems and blocks can carry any (or no) channel attention.
struct AttentionModule {
    AttentionKind kind = AttentionKind::none;
    std::optional<SqueezeExcite> se;
    std::optional<EfficientChannelAttention> eca;
    std::optional<Cbam> cbam;

    static AttentionModule build(ParameterSet& ps, const std::string& prefix, int64_t c,
                                 const AttentionVariant& v, const InitContext& ctx) {
        AttentionModule m;
        m.kind = v.kind;
        switch (v.kind) {
            case AttentionKind::none: break;
            case AttentionKind::se:
                m.se.emplace(ps, prefix, c, v.se_reduction, ctx);
                break;
            case AttentionKind::eca:
                m.eca.emplace(ps, prefix, c, v, ctx);
                break;
            case AttentionKind::cbam:
                m.cbam.emplace(ps, prefix, c, v, ctx);
                break;
        }
        return m;
    }

    Tensor forward(Tensor x) const {
        switch (kind) {
            case AttentionKind::none: return x;
            case AttentionKind::se: return se->forward(x);
            case AttentionKind::eca: return eca->forward(x);
            case AttentionKind::cbam: return cbam->forward(x);
        }
        return x;
    }
};

}  // namespace maxglavit
