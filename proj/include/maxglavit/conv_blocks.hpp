#pragma once

// Convolutional block variants used ahead of the attention pair in each
// stage: MBConv (inverted bottleneck with SE), ConvNeXt, ConvNeXtV2 (GRN in
// place of LayerScale) and InceptionNeXt (split depthwise token mixer).
// MBConv downsamples internally via its stride-2 depthwise conv; the other
// variants keep stride 1 and get a 2x2 stride-2 entry conv when the stage
// changes resolution.

#include <variant>

#include "attention.hpp"

namespace maxglavit {

enum class ConvBlockKind { mbconv, convnext, convnextv2, inceptionnext };

inline const char* conv_block_kind_name(ConvBlockKind k) {
    switch (k) {
        case ConvBlockKind::mbconv: return "mbconv";
        case ConvBlockKind::convnext: return "convnext";
        case ConvBlockKind::convnextv2: return "convnextv2";
        case ConvBlockKind::inceptionnext: return "inceptionnext";
    }
    return "?";
}

inline ConvBlockKind conv_block_kind_from_name(const std::string& s) {
    if (s == "mbconv") return ConvBlockKind::mbconv;
    if (s == "convnext") return ConvBlockKind::convnext;
    if (s == "convnextv2") return ConvBlockKind::convnextv2;
    if (s == "inceptionnext") return ConvBlockKind::inceptionnext;
    throw std::invalid_argument("unknown conv block kind: " + s);
}

struct ConvBlockVariant {
    ConvBlockKind kind = ConvBlockKind::mbconv;
    int expansion = 4;
    int dw_kernel = 7;      // convnext family depthwise kernel
    int band_kernel = 11;   // inceptionnext 1xK / Kx1 band kernel
    double layerscale_init = 1e-6;
};

// Global response normalization over spatial L2 norms; identity when gamma
// and beta are zero, which is how they are initialized.
inline Tensor grn(Tensor x, Tensor gamma, Tensor beta, double eps = 1e-6) {
    Tensor g = sqrt(spatial_sum(mul(x, x)));
    Tensor n = div_broadcast_c(g, add_scalar(mean_channels_nc11(g), eps));
    return add(bias_channels(scale_channels(mul_channels(x, n), gamma), beta), x);
}

struct MBConv {
    BatchNorm2d pre_bn;
    Conv2dLayer expand;
    BatchNorm2d bn1;
    Conv2dLayer dw;
    BatchNorm2d bn2;
    SqueezeExcite se;
    Conv2dLayer project;
    std::optional<Conv2dLayer> shortcut;
    int stride = 1;

    MBConv() = default;
    MBConv(ParameterSet& ps, ParameterSet& bufs, const std::string& prefix, int64_t c_in,
           int64_t c_out, int stride_, int expansion, const InitContext& ctx)
        : stride(stride_) {
        check(stride == 1 || stride == 2, "MBConv: stride must be 1 or 2 at " + prefix);
        int64_t e = c_in * expansion;
        pre_bn = BatchNorm2d(ps, bufs, prefix + ".pre_bn", c_in, ctx);
        expand = Conv2dLayer(ps, prefix + ".expand", c_in, e, 1, 1, 1, {0, 0}, 1, false, ctx);
        bn1 = BatchNorm2d(ps, bufs, prefix + ".bn1", e, ctx);
        dw = Conv2dLayer(ps, prefix + ".dw", e, e, 3, 3, stride, {1, 1}, int(e), false, ctx);
        bn2 = BatchNorm2d(ps, bufs, prefix + ".bn2", e, ctx);
        se = SqueezeExcite(ps, prefix + ".se", e, 4, ctx);
        project = Conv2dLayer(ps, prefix + ".project", e, c_out, 1, 1, 1, {0, 0}, 1, true, ctx);
        if (stride == 2 || c_in != c_out)
            shortcut =
                Conv2dLayer(ps, prefix + ".shortcut", c_in, c_out, 1, 1, 1, {0, 0}, 1, true, ctx);
    }

    Tensor forward(Tensor x, bool training) const {
        Tensor h = pre_bn.forward(x, training);
        h = gelu(bn1.forward(expand.forward(h), training));
        h = gelu(bn2.forward(dw.forward(h), training));
        h = project.forward(se.forward(h));
        Tensor s = x;
        if (stride == 2) s = avg_pool2d_2x2(s);
        if (shortcut) s = shortcut->forward(s);
        return add(h, s);
    }
};

// Shared body of the ConvNeXt family: depthwise conv, channel LayerNorm,
// pointwise MLP with GELU. V1 scales the MLP output by LayerScale; V2 runs
// GRN on the expanded features instead.
struct ConvNeXtBlock {
    Conv2dLayer dw;
    LayerNormChannels ln;
    Conv2dLayer pw1, pw2;
    Tensor layerscale;          // v1 only
    Tensor grn_gamma, grn_beta; // v2 only
    bool v2 = false;

    ConvNeXtBlock() = default;
    ConvNeXtBlock(ParameterSet& ps, const std::string& prefix, int64_t c, bool v2_,
                  const ConvBlockVariant& v, const InitContext& ctx)
        : v2(v2_) {
        int k = v.dw_kernel;
        check(k % 2 == 1, "ConvNeXtBlock: depthwise kernel must be odd at " + prefix);
        int64_t e = c * v.expansion;
        dw = Conv2dLayer(ps, prefix + ".dw", c, c, k, k, 1, {k / 2, k / 2}, int(c), true, ctx);
        ln = LayerNormChannels(ps, prefix + ".ln", c, ctx);
        pw1 = Conv2dLayer(ps, prefix + ".pw1", c, e, 1, 1, 1, {0, 0}, 1, true, ctx);
        pw2 = Conv2dLayer(ps, prefix + ".pw2", e, c, 1, 1, 1, {0, 0}, 1, true, ctx);
        if (v2) {
            grn_gamma = ps.add(prefix + ".grn.weight", init_const({e}, 0.0, ctx));
            grn_beta = ps.add(prefix + ".grn.bias", init_const({e}, 0.0, ctx));
        } else {
            layerscale = ps.add(prefix + ".layerscale", init_const({c}, v.layerscale_init, ctx));
        }
    }

    Tensor forward(Tensor x) const {
        Tensor h = gelu(pw1.forward(ln.forward(dw.forward(x))));
        if (v2) {
            h = pw2.forward(grn(h, grn_gamma, grn_beta));
            return add(x, h);
        }
        return add(x, scale_channels(pw2.forward(h), layerscale));
    }
};

struct InceptionNeXtBlock {
    Conv2dLayer dw3, dw_w, dw_h;
    LayerNormChannels ln;
    Conv2dLayer pw1, pw2;
    int64_t branch = 0;  // channels per convolutional branch (C/8)

    InceptionNeXtBlock() = default;
    InceptionNeXtBlock(ParameterSet& ps, const std::string& prefix, int64_t c,
                       const ConvBlockVariant& v, const InitContext& ctx) {
        check(c % 8 == 0, "InceptionNeXtBlock: channels " + std::to_string(c) +
                              " must be divisible by 8 at " + prefix);
        branch = c / 8;
        int64_t g = branch;
        int bk = v.band_kernel;
        check(bk % 2 == 1, "InceptionNeXtBlock: band kernel must be odd at " + prefix);
        dw3 = Conv2dLayer(ps, prefix + ".dw3", g, g, 3, 3, 1, {1, 1}, int(g), true, ctx);
        dw_w = Conv2dLayer(ps, prefix + ".dw_w", g, g, 1, bk, 1, {0, bk / 2}, int(g), true, ctx);
        dw_h = Conv2dLayer(ps, prefix + ".dw_h", g, g, bk, 1, 1, {bk / 2, 0}, int(g), true, ctx);
        int64_t e = c * v.expansion;
        ln = LayerNormChannels(ps, prefix + ".ln", c, ctx);
        pw1 = Conv2dLayer(ps, prefix + ".pw1", c, e, 1, 1, 1, {0, 0}, 1, true, ctx);
        pw2 = Conv2dLayer(ps, prefix + ".pw2", e, c, 1, 1, 1, {0, 0}, 1, true, ctx);
    }

    Tensor mixer(Tensor x) const {
        Tensor a = narrow_channels(x, 0, branch);
        Tensor b = narrow_channels(x, branch, branch);
        Tensor c = narrow_channels(x, 2 * branch, branch);
        Tensor d = narrow_channels(x, 3 * branch, x.dim(1) - 3 * branch);
        return concat_channels({dw3.forward(a), dw_w.forward(b), dw_h.forward(c), d});
    }

    Tensor forward(Tensor x) const {
        return add(x, pw2.forward(gelu(pw1.forward(ln.forward(mixer(x))))));
    }
};

struct ConvBlock {
    ConvBlockKind kind = ConvBlockKind::mbconv;
    std::optional<Conv2dLayer> downsample;  // convnext-family stage entry
    std::variant<std::monostate, MBConv, ConvNeXtBlock, InceptionNeXtBlock> body;

    ConvBlock() = default;
    ConvBlock(ParameterSet& ps, ParameterSet& bufs, const std::string& prefix, int64_t c_in,
              int64_t c_out, int stride, const ConvBlockVariant& v, const InitContext& ctx)
        : kind(v.kind) {
        if (v.kind == ConvBlockKind::mbconv) {
            body = MBConv(ps, bufs, prefix, c_in, c_out, stride, v.expansion, ctx);
            return;
        }
        check(stride == 2 || c_in == c_out,
              "ConvBlock: stride-1 " + std::string(conv_block_kind_name(v.kind)) +
                  " cannot change channels at " + prefix);
        if (stride == 2)
            downsample = Conv2dLayer(ps, prefix + ".downsample", c_in, c_out, 2, 2, 2, {0, 0},
                                     1, true, ctx);
        switch (v.kind) {
            case ConvBlockKind::convnext:
                body = ConvNeXtBlock(ps, prefix, c_out, false, v, ctx);
                break;
            case ConvBlockKind::convnextv2:
                body = ConvNeXtBlock(ps, prefix, c_out, true, v, ctx);
                break;
            case ConvBlockKind::inceptionnext:
                body = InceptionNeXtBlock(ps, prefix, c_out, v, ctx);
                break;
            case ConvBlockKind::mbconv: break;
        }
    }

    Tensor forward(Tensor x, bool training) const {
        if (const auto* mb = std::get_if<MBConv>(&body)) return mb->forward(x, training);
        if (downsample) x = downsample->forward(x);
        if (const auto* cn = std::get_if<ConvNeXtBlock>(&body)) return cn->forward(x);
        return std::get<InceptionNeXtBlock>(body).forward(x);
    }
};

}  // namespace maxglavit
