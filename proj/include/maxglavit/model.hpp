#pragma once

// Whole-model assembly: stem (two 3x3 convs, optional channel attention after
// each), four stages of [conv block -> block attention -> grid attention],
// global-average-pool head. Presets mirror the published size table, plus a
// desk-scale tiny-test config. ModelPlan walks the same arithmetic without
// materializing tensors so `describe` stays fast for the large presets.

#include <array>

#include "conv_blocks.hpp"
#include "multiaxis.hpp"

namespace maxglavit {

struct AttentionGeometry {
    int64_t window = 7;
    int64_t grid = 7;
    int64_t head_dim = 32;
    int ffn_expansion = 4;
};

struct StageSpec {
    int blocks = 1;
    int64_t channels = 1;
};

struct ModelConfig {
    int64_t input_size = 224;
    int64_t input_channels = 3;
    int64_t stem_channels = 64;
    std::array<StageSpec, 4> stages{};
    AttentionVariant stem_attention;
    ConvBlockVariant block_variant;
    AttentionGeometry geometry;
    int64_t num_classes = 3;
};

// Resolution after the stem and after each stage entry; throws on any
// violated invariant so bad configs fail before any allocation.
inline std::array<int64_t, 5> validate_config(const ModelConfig& cfg) {
    check(cfg.input_channels >= 1, "ModelConfig: input_channels must be >= 1");
    check(cfg.stem_channels >= 1, "ModelConfig: stem_channels must be >= 1");
    check(cfg.num_classes >= 1, "ModelConfig: num_classes must be >= 1");
    check(cfg.geometry.window >= 1 && cfg.geometry.grid >= 1 && cfg.geometry.head_dim >= 1,
          "ModelConfig: geometry values must be >= 1");
    check(cfg.input_size >= 2 && cfg.input_size % 2 == 0,
          "ModelConfig: input_size " + std::to_string(cfg.input_size) +
              " must be positive and even");
    std::array<int64_t, 5> res{};
    res[0] = cfg.input_size / 2;  // stem stride 2
    int64_t r = res[0];
    for (size_t s = 0; s < 4; ++s) {
        const StageSpec& st = cfg.stages[s];
        check(st.blocks >= 1, "ModelConfig: stage " + std::to_string(s + 1) +
                                  " must have at least one block");
        check(st.channels >= 1, "ModelConfig: stage " + std::to_string(s + 1) +
                                    " channels must be >= 1");
        check(r % 2 == 0, "ModelConfig: stage " + std::to_string(s + 1) +
                              " cannot halve odd resolution " + std::to_string(r));
        r /= 2;
        res[s + 1] = r;
        check(r % cfg.geometry.window == 0,
              "ModelConfig: stage " + std::to_string(s + 1) + " resolution " +
                  std::to_string(r) + " not divisible by window " +
                  std::to_string(cfg.geometry.window));
        check(r % cfg.geometry.grid == 0,
              "ModelConfig: stage " + std::to_string(s + 1) + " resolution " +
                  std::to_string(r) + " not divisible by grid " +
                  std::to_string(cfg.geometry.grid));
        check(st.channels % cfg.geometry.head_dim == 0,
              "ModelConfig: stage " + std::to_string(s + 1) + " channels " +
                  std::to_string(st.channels) + " not divisible by head_dim " +
                  std::to_string(cfg.geometry.head_dim));
        if (cfg.block_variant.kind == ConvBlockKind::inceptionnext)
            check(st.channels % 8 == 0,
                  "ModelConfig: stage " + std::to_string(s + 1) + " channels " +
                      std::to_string(st.channels) + " must be divisible by 8 for inceptionnext");
        if (cfg.block_variant.kind == ConvBlockKind::mbconv)
            check(st.channels * cfg.block_variant.expansion % 4 == 0,
                  "ModelConfig: mbconv expanded channels must be divisible by 4 (SE r=4)");
    }
    return res;
}

// ---------------------------------------------------------------------------
// Presets

inline ModelConfig reduced_config(ModelConfig cfg);

inline ModelConfig preset_config(const std::string& name) {
    ModelConfig cfg;
    auto stages = [](int b1, int64_t c1, int b2, int64_t c2, int b3, int64_t c3, int b4,
                     int64_t c4) {
        return std::array<StageSpec, 4>{StageSpec{b1, c1}, StageSpec{b2, c2}, StageSpec{b3, c3},
                                        StageSpec{b4, c4}};
    };
    if (name == "maxvit_scaled") {
        cfg.stem_channels = 64;
        cfg.stages = stages(2, 32, 2, 64, 2, 128, 2, 256);
    } else if (name == "maxvit_tiny") {
        cfg.stem_channels = 64;
        cfg.stages = stages(2, 64, 2, 128, 5, 256, 2, 512);
    } else if (name == "maxvit_small") {
        cfg.stem_channels = 64;
        cfg.stages = stages(2, 96, 2, 192, 5, 384, 2, 768);
    } else if (name == "maxvit_base") {
        cfg.stem_channels = 64;
        cfg.stages = stages(2, 96, 6, 192, 14, 384, 2, 768);
    } else if (name == "maxvit_large") {
        cfg.stem_channels = 128;
        cfg.stages = stages(2, 128, 6, 256, 14, 512, 2, 1024);
    } else if (name == "maxglavit") {
        cfg = preset_config("maxvit_scaled");
        cfg.stem_attention.kind = AttentionKind::eca;
        cfg.block_variant.kind = ConvBlockKind::convnextv2;
    } else if (name == "tiny-test") {
        cfg = reduced_config(preset_config("maxglavit"));
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    validate_config(cfg);
    return cfg;
}

// Desk-scale shrink of any config for gradient checking and the synthetic
// training rig: every architectural element stays on the path, sizes drop.
inline ModelConfig reduced_config(ModelConfig cfg) {
    cfg.input_size = 64;
    cfg.stem_channels = 8;
    cfg.stages = {StageSpec{1, 8}, StageSpec{1, 16}, StageSpec{1, 16}, StageSpec{1, 16}};
    cfg.geometry.window = 2;
    cfg.geometry.grid = 2;
    cfg.geometry.head_dim = 8;
    validate_config(cfg);
    return cfg;
}

inline std::vector<std::string> preset_names() {
    return {"maxvit_scaled", "maxvit_tiny", "maxvit_small",
            "maxvit_base",   "maxvit_large", "maxglavit",   "tiny-test"};
}

// ---------------------------------------------------------------------------
// Parameter arithmetic (used by ModelPlan; must mirror the registrations the
// layer constructors perform)

namespace plan_detail {

inline int64_t attention_params(const AttentionVariant& v, int64_t c) {
    switch (v.kind) {
        case AttentionKind::none: return 0;
        case AttentionKind::se: {
            int64_t h = c / v.se_reduction;
            return h * c + h + c * h + c;
        }
        case AttentionKind::eca:
            return v.eca_fixed_k > 0 ? v.eca_fixed_k
                                     : eca_kernel_size(c, v.eca_gamma, v.eca_b);
        case AttentionKind::cbam: {
            int64_t h = c / v.cbam_reduction;
            int64_t k = v.cbam_spatial_kernel;
            return (h * c + h + c * h + c) + (2 * k * k + 1);
        }
    }
    return 0;
}

inline int64_t conv_block_params(const ConvBlockVariant& v, int64_t c_in, int64_t c_out,
                                 int stride) {
    if (v.kind == ConvBlockKind::mbconv) {
        int64_t e = c_in * v.expansion;
        int64_t n = 2 * c_in;                       // pre_bn
        n += c_in * e;                              // expand 1x1, no bias
        n += 2 * e + 9 * e + 2 * e;                 // bn1, dw 3x3, bn2
        n += e * (e / 4) + e / 4 + (e / 4) * e + e; // SE r=4
        n += e * c_out + c_out;                     // project
        if (stride == 2 || c_in != c_out) n += c_in * c_out + c_out;
        return n;
    }
    int64_t n = stride == 2 ? 4 * c_in * c_out + c_out : 0;  // entry downsample
    int64_t c = c_out, e = c * v.expansion;
    if (v.kind == ConvBlockKind::inceptionnext) {
        int64_t g = c / 8, bk = v.band_kernel;
        n += 9 * g + g + 2 * (bk * g + g);  // dw3 + two band convs
    } else {
        n += c * v.dw_kernel * v.dw_kernel + c;  // 7x7 depthwise
    }
    n += 2 * c;                      // channel LayerNorm
    n += c * e + e + e * c + c;      // pointwise MLP
    if (v.kind == ConvBlockKind::convnext) n += c;       // LayerScale
    if (v.kind == ConvBlockKind::convnextv2) n += 2 * e; // GRN
    return n;
}

inline int64_t transformer_unit_params(int64_t c, int ffn_expansion) {
    int64_t e = c * ffn_expansion;
    return 2 * c + 4 * (c * c + c) + 2 * c + (c * e + e + e * c + c);
}

}  // namespace plan_detail

struct PlanRow {
    std::string name;
    std::string kind;
    Shape output_shape;  // per-sample
    int64_t params = 0;
};

struct ModelPlan {
    std::vector<PlanRow> rows;
    int64_t total = 0;

    static ModelPlan from_config(const ModelConfig& cfg) {
        auto res = validate_config(cfg);
        ModelPlan plan;
        auto push = [&](std::string name, std::string kind, Shape shape, int64_t params) {
            plan.rows.push_back({std::move(name), std::move(kind), std::move(shape), params});
            plan.total += params;
        };
        int64_t s = cfg.stem_channels, r0 = res[0];
        push("stem.conv1", "conv3x3 s2", {s, r0, r0}, 9 * cfg.input_channels * s);
        push("stem.bn", "batchnorm", {s, r0, r0}, 2 * s);
        if (cfg.stem_attention.kind != AttentionKind::none)
            push("stem.attn1", attention_kind_name(cfg.stem_attention.kind), {s, r0, r0},
                 plan_detail::attention_params(cfg.stem_attention, s));
        push("stem.conv2", "conv3x3", {s, r0, r0}, 9 * s * s + s);
        if (cfg.stem_attention.kind != AttentionKind::none)
            push("stem.attn2", attention_kind_name(cfg.stem_attention.kind), {s, r0, r0},
                 plan_detail::attention_params(cfg.stem_attention, s));
        int64_t c_prev = s;
        for (size_t st = 0; st < 4; ++st) {
            int64_t c = cfg.stages[st].channels, r = res[st + 1];
            for (int b = 0; b < cfg.stages[st].blocks; ++b) {
                std::string prefix =
                    "stages." + std::to_string(st) + ".blocks." + std::to_string(b);
                int stride = b == 0 ? 2 : 1;
                int64_t c_in = b == 0 ? c_prev : c;
                push(prefix + ".conv", conv_block_kind_name(cfg.block_variant.kind), {c, r, r},
                     plan_detail::conv_block_params(cfg.block_variant, c_in, c, stride));
                int64_t unit =
                    plan_detail::transformer_unit_params(c, cfg.geometry.ffn_expansion);
                push(prefix + ".block_attn", "block_attn", {c, r, r}, unit);
                push(prefix + ".grid_attn", "grid_attn", {c, r, r}, unit);
            }
            c_prev = c;
        }
        push("head.pool", "global_avg_pool", {c_prev, 1, 1}, 0);
        push("head.fc", "linear", {cfg.num_classes},
             c_prev * cfg.num_classes + cfg.num_classes);
        return plan;
    }
};

// ---------------------------------------------------------------------------
// Model

struct Stem {
    Conv2dLayer conv1;
    BatchNorm2d bn;
    AttentionModule attn1;
    Conv2dLayer conv2;
    AttentionModule attn2;

    Tensor forward(Tensor x, bool training) const {
        Tensor h = gelu(bn.forward(conv1.forward(x), training));
        h = attn1.forward(h);
        h = conv2.forward(h);
        return attn2.forward(h);
    }
};

struct MaxVitBlock {
    ConvBlock conv;
    BlockAttention block_attn;
    GridAttention grid_attn;

    Tensor forward(Tensor x, bool training) const {
        return grid_attn.forward(block_attn.forward(conv.forward(x, training)));
    }
};

struct Model {
    ModelConfig config;
    Dtype dtype = Dtype::real32;
    ParameterSet params;
    ParameterSet buffers;
    Stem stem;
    std::vector<std::vector<MaxVitBlock>> stages;
    Linear head;

    static Model build(const ModelConfig& cfg, const InitContext& ctx) {
        validate_config(cfg);
        Model m;
        m.config = cfg;
        m.dtype = ctx.dtype;
        int64_t s = cfg.stem_channels;
        m.stem.conv1 = Conv2dLayer(m.params, "stem.conv1", cfg.input_channels, s, 3, 3, 2,
                                   {1, 1}, 1, /*bias=*/false, ctx);
        m.stem.bn = BatchNorm2d(m.params, m.buffers, "stem.bn", s, ctx);
        m.stem.attn1 = AttentionModule::build(m.params, "stem.attn1", s, cfg.stem_attention, ctx);
        m.stem.conv2 =
            Conv2dLayer(m.params, "stem.conv2", s, s, 3, 3, 1, {1, 1}, 1, /*bias=*/true, ctx);
        m.stem.attn2 = AttentionModule::build(m.params, "stem.attn2", s, cfg.stem_attention, ctx);
        int64_t c_prev = s;
        for (size_t st = 0; st < 4; ++st) {
            m.stages.emplace_back();
            int64_t c = cfg.stages[st].channels;
            for (int b = 0; b < cfg.stages[st].blocks; ++b) {
                std::string prefix =
                    "stages." + std::to_string(st) + ".blocks." + std::to_string(b);
                MaxVitBlock blk;
                blk.conv = ConvBlock(m.params, m.buffers, prefix + ".conv",
                                     b == 0 ? c_prev : c, c, b == 0 ? 2 : 1,
                                     cfg.block_variant, ctx);
                blk.block_attn =
                    BlockAttention(m.params, prefix + ".block_attn", c, cfg.geometry.window,
                                   cfg.geometry.head_dim, cfg.geometry.ffn_expansion, ctx);
                blk.grid_attn =
                    GridAttention(m.params, prefix + ".grid_attn", c, cfg.geometry.grid,
                                  cfg.geometry.head_dim, cfg.geometry.ffn_expansion, ctx);
                m.stages.back().push_back(std::move(blk));
            }
            c_prev = c;
        }
        m.head = Linear(m.params, "head.fc", c_prev, cfg.num_classes, /*bias=*/true, ctx);
        return m;
    }

    Tensor forward(Tensor x, bool training = false) const {
        check(x.rank() == 4 && x.dim(1) == config.input_channels &&
                  x.dim(2) == config.input_size && x.dim(3) == config.input_size,
              "Model::forward: expected input [N, " + std::to_string(config.input_channels) +
                  ", " + std::to_string(config.input_size) + ", " +
                  std::to_string(config.input_size) + "], got " + shape_str(x.shape()));
        check(x.dtype() == dtype, "Model::forward: input dtype " +
                                      std::string(dtype_name(x.dtype())) +
                                      " does not match model dtype " +
                                      std::string(dtype_name(dtype)));
        Tensor h = stem.forward(x, training);
        for (const auto& stage : stages)
            for (const auto& blk : stage) h = blk.forward(h, training);
        Tensor pooled = global_avg_pool(h);
        return head.forward(reshape(pooled, {x.dim(0), pooled.dim(1)}));
    }

    int64_t param_count() const { return params.total_params(); }
};

}  // namespace maxglavit
