#pragma once

// JSON (de)serialization for model configuration, shared by checkpoints and
// the CLI's --config files. Missing keys fall back to defaults; unknown keys
// are rejected so config typos surface instead of silently doing nothing.

#include <json.hpp>

#include "model.hpp"

namespace maxglavit {

using Json = nlohmann::json;

namespace ser_detail {

inline void reject_unknown_keys(const Json& j, const std::string& where,
                                std::initializer_list<const char*> allowed) {
    check(j.is_object(), where + ": expected a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed)
            if (it.key() == k) {
                known = true;
                break;
            }
        check(known, where + ": unknown key \"" + it.key() + "\"");
    }
}

}  // namespace ser_detail

inline Json attention_variant_to_json(const AttentionVariant& v) {
    return Json{{"kind", attention_kind_name(v.kind)},
                {"se_reduction", v.se_reduction},
                {"eca_gamma", v.eca_gamma},
                {"eca_b", v.eca_b},
                {"eca_fixed_k", v.eca_fixed_k},
                {"cbam_reduction", v.cbam_reduction},
                {"cbam_spatial_kernel", v.cbam_spatial_kernel}};
}

inline AttentionVariant attention_variant_from_json(const Json& j) {
    ser_detail::reject_unknown_keys(j, "stem_attention",
                                    {"kind", "se_reduction", "eca_gamma", "eca_b", "eca_fixed_k",
                                     "cbam_reduction", "cbam_spatial_kernel"});
    AttentionVariant v;
    if (j.contains("kind")) v.kind = attention_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("se_reduction")) v.se_reduction = j.at("se_reduction").get<int64_t>();
    if (j.contains("eca_gamma")) v.eca_gamma = j.at("eca_gamma").get<double>();
    if (j.contains("eca_b")) v.eca_b = j.at("eca_b").get<double>();
    if (j.contains("eca_fixed_k")) v.eca_fixed_k = j.at("eca_fixed_k").get<int64_t>();
    if (j.contains("cbam_reduction")) v.cbam_reduction = j.at("cbam_reduction").get<int64_t>();
    if (j.contains("cbam_spatial_kernel"))
        v.cbam_spatial_kernel = j.at("cbam_spatial_kernel").get<int64_t>();
    return v;
}

inline Json conv_block_variant_to_json(const ConvBlockVariant& v) {
    return Json{{"kind", conv_block_kind_name(v.kind)},
                {"expansion", v.expansion},
                {"dw_kernel", v.dw_kernel},
                {"band_kernel", v.band_kernel},
                {"layerscale_init", v.layerscale_init}};
}

inline ConvBlockVariant conv_block_variant_from_json(const Json& j) {
    ser_detail::reject_unknown_keys(
        j, "block_variant", {"kind", "expansion", "dw_kernel", "band_kernel", "layerscale_init"});
    ConvBlockVariant v;
    if (j.contains("kind")) v.kind = conv_block_kind_from_name(j.at("kind").get<std::string>());
    if (j.contains("expansion")) v.expansion = j.at("expansion").get<int>();
    if (j.contains("dw_kernel")) v.dw_kernel = j.at("dw_kernel").get<int>();
    if (j.contains("band_kernel")) v.band_kernel = j.at("band_kernel").get<int>();
    if (j.contains("layerscale_init")) v.layerscale_init = j.at("layerscale_init").get<double>();
    return v;
}

inline Json geometry_to_json(const AttentionGeometry& g) {
    return Json{{"window", g.window},
                {"grid", g.grid},
                {"head_dim", g.head_dim},
                {"ffn_expansion", g.ffn_expansion}};
}

inline AttentionGeometry geometry_from_json(const Json& j) {
    ser_detail::reject_unknown_keys(j, "geometry", {"window", "grid", "head_dim", "ffn_expansion"});
    AttentionGeometry g;
    if (j.contains("window")) g.window = j.at("window").get<int64_t>();
    if (j.contains("grid")) g.grid = j.at("grid").get<int64_t>();
    if (j.contains("head_dim")) g.head_dim = j.at("head_dim").get<int64_t>();
    if (j.contains("ffn_expansion")) g.ffn_expansion = j.at("ffn_expansion").get<int>();
    return g;
}

inline Json config_to_json(const ModelConfig& cfg) {
    Json stages = Json::array();
    for (const StageSpec& st : cfg.stages)
        stages.push_back(Json{{"blocks", st.blocks}, {"channels", st.channels}});
    return Json{{"input_size", cfg.input_size},
                {"input_channels", cfg.input_channels},
                {"stem_channels", cfg.stem_channels},
                {"stages", std::move(stages)},
                {"stem_attention", attention_variant_to_json(cfg.stem_attention)},
                {"block_variant", conv_block_variant_to_json(cfg.block_variant)},
                {"geometry", geometry_to_json(cfg.geometry)},
                {"num_classes", cfg.num_classes}};
}

// Accepts a partial config; absent fields keep ModelConfig defaults. A stage
// entry may be either {"blocks": B, "channels": C} or a two-element [B, C].
inline ModelConfig config_from_json(const Json& j) {
    ser_detail::reject_unknown_keys(
        j, "config", {"input_size", "input_channels", "stem_channels", "stages", "stem_attention",
                      "block_variant", "geometry", "num_classes", "preset"});
    ModelConfig cfg;
    if (j.contains("preset")) cfg = preset_config(j.at("preset").get<std::string>());
    if (j.contains("input_size")) cfg.input_size = j.at("input_size").get<int64_t>();
    if (j.contains("input_channels")) cfg.input_channels = j.at("input_channels").get<int64_t>();
    if (j.contains("stem_channels")) cfg.stem_channels = j.at("stem_channels").get<int64_t>();
    if (j.contains("stages")) {
        const Json& js = j.at("stages");
        check(js.is_array() && js.size() == 4, "config: stages must be an array of 4 entries");
        for (size_t i = 0; i < 4; ++i) {
            const Json& e = js[i];
            if (e.is_array()) {
                check(e.size() == 2, "config: stage entry must be [blocks, channels]");
                cfg.stages[i] = StageSpec{e[0].get<int>(), e[1].get<int64_t>()};
            } else {
                ser_detail::reject_unknown_keys(e, "stage", {"blocks", "channels"});
                cfg.stages[i] =
                    StageSpec{e.at("blocks").get<int>(), e.at("channels").get<int64_t>()};
            }
        }
    }
    if (j.contains("stem_attention"))
        cfg.stem_attention = attention_variant_from_json(j.at("stem_attention"));
    if (j.contains("block_variant"))
        cfg.block_variant = conv_block_variant_from_json(j.at("block_variant"));
    if (j.contains("geometry")) cfg.geometry = geometry_from_json(j.at("geometry"));
    if (j.contains("num_classes")) cfg.num_classes = j.at("num_classes").get<int64_t>();
    return cfg;
}

}  // namespace maxglavit
