// SPDX-License-Identifier: Apache-2.0
#include "cmer/focus_adapter.h"

#include <string>

#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/tape.h"

namespace cmer::focus {

void FocusConfig::validate(std::size_t backbone_depth) const {
    if (heads == 0 || head_dim == 0 || hidden_dim != heads * head_dim) {
        throw ConfigError("focus hidden_dim " + std::to_string(hidden_dim) + " must equal heads (" +
                          std::to_string(heads) + ") x head_dim (" + std::to_string(head_dim) + ")");
    }
    if (focus_field == 0 || grid == 0 || grid % focus_field != 0) {
        throw ConfigError("focus_field " + std::to_string(focus_field) + " does not divide the patch grid side " +
                          std::to_string(grid));
    }
    if (adapter_stride == 0) throw ConfigError("adapter_stride must be positive");
    const std::size_t n = adapters(backbone_depth);
    if (n == 0 || n * adapter_stride > backbone_depth) {
        throw ConfigError("focus adapters (" + std::to_string(n) + " at stride " + std::to_string(adapter_stride) +
                          ") exceed backbone depth " + std::to_string(backbone_depth));
    }
    if (backbone_width == 0 || embed_dim == 0) throw ConfigError("focus dimensions must be positive");
}

FocusConfig make_config(const vision::VisionConfig& vcfg, std::size_t hidden_dim, std::size_t focus_field,
                        std::size_t heads) {
    FocusConfig cfg;
    cfg.hidden_dim = hidden_dim;
    cfg.focus_field = focus_field;
    cfg.heads = heads;
    cfg.head_dim = heads == 0 ? 0 : hidden_dim / heads;
    cfg.backbone_width = vcfg.width;
    cfg.embed_dim = vcfg.embed_dim;
    cfg.grid = vcfg.grid();
    return cfg;
}

NamedTensors FocusParams::all() const {
    NamedTensors out;
    out.emplace_back("focus.w_down", w_down);
    out.emplace_back("focus.bias", bias);
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string prefix = "focus.adapters." + std::to_string(i);
        collect(adapters[i].attn, prefix + ".attn", out);
        out.emplace_back(prefix + ".w_d", adapters[i].w_d);
    }
    out.emplace_back("focus.up_proj", up_proj);
    return out;
}

FocusParams init_params(Rng& rng, const FocusConfig& cfg, std::size_t backbone_depth) {
    cfg.validate(backbone_depth);
    FocusParams p;
    p.w_down = rng.truncated_normal_tensor({cfg.backbone_width, cfg.hidden_dim}, kInitStd);
    p.bias = Tensor::zeros({cfg.hidden_dim});
    for (std::size_t i = 0; i < cfg.adapters(backbone_depth); ++i) {
        AdapterParams a;
        a.attn = init_attention(rng, cfg.hidden_dim);
        a.w_d = rng.truncated_normal_tensor({cfg.hidden_dim, cfg.hidden_dim}, kInitStd);
        p.adapters.push_back(std::move(a));
    }
    p.up_proj = rng.truncated_normal_tensor({cfg.hidden_dim, cfg.embed_dim}, kInitStd);
    for (auto& [name, t] : p.all()) t.set_requires_grad(true);
    return p;
}

Tensor to_regions(const Tensor& h, std::size_t grid, std::size_t focus_field) {
    if (focus_field == 0 || grid % focus_field != 0) throw ConfigError("focus_field does not divide the grid");
    if (h.rank() != 3 || h.dim(1) != grid * grid) {
        throw DimensionError("to_regions: expected [B, " + std::to_string(grid * grid) + ", C], got " +
                             shape_str(h.shape()));
    }
    const std::size_t b = h.dim(0), c = h.dim(2), per = grid / focus_field;
    const Tensor windows =
        ops::transpose(ops::reshape(h, {b, per, focus_field, per, focus_field, c}), 2, 3);
    return ops::reshape(windows, {b * per * per, focus_field * focus_field, c});
}

Tensor from_regions(const Tensor& regions, std::size_t batch, std::size_t grid, std::size_t focus_field) {
    const std::size_t c = regions.shape().back(), per = grid / focus_field;
    const Tensor grid_major =
        ops::transpose(ops::reshape(regions, {batch, per, per, focus_field, focus_field, c}), 2, 3);
    return ops::reshape(grid_major, {batch, grid * grid, c});
}

std::vector<Tensor> partition_regions(const Tensor& h, std::size_t grid, std::size_t focus_field) {
    if (h.rank() != 2) throw DimensionError("partition_regions expects [N^2, C], got " + shape_str(h.shape()));
    const Tensor all = to_regions(ops::reshape(h, {1, h.dim(0), h.dim(1)}), grid, focus_field);
    std::vector<Tensor> out;
    const std::size_t r = all.dim(0);
    for (std::size_t i = 0; i < r; ++i) {
        out.push_back(ops::reshape(ops::slice(all, 0, i, 1), {all.dim(1), all.dim(2)}));
    }
    return out;
}

namespace {

Tensor as_batch(const Tensor& t) { return t.rank() == 2 ? ops::reshape(t, {1, t.dim(0), t.dim(1)}) : t; }

Tensor like_input(const Tensor& out, const Tensor& in) {
    return in.rank() == 2 ? ops::reshape(out, in.shape()) : out;
}

}  // namespace

Tensor region_attention_core(const Tensor& h, const AttentionParams& attn, const FocusConfig& cfg) {
    const Tensor hb = as_batch(h);
    const Tensor regions = to_regions(hb, cfg.grid, cfg.focus_field);
    const Tensor attended = multi_head_attention(regions, attn, cfg.heads);
    return like_input(from_regions(attended, hb.dim(0), cfg.grid, cfg.focus_field), h);
}

Tensor region_attention(const Tensor& h, const AttentionParams& attn, const FocusConfig& cfg) {
    return ops::add(region_attention_core(h, attn, cfg), h);
}

Tensor focus_adapter_step(const Tensor& v_d, const Tensor& h_prev, const AdapterParams& adapter,
                          const FocusParams& params, const FocusConfig& cfg) {
    const Tensor v = as_batch(v_d);
    const Tensor h = as_batch(h_prev);
    const std::size_t patches = cfg.grid * cfg.grid;
    if (h.rank() != 3 || h.dim(1) != patches + 1 || h.dim(2) != cfg.hidden_dim || v.dim(1) != patches + 1) {
        throw DimensionError("focus_adapter_step: unexpected shapes " + shape_str(v_d.shape()) + " / " +
                             shape_str(h_prev.shape()));
    }
    const Tensor cls = ops::slice(h, 1, 0, 1);
    const Tensor spatial = region_attention(ops::slice(h, 1, 1, patches), adapter.attn, cfg);
    const Tensor f_tilde = ops::concat({cls, spatial}, 1);
    const Tensor f = ops::add(ops::matmul(f_tilde, adapter.w_d), f_tilde);
    const Tensor out = ops::add(ops::add(ops::matmul(v, params.w_down), f), params.bias);
    return like_input(out, h_prev);
}

SideBranchOutput encode_images_with_side_branch(const Tensor& images, const vision::VisionParams& vparams,
                                                const FocusParams& fparams, const vision::VisionConfig& vcfg,
                                                const FocusConfig& fcfg) {
    for (const auto& [name, t] : vparams.backbone()) {
        if (t.requires_grad()) throw ContractError("side branch requires a frozen backbone; " + name + " is trainable");
    }
    SideBranchOutput out;
    out.backbone = vision::run_backbone(images, vparams, vcfg);
    const auto& states = out.backbone.hidden_states;
    const std::size_t batch = images.dim(0);

    ModuleScope scope("focus");
    Tensor h;
    {
        ModuleScope init("init");
        h = ops::add(ops::matmul(states[0], fparams.w_down), fparams.bias);
    }
    for (std::size_t i = 0; i < fparams.adapters.size(); ++i) {
        ModuleScope rung("adapters." + std::to_string(i));
        const std::size_t block = (i + 1) * fcfg.adapter_stride;
        h = focus_adapter_step(states.at(block), h, fparams.adapters[i], fparams, fcfg);
    }
    ModuleScope head("head");
    out.side_cls = ops::reshape(ops::slice(h, 1, 0, 1), {batch, fcfg.hidden_dim});
    const Tensor fused =
        ops::add(ops::matmul(out.backbone.cls, vparams.proj), ops::matmul(out.side_cls, fparams.up_proj));
    out.embedding = ops::l2_normalize(fused, 1);
    return out;
}

Tensor encode_image_with_side_branch(const Tensor& image, const vision::VisionParams& vparams,
                                     const FocusParams& fparams, const vision::VisionConfig& vcfg,
                                     const FocusConfig& fcfg) {
    const Tensor batch = ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    return ops::reshape(encode_images_with_side_branch(batch, vparams, fparams, vcfg, fcfg).embedding,
                        {fcfg.embed_dim});
}

}  // namespace cmer::focus
