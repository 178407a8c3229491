// SPDX-License-Identifier: Apache-2.0
#include "cmer/vision_encoder.h"

#include <string>

#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/tape.h"

namespace cmer::vision {

void VisionConfig::validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (channels == 0 || width == 0 || depth == 0 || embed_dim == 0 || mlp_ratio == 0) {
        throw ConfigError("vision dimensions must be positive");
    }
    if (heads == 0 || width % heads != 0) {
        throw ConfigError("vision width " + std::to_string(width) + " is not divisible by heads " +
                          std::to_string(heads));
    }
}

NamedTensors VisionParams::backbone() const {
    NamedTensors out;
    out.emplace_back("vision.patch_embed", patch_embed);
    out.emplace_back("vision.cls_token", cls_token);
    out.emplace_back("vision.pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        collect(blocks[i], "vision.blocks." + std::to_string(i), out, false);
    }
    return out;
}

NamedTensors VisionParams::lora() const {
    NamedTensors out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "vision.blocks." + std::to_string(i) + ".attn";
        if (blocks[i].attn.query_lora) collect(*blocks[i].attn.query_lora, prefix + ".query_lora", out);
        if (blocks[i].attn.value_lora) collect(*blocks[i].attn.value_lora, prefix + ".value_lora", out);
    }
    return out;
}

NamedTensors VisionParams::all(const std::string& prefix) const {
    NamedTensors out = backbone();
    for (auto& kv : lora()) out.push_back(std::move(kv));
    out.emplace_back(prefix + ".proj", proj);
    return out;
}

VisionParams init_params(Rng& rng, const VisionConfig& cfg) {
    cfg.validate();
    VisionParams p;
    p.patch_embed = rng.truncated_normal_tensor({cfg.patch_dim(), cfg.width}, kInitStd);
    p.cls_token = rng.truncated_normal_tensor({cfg.width}, kInitStd);
    p.pos_embed = rng.truncated_normal_tensor({cfg.seq_len(), cfg.width}, kInitStd);
    for (std::size_t i = 0; i < cfg.depth; ++i) p.blocks.push_back(init_block(rng, cfg.width, cfg.mlp_ratio));
    p.proj = rng.truncated_normal_tensor({cfg.width, cfg.embed_dim}, kInitStd);
    set_backbone_trainable(p, !cfg.frozen);
    return p;
}

void set_backbone_trainable(VisionParams& params, bool trainable) {
    for (auto& [name, t] : params.backbone()) t.set_requires_grad(trainable);
}

void add_lora(VisionParams& params, Rng& rng, std::size_t rank, double alpha) {
    const std::size_t width = params.cls_token.numel();
    for (BlockParams& b : params.blocks) {
        b.attn.query_lora = init_lora(rng, width, rank, alpha);
        b.attn.value_lora = init_lora(rng, width, rank, alpha);
        for (Tensor* t : {&b.attn.query_lora->down, &b.attn.query_lora->up, &b.attn.value_lora->down,
                          &b.attn.value_lora->up}) {
            t->set_requires_grad(true);
        }
    }
}

namespace {

void check_image(const Shape& s, std::size_t offset, const VisionConfig& cfg) {
    if (s[offset] != cfg.channels || s[offset + 1] != cfg.image_size || s[offset + 2] != cfg.image_size) {
        throw DimensionError("image of shape " + shape_str(s) + " does not match config (" +
                             std::to_string(cfg.channels) + " x " + std::to_string(cfg.image_size) + " x " +
                             std::to_string(cfg.image_size) + ")");
    }
}

void patchify_into(std::span<const double> img, const VisionConfig& cfg, double* out) {
    const std::size_t n = cfg.grid(), ps = cfg.patch_size, size = cfg.image_size;
    for (std::size_t gy = 0; gy < n; ++gy)
        for (std::size_t gx = 0; gx < n; ++gx)
            for (std::size_t c = 0; c < cfg.channels; ++c)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx)
                        *out++ = img[(c * size + gy * ps + dy) * size + gx * ps + dx];
}

}  // namespace

Tensor patchify(const Tensor& image, const VisionConfig& cfg) {
    if (image.rank() != 3) throw DimensionError("patchify expects [C, H, W], got " + shape_str(image.shape()));
    check_image(image.shape(), 0, cfg);
    std::vector<double> out(image.numel());
    patchify_into(image.data(), cfg, out.data());
    return Tensor({cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

Tensor patchify_batch(const Tensor& images, const VisionConfig& cfg) {
    if (images.rank() != 4) throw DimensionError("patchify_batch expects [B, C, H, W], got " + shape_str(images.shape()));
    check_image(images.shape(), 1, cfg);
    const std::size_t batch = images.dim(0);
    const std::size_t per = images.numel() / batch;
    std::vector<double> out(images.numel());
    for (std::size_t b = 0; b < batch; ++b) {
        patchify_into(images.data().subspan(b * per, per), cfg, out.data() + b * per);
    }
    return Tensor({batch, cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, const VisionConfig& cfg) {
    if (patches.shape() != Shape{cfg.num_patches(), cfg.patch_dim()}) {
        throw DimensionError("unpatchify: unexpected shape " + shape_str(patches.shape()));
    }
    const std::size_t n = cfg.grid(), ps = cfg.patch_size, size = cfg.image_size;
    std::vector<double> img(patches.numel());
    const auto src = patches.data();
    std::size_t k = 0;
    for (std::size_t gy = 0; gy < n; ++gy)
        for (std::size_t gx = 0; gx < n; ++gx)
            for (std::size_t c = 0; c < cfg.channels; ++c)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx)
                        img[(c * size + gy * ps + dy) * size + gx * ps + dx] = src[k++];
    return Tensor({cfg.channels, size, size}, std::move(img));
}

Tensor embed_sequence(const Tensor& patches, const VisionParams& params, const VisionConfig& cfg) {
    const Tensor batched = patches.rank() == 2 ? ops::reshape(patches, {1, patches.dim(0), patches.dim(1)}) : patches;
    if (batched.rank() != 3 || batched.dim(1) != cfg.num_patches() || batched.dim(2) != cfg.patch_dim()) {
        throw DimensionError("embed_sequence: expected " + std::to_string(cfg.num_patches()) + " patches of " +
                             std::to_string(cfg.patch_dim()) + " values, got " + shape_str(patches.shape()));
    }
    ModuleScope scope("embed");
    const std::size_t batch = batched.dim(0);
    const Tensor tokens = ops::matmul(batched, params.patch_embed);
    const Tensor cls = ops::reshape(params.cls_token, {1, 1, cfg.width});
    std::vector<Tensor> parts;
    parts.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) parts.push_back(cls);
    const Tensor cls_rows = batch == 1 ? cls : ops::concat(std::span<const Tensor>(parts), 0);
    return ops::add(ops::concat({cls_rows, tokens}, 1), params.pos_embed);
}

Tensor vit_block(const Tensor& v, const BlockParams& block, const VisionConfig& cfg) {
    return transformer_block(v, block, cfg.heads);
}

VisionOutput run_backbone(const Tensor& images, const VisionParams& params, const VisionConfig& cfg) {
    ModuleScope scope("vision");
    VisionOutput out;
    Tensor v = embed_sequence(patchify_batch(images, cfg), params, cfg);
    out.hidden_states.push_back(v);
    for (std::size_t d = 0; d < params.blocks.size(); ++d) {
        ModuleScope block_scope("blocks." + std::to_string(d));
        v = vit_block(v, params.blocks[d], cfg);
        out.hidden_states.push_back(v);
    }
    const std::size_t batch = v.dim(0);
    out.cls = ops::reshape(ops::slice(v, 1, 0, 1), {batch, cfg.width});
    return out;
}

VisionOutput encode_images(const Tensor& images, const VisionParams& params, const VisionConfig& cfg) {
    VisionOutput out = run_backbone(images, params, cfg);
    ModuleScope scope("vision");
    ModuleScope head("head");
    out.embedding = ops::l2_normalize(ops::matmul(out.cls, params.proj), 1);
    return out;
}

std::pair<Tensor, std::vector<Tensor>> encode_image(const Tensor& image, const VisionParams& params,
                                                    const VisionConfig& cfg) {
    if (image.rank() != 3) throw DimensionError("encode_image expects [C, H, W], got " + shape_str(image.shape()));
    const Tensor batch = ops::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    VisionOutput out = encode_images(batch, params, cfg);
    std::vector<Tensor> blocks;
    for (std::size_t d = 1; d < out.hidden_states.size(); ++d) {
        const Tensor& h = out.hidden_states[d];
        blocks.push_back(ops::reshape(h, {h.dim(1), h.dim(2)}));
    }
    return {ops::reshape(out.embedding, {cfg.embed_dim}), std::move(blocks)};
}

}  // namespace cmer::vision
