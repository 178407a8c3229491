// SPDX-License-Identifier: Apache-2.0
//
// Side-branch ladder of Focus-Adapters over a frozen visual backbone.
//
// Each adapter d consumes the backbone block output v^d (which carries no
// gradient path) and the previous ladder state h^{d-1}:
//
//   f~  = RegionAttention(h^{d-1}) + h^{d-1}     (spatial rows)
//   f   = f~ W_d + f~
//   h^d = v^d W_down + f + b
//
// RegionAttention is multi-head scaled dot-product attention restricted to
// square focus_field x focus_field windows of the patch grid (block-diagonal
// attention). The CLS row is not spatial: it skips the focus layer and only
// follows the linear paths. W_down and b are shared by every adapter.
#pragma once

#include <cstddef>
#include <vector>

#include "cmer/random.h"
#include "cmer/tensor.h"
#include "cmer/transformer.h"
#include "cmer/vision_encoder.h"

namespace cmer::focus {

struct FocusConfig {
    std::size_t hidden_dim = 64;
    std::size_t focus_field = 2;
    std::size_t heads = 2;
    std::size_t head_dim = 32;
    /// Number of adapters (D_f); 0 means one per backbone block.
    std::size_t depth = 0;
    /// Adapter i attaches to backbone block (i + 1) * stride.
    std::size_t adapter_stride = 1;
    std::size_t backbone_width = 64;
    std::size_t embed_dim = 32;
    /// Patch grid side N.
    std::size_t grid = 4;

    std::size_t num_regions() const { return (grid / focus_field) * (grid / focus_field); }
    std::size_t region_size() const { return focus_field * focus_field; }
    std::size_t adapters(std::size_t backbone_depth) const {
        return depth == 0 ? backbone_depth / adapter_stride : depth;
    }

    void validate(std::size_t backbone_depth) const;
};

/// Derives grid, backbone width and embed dim from the visual config.
FocusConfig make_config(const vision::VisionConfig& vcfg, std::size_t hidden_dim, std::size_t focus_field,
                        std::size_t heads);

struct AdapterParams {
    AttentionParams attn;  // per-head projections W_i, b_i and output projection
    Tensor w_d;            // [hidden, hidden]
};

struct FocusParams {
    Tensor w_down;  // shared [backbone_width, hidden]
    Tensor bias;    // shared [hidden]
    std::vector<AdapterParams> adapters;
    Tensor up_proj;  // [hidden, embed_dim]

    NamedTensors all() const;
};

FocusParams init_params(Rng& rng, const FocusConfig& cfg, std::size_t backbone_depth);

/// [N^2, C] -> (N/f)^2 tensors of [f^2, C], region-major, each window row-major.
std::vector<Tensor> partition_regions(const Tensor& h, std::size_t grid, std::size_t focus_field);
/// Batched form: [B, N^2, C] -> [B * R, f^2, C].
Tensor to_regions(const Tensor& h, std::size_t grid, std::size_t focus_field);
/// Inverse of to_regions.
Tensor from_regions(const Tensor& regions, std::size_t batch, std::size_t grid, std::size_t focus_field);

/// Windowed attention output before the residual add. h is [N^2, C] or [B, N^2, C].
Tensor region_attention_core(const Tensor& h, const AttentionParams& attn, const FocusConfig& cfg);
/// region_attention_core(h) + h.
Tensor region_attention(const Tensor& h, const AttentionParams& attn, const FocusConfig& cfg);

/// One ladder rung; v_d and h_prev are [seq, .] or [B, seq, .].
Tensor focus_adapter_step(const Tensor& v_d, const Tensor& h_prev, const AdapterParams& adapter,
                          const FocusParams& params, const FocusConfig& cfg);

struct SideBranchOutput {
    Tensor embedding;  // [B, embed_dim], unit rows
    Tensor side_cls;   // h^{D_f} CLS row [B, hidden]
    vision::VisionOutput backbone;
};

/// Frozen backbone + ladder + fused head:
///   v_e = normalize(CLS_backbone P_backbone + h^{D_f}_CLS P_side).
SideBranchOutput encode_images_with_side_branch(const Tensor& images, const vision::VisionParams& vparams,
                                                const FocusParams& fparams, const vision::VisionConfig& vcfg,
                                                const FocusConfig& fcfg);
/// Single image [C, H, W] -> v_e [embed_dim].
Tensor encode_image_with_side_branch(const Tensor& image, const vision::VisionParams& vparams,
                                     const FocusParams& fparams, const vision::VisionConfig& vcfg,
                                     const FocusConfig& fcfg);

}  // namespace cmer::focus
