// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "cmer/random.h"
#include "cmer/tensor.h"
#include "cmer/transformer.h"

namespace cmer::vision {

struct VisionConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 3;
    std::size_t width = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t embed_dim = 32;
    bool frozen = true;

    /// Patches per side (N).
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t seq_len() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }

    /// Throws ConfigError.
    void validate() const;
};

struct VisionParams {
    Tensor patch_embed;  // W_I [patch_dim, width]
    Tensor cls_token;    // [width]
    Tensor pos_embed;    // [N^2 + 1, width]
    std::vector<BlockParams> blocks;
    Tensor proj;  // [width, embed_dim]

    /// Everything except `proj` and any LoRA pairs.
    NamedTensors backbone() const;
    NamedTensors lora() const;
    NamedTensors all(const std::string& prefix = "vision") const;
};

VisionParams init_params(Rng& rng, const VisionConfig& cfg);
void set_backbone_trainable(VisionParams& params, bool trainable);
/// Injects trainable LoRA pairs into the query and value projections of every block.
void add_lora(VisionParams& params, Rng& rng, std::size_t rank, double alpha);

/// [C, H, W] -> [N^2, patch_dim]; patches in row-major grid order, each
/// flattened as (channel, row, column).
Tensor patchify(const Tensor& image, const VisionConfig& cfg);
/// [B, C, H, W] -> [B, N^2, patch_dim].
Tensor patchify_batch(const Tensor& images, const VisionConfig& cfg);
Tensor unpatchify(const Tensor& patches, const VisionConfig& cfg);

/// v^0 = [cls; patches W_I] + pos. Accepts [N^2, P] or [B, N^2, P]; returns [B, seq, width].
Tensor embed_sequence(const Tensor& patches, const VisionParams& params, const VisionConfig& cfg);

Tensor vit_block(const Tensor& v, const BlockParams& block, const VisionConfig& cfg);

struct VisionOutput {
    Tensor embedding;                  // v_e [B, embed_dim], unit rows
    Tensor cls;                        // CLS row of the last block [B, width]
    std::vector<Tensor> hidden_states;  // v^0 .. v^D, each [B, seq, width]
};

/// Backbone only: v^0 and every block output.
VisionOutput run_backbone(const Tensor& images, const VisionParams& params, const VisionConfig& cfg);
/// Full encoder on [B, C, H, W]: backbone, CLS projection, l2 normalization.
VisionOutput encode_images(const Tensor& images, const VisionParams& params, const VisionConfig& cfg);

/// Single image [C, H, W] -> (v_e [embed_dim], block outputs v^1..v^D as [seq, width]).
std::pair<Tensor, std::vector<Tensor>> encode_image(const Tensor& image, const VisionParams& params,
                                                    const VisionConfig& cfg);

}  // namespace cmer::vision
