// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cmer/random.h"
#include "cmer/tensor.h"
#include "cmer/tokens.h"
#include "cmer/transformer.h"

namespace cmer::text {

struct TextConfig {
    std::size_t vocab_size = 0;  // filled from the vocabulary
    std::size_t max_len = 32;    // including BOS and EOS
    std::size_t width = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t embed_dim = 32;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;

    void validate() const;
};

struct TextParams {
    Tensor token_embed;  // M_E [vocab, width]
    Tensor pos_embed;    // [max_len, width]
    std::vector<BlockParams> blocks;
    Tensor proj;  // [width, embed_dim]
    /// Rows of token_embed that never receive gradient (scene prompts).
    std::vector<bool> frozen_rows;

    NamedTensors base() const;
    NamedTensors lora() const;
    NamedTensors all() const;
};

/// Base weights frozen; LoRA pairs (when requested) and `proj` trainable.
TextParams init_params(Rng& rng, const TextConfig& cfg, bool with_lora = true);
void set_base_trainable(TextParams& params, bool trainable);
void freeze_rows(TextParams& params, std::span<const std::size_t> ids);

/// Checks BOS/EOS framing, length and vocabulary range.
void validate_tokens(std::span<const std::size_t> tokens, const TextConfig& cfg);

/// s^0 row j = M_E[tokens[j]] + pos[j]. Returns [len, width].
Tensor embed_tokens(std::span<const std::size_t> tokens, const TextParams& params, const TextConfig& cfg);

/// Pads to the longest sequence; padded keys are masked out of attention so
/// each row equals its unpadded encoding. Returns s_e [B, embed_dim].
Tensor encode_texts(std::span<const TokenIds> batch, const TextParams& params, const TextConfig& cfg);
Tensor encode_text(std::span<const std::size_t> tokens, const TextParams& params, const TextConfig& cfg);

}  // namespace cmer::text
