// SPDX-License-Identifier: Apache-2.0
//
// Building blocks shared by the visual and text encoders: affine maps, LoRA,
// multi-head attention and the pre-norm residual transformer block.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cmer/random.h"
#include "cmer/tensor.h"

namespace cmer {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// y = x W + b with W stored [in, out]. `bias` may be undefined.
struct Linear {
    Tensor weight;
    Tensor bias;
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

/// Low-rank update: `down` is A [width, r], `up` is B [r, width].
struct LoraPair {
    Tensor down;
    Tensor up;
    double alpha = 8.0;
    std::size_t rank = 4;

    double scale() const { return alpha / static_cast<double>(rank); }
    std::size_t parameter_count() const { return down.numel() + up.numel(); }
};

struct AttentionParams {
    Linear query;
    Linear key;
    Linear value;
    Linear out;
    std::optional<LoraPair> query_lora;
    std::optional<LoraPair> value_lora;
};

struct BlockParams {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    Linear fc1;
    Linear fc2;
};

constexpr double kInitStd = 0.02;

Linear init_linear(Rng& rng, std::size_t in, std::size_t out, bool bias = true);
LayerNormParams init_layer_norm(std::size_t width);
/// A ~ N(0, 1/width), B = 0, so the update starts at exactly zero.
LoraPair init_lora(Rng& rng, std::size_t width, std::size_t rank, double alpha);
AttentionParams init_attention(Rng& rng, std::size_t width);
BlockParams init_block(Rng& rng, std::size_t width, std::size_t mlp_ratio);

void collect(const Linear& p, const std::string& prefix, NamedTensors& out);
void collect(const LayerNormParams& p, const std::string& prefix, NamedTensors& out);
void collect(const LoraPair& p, const std::string& prefix, NamedTensors& out);
void collect(const AttentionParams& p, const std::string& prefix, NamedTensors& out, bool include_lora = true);
void collect(const BlockParams& p, const std::string& prefix, NamedTensors& out, bool include_lora = true);

Tensor linear(const Tensor& x, const Linear& layer);

/// out = x W + (alpha / r) x A B.
Tensor lora_linear(const Tensor& x, const Tensor& w_frozen, const Tensor& a, const Tensor& b, double alpha,
                   std::size_t rank);
/// Same with the base layer's bias.
Tensor lora_linear(const Tensor& x, const Linear& base, const LoraPair& lora);

/// [B, S, H*hd] -> [B*H, S, hd].
Tensor split_heads(const Tensor& x, std::size_t heads);
/// [B*H, S, hd] -> [B, S, H*hd].
Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads);

/// softmax(q k^T / sqrt(hd) + mask) v over [G, S, hd] groups. `mask` is an
/// optional additive [G, S, S] constant.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* mask = nullptr);

/// Multi-head self-attention on [B, S, W] including the output projection.
Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, std::size_t heads,
                            const Tensor* mask = nullptr);

/// Pre-norm residual block:
///   x' = MSA(LN(x)) + x
///   y  = FFN(LN(x')) + x'
Tensor transformer_block(const Tensor& x, const BlockParams& p, std::size_t heads, const Tensor* mask = nullptr);

}  // namespace cmer
