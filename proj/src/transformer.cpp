// SPDX-License-Identifier: Apache-2.0
#include "cmer/transformer.h"

#include <cmath>

#include "cmer/errors.h"
#include "cmer/ops.h"

namespace cmer {

Linear init_linear(Rng& rng, std::size_t in, std::size_t out, bool bias) {
    Linear l;
    l.weight = rng.truncated_normal_tensor({in, out}, kInitStd);
    if (bias) l.bias = Tensor::zeros({out});
    return l;
}

LayerNormParams init_layer_norm(std::size_t width) { return {Tensor::ones({width}), Tensor::zeros({width})}; }

LoraPair init_lora(Rng& rng, std::size_t width, std::size_t rank, double alpha) {
    if (rank == 0 || rank > width) throw ConfigError("lora rank must be in [1, width]");
    LoraPair p;
    p.down = rng.normal_tensor({width, rank}, 1.0 / std::sqrt(static_cast<double>(width)));
    p.up = Tensor::zeros({rank, width});
    p.alpha = alpha;
    p.rank = rank;
    return p;
}

AttentionParams init_attention(Rng& rng, std::size_t width) {
    AttentionParams p;
    p.query = init_linear(rng, width, width);
    p.key = init_linear(rng, width, width);
    p.value = init_linear(rng, width, width);
    p.out = init_linear(rng, width, width);
    return p;
}

BlockParams init_block(Rng& rng, std::size_t width, std::size_t mlp_ratio) {
    BlockParams p;
    p.ln1 = init_layer_norm(width);
    p.attn = init_attention(rng, width);
    p.ln2 = init_layer_norm(width);
    p.fc1 = init_linear(rng, width, width * mlp_ratio);
    p.fc2 = init_linear(rng, width * mlp_ratio, width);
    return p;
}

void collect(const Linear& p, const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + ".weight", p.weight);
    if (p.bias.defined()) out.emplace_back(prefix + ".bias", p.bias);
}

void collect(const LayerNormParams& p, const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + ".gamma", p.gamma);
    out.emplace_back(prefix + ".beta", p.beta);
}

void collect(const LoraPair& p, const std::string& prefix, NamedTensors& out) {
    out.emplace_back(prefix + ".down", p.down);
    out.emplace_back(prefix + ".up", p.up);
}

void collect(const AttentionParams& p, const std::string& prefix, NamedTensors& out, bool include_lora) {
    collect(p.query, prefix + ".query", out);
    collect(p.key, prefix + ".key", out);
    collect(p.value, prefix + ".value", out);
    collect(p.out, prefix + ".out", out);
    if (include_lora && p.query_lora) collect(*p.query_lora, prefix + ".query_lora", out);
    if (include_lora && p.value_lora) collect(*p.value_lora, prefix + ".value_lora", out);
}

void collect(const BlockParams& p, const std::string& prefix, NamedTensors& out, bool include_lora) {
    collect(p.ln1, prefix + ".ln1", out);
    collect(p.attn, prefix + ".attn", out, include_lora);
    collect(p.ln2, prefix + ".ln2", out);
    collect(p.fc1, prefix + ".fc1", out);
    collect(p.fc2, prefix + ".fc2", out);
}

Tensor linear(const Tensor& x, const Linear& layer) {
    Tensor y = ops::matmul(x, layer.weight);
    if (layer.bias.defined()) y = ops::add(y, layer.bias);
    return y;
}

Tensor lora_linear(const Tensor& x, const Tensor& w_frozen, const Tensor& a, const Tensor& b, double alpha,
                   std::size_t rank) {
    const Tensor base = ops::matmul(x, w_frozen);
    const Tensor delta = ops::scalar_mul(ops::matmul(ops::matmul(x, a), b), alpha / static_cast<double>(rank));
    return ops::add(base, delta);
}

Tensor lora_linear(const Tensor& x, const Linear& base, const LoraPair& lora) {
    const Tensor delta = ops::scalar_mul(ops::matmul(ops::matmul(x, lora.down), lora.up), lora.scale());
    return ops::add(linear(x, base), delta);
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
    if (x.rank() != 3 || x.dim(2) % heads != 0) {
        throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) +
                             " heads");
    }
    const std::size_t b = x.dim(0), s = x.dim(1), hd = x.dim(2) / heads;
    const Tensor t = ops::transpose(ops::reshape(x, {b, s, heads, hd}), 1, 2);
    return ops::reshape(t, {b * heads, s, hd});
}

Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t heads) {
    const std::size_t s = x.dim(1), hd = x.dim(2);
    const Tensor t = ops::transpose(ops::reshape(x, {batch, heads, s, hd}), 1, 2);
    return ops::reshape(t, {batch, s, heads * hd});
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* mask) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
    Tensor scores = ops::scalar_mul(ops::matmul(q, ops::transpose(k)), scale);
    if (mask != nullptr) scores = ops::add(scores, *mask);
    const Tensor weights = ops::softmax(scores, scores.rank() - 1);
    return ops::matmul(weights, v);
}

Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, std::size_t heads, const Tensor* mask) {
    const std::size_t batch = x.dim(0);
    const Tensor q = p.query_lora ? lora_linear(x, p.query, *p.query_lora) : linear(x, p.query);
    const Tensor k = linear(x, p.key);
    const Tensor v = p.value_lora ? lora_linear(x, p.value, *p.value_lora) : linear(x, p.value);
    const Tensor ctx = scaled_dot_product_attention(split_heads(q, heads), split_heads(k, heads),
                                                    split_heads(v, heads), mask);
    return linear(merge_heads(ctx, batch, heads), p.out);
}

Tensor transformer_block(const Tensor& x, const BlockParams& p, std::size_t heads, const Tensor* mask) {
    const Tensor attended =
        ops::add(multi_head_attention(ops::layer_norm(x, p.ln1.gamma, p.ln1.beta), p.attn, heads, mask), x);
    const Tensor hidden = ops::gelu(linear(ops::layer_norm(attended, p.ln2.gamma, p.ln2.beta), p.fc1));
    return ops::add(linear(hidden, p.fc2), attended);
}

}  // namespace cmer
