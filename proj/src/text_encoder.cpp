// SPDX-License-Identifier: Apache-2.0
#include "cmer/text_encoder.h"

#include <algorithm>
#include <string>

#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/tape.h"

namespace cmer::text {

void TextConfig::validate() const {
    if (max_len < 3) throw ConfigError("max_len must be at least 3 (BOS, one token, EOS)");
    if (lora_rank < 1 || lora_rank > width) throw ConfigError("lora_rank must be in [1, width]");
    if (heads == 0 || width % heads != 0) throw ConfigError("text width is not divisible by heads");
    if (vocab_size <= kNumReservedIds) throw ConfigError("vocabulary has no content tokens");
    if (depth == 0 || embed_dim == 0 || mlp_ratio == 0) throw ConfigError("text dimensions must be positive");
}

NamedTensors TextParams::base() const {
    NamedTensors out;
    out.emplace_back("text.token_embed", token_embed);
    out.emplace_back("text.pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) collect(blocks[i], "text.blocks." + std::to_string(i), out, false);
    return out;
}

NamedTensors TextParams::lora() const {
    NamedTensors out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string prefix = "text.blocks." + std::to_string(i) + ".attn";
        if (blocks[i].attn.query_lora) collect(*blocks[i].attn.query_lora, prefix + ".query_lora", out);
        if (blocks[i].attn.value_lora) collect(*blocks[i].attn.value_lora, prefix + ".value_lora", out);
    }
    return out;
}

NamedTensors TextParams::all() const {
    NamedTensors out = base();
    for (auto& kv : lora()) out.push_back(std::move(kv));
    out.emplace_back("text.proj", proj);
    return out;
}

TextParams init_params(Rng& rng, const TextConfig& cfg, bool with_lora) {
    cfg.validate();
    TextParams p;
    p.token_embed = rng.truncated_normal_tensor({cfg.vocab_size, cfg.width}, kInitStd);
    p.pos_embed = rng.truncated_normal_tensor({cfg.max_len, cfg.width}, kInitStd);
    for (std::size_t i = 0; i < cfg.depth; ++i) p.blocks.push_back(init_block(rng, cfg.width, cfg.mlp_ratio));
    p.proj = rng.truncated_normal_tensor({cfg.width, cfg.embed_dim}, kInitStd);
    if (with_lora) {
        for (BlockParams& b : p.blocks) {
            b.attn.query_lora = init_lora(rng, cfg.width, cfg.lora_rank, cfg.lora_alpha);
            b.attn.value_lora = init_lora(rng, cfg.width, cfg.lora_rank, cfg.lora_alpha);
        }
    }
    p.frozen_rows.assign(cfg.vocab_size, false);
    for (auto& [name, t] : p.lora()) t.set_requires_grad(true);
    p.proj.set_requires_grad(true);
    return p;
}

void set_base_trainable(TextParams& params, bool trainable) {
    for (auto& [name, t] : params.base()) t.set_requires_grad(trainable);
}

void freeze_rows(TextParams& params, std::span<const std::size_t> ids) {
    for (std::size_t id : ids) {
        if (id >= params.frozen_rows.size()) throw VocabularyError("cannot freeze unknown token id " + std::to_string(id));
        params.frozen_rows[id] = true;
    }
}

void validate_tokens(std::span<const std::size_t> tokens, const TextConfig& cfg) {
    if (tokens.size() < 2 || tokens.front() != kBosId || tokens.back() != kEosId) {
        throw ContractError("token sequence must start with BOS and end with EOS");
    }
    if (tokens.size() > cfg.max_len) {
        throw ContractError("token sequence of length " + std::to_string(tokens.size()) + " exceeds max_len " +
                            std::to_string(cfg.max_len));
    }
    for (std::size_t t : tokens) {
        if (t >= cfg.vocab_size) throw VocabularyError("unknown token id " + std::to_string(t));
    }
}

Tensor embed_tokens(std::span<const std::size_t> tokens, const TextParams& params, const TextConfig& cfg) {
    validate_tokens(tokens, cfg);
    ModuleScope scope("embed");
    const Tensor rows = ops::embedding_lookup(params.token_embed, tokens, params.frozen_rows);
    return ops::add(rows, ops::slice(params.pos_embed, 0, 0, tokens.size()));
}

Tensor encode_texts(std::span<const TokenIds> batch, const TextParams& params, const TextConfig& cfg) {
    if (batch.empty()) throw ContractError("encode_texts: empty batch");
    ModuleScope scope("text");
    const std::size_t b = batch.size();
    std::size_t longest = 0;
    for (const TokenIds& seq : batch) {
        validate_tokens(seq, cfg);
        longest = std::max(longest, seq.size());
    }

    std::vector<std::size_t> ids(b * longest, kPadId);
    bool padded = false;
    for (std::size_t i = 0; i < b; ++i) {
        std::copy(batch[i].begin(), batch[i].end(), ids.begin() + static_cast<std::ptrdiff_t>(i * longest));
        padded = padded || batch[i].size() != longest;
    }

    Tensor s;
    {
        ModuleScope embed("embed");
        const Tensor rows = ops::embedding_lookup(params.token_embed, ids, params.frozen_rows);
        s = ops::add(ops::reshape(rows, {b, longest, cfg.width}), ops::slice(params.pos_embed, 0, 0, longest));
    }

    Tensor mask;
    if (padded) {
        // Additive key mask, one [L, L] slab per (sequence, head).
        constexpr double kMasked = -1e9;
        std::vector<double> m(b * cfg.heads * longest * longest, 0.0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t h = 0; h < cfg.heads; ++h)
                for (std::size_t q = 0; q < longest; ++q)
                    for (std::size_t k = batch[i].size(); k < longest; ++k)
                        m[((i * cfg.heads + h) * longest + q) * longest + k] = kMasked;
        mask = Tensor({b * cfg.heads, longest, longest}, std::move(m));
    }

    for (std::size_t d = 0; d < params.blocks.size(); ++d) {
        ModuleScope block_scope("blocks." + std::to_string(d));
        s = transformer_block(s, params.blocks[d], cfg.heads, padded ? &mask : nullptr);
    }

    ModuleScope head("head");
    std::vector<std::size_t> eos_rows(b);
    for (std::size_t i = 0; i < b; ++i) eos_rows[i] = i * longest + batch[i].size() - 1;
    const Tensor eos = ops::embedding_lookup(ops::reshape(s, {b * longest, cfg.width}), eos_rows);
    return ops::l2_normalize(ops::matmul(eos, params.proj), 1);
}

Tensor encode_text(std::span<const std::size_t> tokens, const TextParams& params, const TextConfig& cfg) {
    const TokenIds seq(tokens.begin(), tokens.end());
    const Tensor out = encode_texts(std::span<const TokenIds>(&seq, 1), params, cfg);
    return ops::reshape(out, {cfg.embed_dim});
}

}  // namespace cmer::text
