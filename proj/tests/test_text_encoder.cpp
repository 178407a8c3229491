// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/tape.h"
#include "cmer/text_encoder.h"
#include "gradcheck.h"

using namespace cmer;

namespace {

text::TextConfig tiny() {
    text::TextConfig c;
    c.vocab_size = 12;
    c.max_len = 8;
    c.width = 8;
    c.depth = 2;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.embed_dim = 4;
    c.lora_rank = 2;
    return c;
}

}  // namespace

TEST(Text, ConfigValidation) {
    auto c = tiny();
    c.max_len = 2;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.vocab_size = kNumReservedIds;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.lora_rank = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Text, TokenValidation) {
    const auto cfg = tiny();
    const TokenIds ok{kBosId, 5, 6, kEosId};
    EXPECT_NO_THROW(text::validate_tokens(ok, cfg));
    EXPECT_THROW(text::validate_tokens(TokenIds{5, 6, kEosId}, cfg), ContractError);
    EXPECT_THROW(text::validate_tokens(TokenIds{kBosId, 5, 6}, cfg), ContractError);
    EXPECT_THROW(text::validate_tokens(TokenIds{kBosId, 5, 6, 7, 8, 9, 10, 11, kEosId}, cfg), ContractError);
    EXPECT_THROW(text::validate_tokens(TokenIds{kBosId, 12, kEosId}, cfg), VocabularyError);
}

TEST(Text, EmbedTokensIsLookupPlusPosition) {
    const auto cfg = tiny();
    Rng rng(1);
    const auto p = text::init_params(rng, cfg);
    const TokenIds t{kBosId, 7, kEosId};
    const Tensor e = text::embed_tokens(t, p, cfg);
    ASSERT_EQ(e.shape(), (Shape{3, 8}));
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t c = 0; c < 8; ++c)
            EXPECT_EQ(e.at({j, c}), p.token_embed.at({t[j], c}) + p.pos_embed.at({j, c}));
}

TEST(Text, PaddedBatchMatchesSingleEncoding) {
    const auto cfg = tiny();
    Rng rng(2);
    auto p = text::init_params(rng, cfg);
    for (auto& [name, t] : p.all())
        for (double& v : t.mutable_data()) v += rng.normal(0.0, 0.2);
    const std::vector<TokenIds> batch{{kBosId, 4, kEosId}, {kBosId, 5, 6, 7, 8, kEosId}, {kBosId, 9, 10, kEosId}};
    const Tensor all = text::encode_texts(batch, p, cfg);
    ASSERT_EQ(all.shape(), (Shape{3, 4}));
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Tensor one = text::encode_text(batch[i], p, cfg);
        double norm = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            EXPECT_NEAR(all.at({i, c}), one.at({c}), 1e-12);
            norm += one.at({c}) * one.at({c});
        }
        EXPECT_NEAR(norm, 1.0, 1e-12);
    }
}

TEST(Text, FrozenRowsReceiveNoGradient) {
    auto cfg = tiny();
    Rng rng(3);
    auto p = text::init_params(rng, cfg);
    text::set_base_trainable(p, true);
    const std::vector<std::size_t> frozen{4, 5};
    text::freeze_rows(p, frozen);
    EXPECT_THROW(text::freeze_rows(p, std::vector<std::size_t>{99}), VocabularyError);

    const std::vector<TokenIds> batch{{kBosId, 4, 6, kEosId}, {kBosId, 5, 7, 8, kEosId}};
    Tape tape;
    Tensor y;
    {
        TapeScope scope(tape);
        y = cmer::testing::project(text::encode_texts(batch, p, cfg), 1);
    }
    tape.backward(y);
    const auto& g = *p.token_embed.grad();
    auto row_max = [&](std::size_t r) {
        double m = 0;
        for (std::size_t c = 0; c < cfg.width; ++c) m = std::max(m, std::abs(g[r * cfg.width + c]));
        return m;
    };
    EXPECT_EQ(row_max(4), 0.0);
    EXPECT_EQ(row_max(5), 0.0);
    EXPECT_GT(row_max(6), 0.0);
    EXPECT_GT(row_max(7), 0.0);
}

TEST(Text, FrozenBaseRecordsOnlyAdapterPaths) {
    const auto cfg = tiny();
    Rng rng(4);
    auto p = text::init_params(rng, cfg, false);
    for (auto& [name, t] : p.base()) EXPECT_FALSE(t.requires_grad()) << name;
    EXPECT_TRUE(p.lora().empty());
    Tape tape;
    {
        TapeScope scope(tape);
        text::encode_texts(std::vector<TokenIds>{{kBosId, 4, kEosId}}, p, cfg);
    }
    EXPECT_EQ(count_entries_in_scope(tape, "text.blocks"), 0u);
    EXPECT_GT(count_entries_in_scope(tape, "text.head"), 0u);
}

TEST(Text, LoraStartsAsIdentityDelta) {
    const auto cfg = tiny();
    Rng a(5), b(5);
    const auto with = text::init_params(a, cfg, true);
    const auto without = text::init_params(b, cfg, false);
    EXPECT_EQ(with.lora().size(), 2 * 2 * cfg.depth);
    const std::vector<TokenIds> batch{{kBosId, 4, 9, kEosId}};
    const Tensor x = text::encode_texts(batch, with, cfg), y = text::encode_texts(batch, without, cfg);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(x.at({0, c}), y.at({0, c}));
}
