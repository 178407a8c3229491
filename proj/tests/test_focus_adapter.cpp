// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cmer/errors.h"
#include "cmer/focus_adapter.h"
#include "cmer/ops.h"
#include "cmer/tape.h"
#include "gradcheck.h"
#include "oracles.h"

using namespace cmer;
using cmer::testing::grad_check;
using cmer::testing::project;

namespace {

focus::FocusConfig small_cfg(std::size_t grid, std::size_t field) {
    focus::FocusConfig c;
    c.hidden_dim = 8;
    c.heads = 2;
    c.head_dim = 4;
    c.focus_field = field;
    c.grid = grid;
    c.backbone_width = 6;
    c.embed_dim = 4;
    return c;
}

AttentionParams random_attention(Rng& rng, std::size_t width) {
    AttentionParams a = init_attention(rng, width);
    for (Linear* l : {&a.query, &a.key, &a.value, &a.out}) {
        for (double& v : l->weight.mutable_data()) v = rng.normal(0.0, 0.5);
        for (double& v : l->bias.mutable_data()) v = rng.normal(0.0, 0.1);
    }
    return a;
}

}  // namespace

TEST(Focus, ConfigValidation) {
    auto c = small_cfg(4, 3);
    EXPECT_THROW(c.validate(4), ConfigError);
    c = small_cfg(4, 2);
    c.head_dim = 3;
    EXPECT_THROW(c.validate(4), ConfigError);
    c = small_cfg(4, 2);
    c.depth = 3;
    c.adapter_stride = 2;
    EXPECT_THROW(c.validate(4), ConfigError);
    c.depth = 2;
    EXPECT_NO_THROW(c.validate(4));
    EXPECT_EQ(small_cfg(4, 2).adapters(4), 4u);
}

TEST(Focus, PartitionRegions) {
    Rng rng(3);
    const Tensor h = rng.uniform_tensor({16, 3}, -1, 1);
    const auto regions = focus::partition_regions(h, 4, 2);
    ASSERT_EQ(regions.size(), 4u);
    for (std::size_t r = 0; r < 4; ++r) {
        ASSERT_EQ(regions[r].shape(), (Shape{4, 3}));
        const std::size_t ry = r / 2, rx = r % 2;
        for (std::size_t i = 0; i < 4; ++i) {
            const std::size_t token = (ry * 2 + i / 2) * 4 + rx * 2 + i % 2;
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(regions[r].at({i, c}), h.at({token, c}));
        }
    }
    const Tensor batched = ops::reshape(h, {1, 16, 3});
    const Tensor back = focus::from_regions(focus::to_regions(batched, 4, 2), 1, 4, 2);
    EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), h.data().begin()));
    EXPECT_THROW(focus::partition_regions(h, 4, 3), ConfigError);
}

TEST(Focus, FullFieldEqualsGlobalAttention) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const auto cfg = small_cfg(4, 4);
        const AttentionParams attn = random_attention(rng, cfg.hidden_dim);
        const Tensor h = rng.normal_tensor({16, cfg.hidden_dim}, 1.0);
        const Tensor got = focus::region_attention_core(h, attn, cfg);
        const Tensor global = ops::reshape(
            multi_head_attention(ops::reshape(h, {1, 16, cfg.hidden_dim}), attn, cfg.heads), {16, cfg.hidden_dim});
        oracle::Rows expect(16);
        std::vector<std::size_t> all(16);
        for (std::size_t i = 0; i < 16; ++i) all[i] = i;
        oracle::attention(oracle::rows(h), all, attn, cfg.heads, expect);
        for (std::size_t i = 0; i < 16; ++i)
            for (std::size_t c = 0; c < cfg.hidden_dim; ++c) {
                EXPECT_LE(std::abs(got.at({i, c}) - global.at({i, c})), 1e-12);
                EXPECT_LE(std::abs(got.at({i, c}) - expect[i][c]), 1e-12);
            }
    }
}

TEST(Focus, RegionAttentionMatchesBlockDiagonalOracle) {
    Rng rng(11);
    const auto cfg = small_cfg(4, 2);
    const AttentionParams attn = random_attention(rng, cfg.hidden_dim);
    const Tensor h = rng.normal_tensor({16, cfg.hidden_dim}, 1.0);
    const Tensor got = focus::region_attention_core(h, attn, cfg);
    oracle::Rows expect(16);
    for (std::size_t r = 0; r < cfg.num_regions(); ++r) {
        std::vector<std::size_t> members;
        for (std::size_t t = 0; t < 16; ++t)
            if (oracle::region_of(t, 4, 2) == r) members.push_back(t);
        oracle::attention(oracle::rows(h), members, attn, cfg.heads, expect);
    }
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t c = 0; c < cfg.hidden_dim; ++c) EXPECT_LE(std::abs(got.at({i, c}) - expect[i][c]), 1e-12);
}

TEST(Focus, CrossRegionJacobianIsZero) {
    for (std::size_t field : {1u, 2u}) {
        Rng rng(5 + field);
        const auto cfg = small_cfg(4, field);
        const AttentionParams attn = random_attention(rng, cfg.hidden_dim);
        Tensor h = rng.normal_tensor({16, cfg.hidden_dim}, 1.0);
        const Tensor base = focus::region_attention_core(h, attn, cfg);
        for (std::size_t token = 0; token < 16; ++token) {
            Tensor moved = h.clone();
            for (std::size_t c = 0; c < cfg.hidden_dim; ++c) moved.mutable_data()[token * cfg.hidden_dim + c] += 1e-3;
            const Tensor out = focus::region_attention_core(moved, attn, cfg);
            bool changed_inside = false;
            for (std::size_t i = 0; i < 16; ++i) {
                const bool same_region = oracle::region_of(i, 4, field) == oracle::region_of(token, 4, field);
                for (std::size_t c = 0; c < cfg.hidden_dim; ++c) {
                    if (same_region) {
                        changed_inside = changed_inside || out.at({i, c}) != base.at({i, c});
                    } else {
                        ASSERT_EQ(out.at({i, c}), base.at({i, c})) << "token " << token << " leaked into " << i;
                    }
                }
            }
            EXPECT_TRUE(changed_inside);
        }
        // Reverse mode agrees: the gradient of one output row is zero outside its region.
        Tensor leaf = h.clone();
        leaf.set_requires_grad(true);
        Tape tape;
        Tensor y;
        {
            TapeScope scope(tape);
            y = ops::sum(ops::slice(focus::region_attention_core(leaf, attn, cfg), 0, 5, 1));
        }
        tape.backward(y);
        for (std::size_t i = 0; i < 16; ++i) {
            if (oracle::region_of(i, 4, field) == oracle::region_of(5, 4, field)) continue;
            for (std::size_t c = 0; c < cfg.hidden_dim; ++c) EXPECT_EQ((*leaf.grad())[i * cfg.hidden_dim + c], 0.0);
        }
    }
}

TEST(Focus, AdapterStepGradcheck) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        auto cfg = small_cfg(4, 2);
        focus::FocusParams p = focus::init_params(rng, cfg, 1);
        auto& a = p.adapters[0];
        a.attn = random_attention(rng, cfg.hidden_dim);
        for (double& v : a.w_d.mutable_data()) v = rng.normal(0.0, 0.3);
        for (double& v : p.w_down.mutable_data()) v = rng.normal(0.0, 0.3);
        for (double& v : p.bias.mutable_data()) v = rng.normal(0.0, 0.3);
        const Tensor v_d = rng.normal_tensor({17, cfg.backbone_width}, 1.0);
        const Tensor h = rng.normal_tensor({17, cfg.hidden_dim}, 1.0);
        auto f = [&] { return project(focus::focus_adapter_step(v_d, h, a, p, cfg), seed); };
        const auto res = grad_check(f, {h, a.attn.query.weight, a.attn.key.weight, a.attn.value.weight,
                                        a.attn.out.weight, a.w_d, p.w_down, p.bias},
                                    1e-5, 40, seed);
        EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
    }
}

TEST(Focus, AdapterStepClsBypassesRegionAttention) {
    Rng rng(2);
    auto cfg = small_cfg(4, 2);
    focus::FocusParams p = focus::init_params(rng, cfg, 1);
    const auto& a = p.adapters[0];
    const Tensor v_d = rng.normal_tensor({17, cfg.backbone_width}, 1.0);
    const Tensor h = rng.normal_tensor({17, cfg.hidden_dim}, 1.0);
    const Tensor out = focus::focus_adapter_step(v_d, h, a, p, cfg);
    // CLS row: h W_d + h + v W_down + b.
    const Tensor cls_h = ops::slice(h, 0, 0, 1), cls_v = ops::slice(v_d, 0, 0, 1);
    const Tensor expect = ops::add(ops::add(ops::add(ops::matmul(cls_h, a.w_d), cls_h), ops::matmul(cls_v, p.w_down)),
                                   p.bias);
    for (std::size_t c = 0; c < cfg.hidden_dim; ++c) EXPECT_NEAR(out.at({0, c}), expect.at({0, c}), 1e-14);
}

TEST(Focus, SideBranchKeepsBackboneOffTape) {
    vision::VisionConfig vcfg;
    vcfg.image_size = 16;
    vcfg.patch_size = 4;
    vcfg.channels = 3;
    vcfg.width = 16;
    vcfg.depth = 2;
    vcfg.heads = 2;
    vcfg.embed_dim = 8;
    Rng rng(9);
    vision::VisionParams vp = vision::init_params(rng, vcfg);
    vp.proj.set_requires_grad(true);
    const auto fcfg = focus::make_config(vcfg, 8, 2, 2);
    focus::FocusParams fp = focus::init_params(rng, fcfg, vcfg.depth);
    const Tensor images = rng.uniform_tensor({2, 3, 16, 16}, 0, 1);

    Tape tape;
    Tensor y;
    {
        TapeScope scope(tape);
        y = ops::sum(focus::encode_images_with_side_branch(images, vp, fp, vcfg, fcfg).embedding);
    }
    EXPECT_EQ(count_entries_in_scope(tape, "vision.blocks"), 0u);
    EXPECT_EQ(count_entries_in_scope(tape, "vision.embed"), 0u);
    EXPECT_GT(count_entries_in_scope(tape, "focus.adapters"), 0u);
    tape.backward(y);
    for (const auto& [name, t] : vp.backbone()) EXPECT_FALSE(t.grad().has_value()) << name;
    EXPECT_TRUE(fp.w_down.grad().has_value());

    const Tensor e = focus::encode_image_with_side_branch(ops::reshape(ops::slice(images, 0, 1, 1), {3, 16, 16}), vp,
                                                          fp, vcfg, fcfg);
    const Tensor b = focus::encode_images_with_side_branch(images, vp, fp, vcfg, fcfg).embedding;
    double norm = 0;
    for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_NEAR(e.at({c}), b.at({1, c}), 1e-12);
        norm += e.at({c}) * e.at({c});
    }
    EXPECT_NEAR(norm, 1.0, 1e-12);

    vision::set_backbone_trainable(vp, true);
    EXPECT_THROW(focus::encode_images_with_side_branch(images, vp, fp, vcfg, fcfg), ContractError);
}
