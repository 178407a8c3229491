// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cmer/contrastive_losses.h"
#include "cmer/errors.h"
#include "cmer/ops.h"
#include "cmer/tape.h"
#include "gradcheck.h"
#include "oracles.h"

using namespace cmer;
using namespace cmer::loss;
using cmer::testing::grad_check;

namespace {

Tensor unit_rows(Rng& rng, std::size_t b, std::size_t e) {
    Tensor t = rng.normal_tensor({b, e}, 1.0);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < b; ++i) {
        double n = 0;
        for (std::size_t j = 0; j < e; ++j) n += d[i * e + j] * d[i * e + j];
        for (std::size_t j = 0; j < e; ++j) d[i * e + j] /= std::sqrt(n);
    }
    return t;
}

NegativeQueue filled_queue(Rng& rng, std::size_t n, std::size_t e, std::size_t scenes) {
    NegativeQueue q(n, e);
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = rng.below(scenes);
    q.push(unit_rows(rng, n, e), ids);
    return q;
}

std::vector<double> row(const Tensor& t, std::size_t i) {
    const std::size_t e = t.dim(1);
    return {t.data().begin() + static_cast<std::ptrdiff_t>(i * e),
            t.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * e)};
}

}  // namespace

TEST(Cosine, Examples) {
    const std::vector<double> a{3, 4}, b{4, 3}, x{1, 0}, y{0, 1};
    EXPECT_NEAR(cosine_similarity(a, b), 0.96, 1e-15);
    EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
    EXPECT_EQ(cosine_similarity(x, y), 0.0);
    const std::vector<double> zero{0, 0};
    EXPECT_THROW(cosine_similarity(zero, a), DegenerateInputError);
}

TEST(LossConfig, Validation) {
    LossConfig c;
    EXPECT_NO_THROW(c.validate());
    c.margin = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.beta = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.temperature = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Queue, FifoEvictionAndCapacity) {
    NegativeQueue q(8, 2);
    for (std::size_t round = 0; round < 3; ++round) {
        std::vector<double> d;
        for (std::size_t i = 0; i < 4; ++i) d.insert(d.end(), {static_cast<double>(round * 4 + i), 0.0});
        q.push(Tensor({4, 2}, d), {0, 1, 2, 3});
        EXPECT_LE(q.size(), q.capacity());
    }
    ASSERT_EQ(q.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(q.entries()[i].embedding[0], static_cast<double>(4 + i));
        EXPECT_EQ(q.entries()[i].age, 1 + i / 4);
    }
    EXPECT_EQ(q.pushes(), 3u);

    NegativeQueue none(0, 2);
    none.push(Tensor({2, 2}, {1, 0, 0, 1}), {0, 1});
    EXPECT_TRUE(none.empty());

    EXPECT_EQ(default_queue_capacity(32, LossConfig{}), 128u);
    EXPECT_THROW(q.push(Tensor({1, 3}, {1, 0, 0}), {0}), DimensionError);
}

TEST(Queue, RejectsTapedEmbeddings) {
    NegativeQueue q(4, 2);
    Tensor x({1, 2}, {0.6, 0.8}, true);
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = ops::scalar_mul(x, 1.0);
    EXPECT_THROW(q.push(y, {0}), ContractError);
    EXPECT_NO_THROW(q.push(y.detach(), {0}));
    EXPECT_FALSE(q.entries()[0].embedding.empty());
}

TEST(Queue, SceneFilterKeepsOrder) {
    NegativeQueue q(8, 1);
    const std::vector<std::size_t> scenes{2, 0, 2, 1, 2, 3, 4, 5};
    std::vector<double> d(8);
    for (std::size_t i = 0; i < 8; ++i) d[i] = static_cast<double>(i);
    q.push(Tensor({8, 1}, d), scenes);
    const auto kept = queue_negatives_for(q, 2);
    ASSERT_EQ(kept.size(), 5u);
    const std::vector<double> expect{1, 3, 5, 6, 7};
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(kept[i]->embedding[0], expect[i]);
    EXPECT_EQ(queue_negatives_for(q, 9).size(), 8u);
    NegativeQueue same(3, 1);
    same.push(Tensor({3, 1}, {1, 2, 3}), {4, 4, 4});
    EXPECT_TRUE(queue_negatives_for(same, 4).empty());
}

TEST(QueueLoss, WorkedExamples) {
    LossConfig cfg;
    cfg.margin = 0.2;
    cfg.beta = 1.0;
    const double r = std::sqrt(0.75);
    const Tensor s({3}, {1, 0, 0}), v({3}, {0.5, r, 0});
    NegativeQueue qv(4, 3), qs(4, 3);
    EXPECT_EQ(queue_loss(s, v, qv, qs, 0, cfg).item(), 0.0);

    qv.push(Tensor({1, 3}, {0.5, -r, 0}), {1});
    EXPECT_NEAR(queue_loss(s, v, qv, qs, 0, cfg).item(), 0.2 * std::exp(-0.2), 1e-12);
    EXPECT_NEAR(0.2 * std::exp(-0.2), 0.163746, 5e-7);

    // Satisfied margin: S(s,v) = 0.9, S(s,q) = 0.1.
    const double a = std::sqrt(1 - 0.81), b = std::sqrt(1 - 0.01);
    NegativeQueue q2(4, 3);
    q2.push(Tensor({1, 3}, {0.1, 0, b}), {1});
    EXPECT_EQ(queue_loss(s, Tensor({3}, {0.9, a, 0}), q2, qs, 0, cfg).item(), 0.0);
}

TEST(QueueLoss, MatchesScalarOracle) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        Rng rng(seed);
        LossConfig cfg;
        cfg.margin = 0.3 + 0.2 * static_cast<double>(seed % 3);
        cfg.beta = static_cast<double>(seed);
        const std::size_t b = 5, e = 6;
        const Tensor s = unit_rows(rng, b, e), v = unit_rows(rng, b, e);
        const NegativeQueue qv = filled_queue(rng, 12, e, 4), qs = filled_queue(rng, 9, e, 4);
        std::vector<std::size_t> scenes(b);
        for (auto& x : scenes) x = rng.below(4);
        const Tensor rows = queue_loss_rows(s, v, qv, qs, scenes, cfg);
        for (std::size_t i = 0; i < b; ++i) {
            const double expect = oracle::queue_loss(row(s, i), row(v, i), qv, qs, scenes[i], cfg.margin, cfg.beta);
            EXPECT_NEAR(rows.at({i}), expect, 1e-12);
            const Tensor one = queue_loss(Tensor({e}, row(s, i)), Tensor({e}, row(v, i)), qv, qs, scenes[i], cfg);
            EXPECT_NEAR(one.item(), expect, 1e-12);
        }
    }
}

TEST(QueueLoss, SameSceneNegativesNeverContribute) {
    Rng rng(3);
    LossConfig cfg;
    const std::size_t e = 4;
    const Tensor s = unit_rows(rng, 1, e), v = unit_rows(rng, 1, e);
    NegativeQueue qv(16, e), qs(16, e), qv_more(16, e), qs_more(16, e);
    const Tensor other = unit_rows(rng, 4, e);
    qv.push(other, {1, 2, 3, 1});
    qs.push(other, {2, 2, 3, 1});
    qv_more.push(other, {1, 2, 3, 1});
    qs_more.push(other, {2, 2, 3, 1});
    // Hardest possible same-scene negatives: copies of the anchors themselves.
    qv_more.push(s.detach(), {0});
    qs_more.push(v.detach(), {0});
    const double base = queue_loss_rows(s, v, qv, qs, {0}, cfg).item();
    EXPECT_EQ(queue_loss_rows(s, v, qv_more, qs_more, {0}, cfg).item(), base);
    EXPECT_EQ(contributing_terms(qv_more, qs_more, {0}), contributing_terms(qv, qs, {0}));
}

TEST(QueueLoss, PoolSizeIndependentOfBatch) {
    Rng rng(8);
    LossConfig cfg;
    const std::size_t e = 4;
    const NegativeQueue qv = filled_queue(rng, 20, e, 3), qs = filled_queue(rng, 20, e, 3);
    const Tensor s = unit_rows(rng, 8, e), v = unit_rows(rng, 8, e);
    const std::vector<std::size_t> scenes{0, 1, 2, 0, 1, 2, 0, 1};
    const Tensor all = queue_loss_rows(s, v, qv, qs, scenes, cfg);
    for (std::size_t b : {2u, 4u, 8u}) {
        const std::vector<std::size_t> sub(scenes.begin(), scenes.begin() + b);
        std::size_t expect = 0;
        for (std::size_t sc : sub) expect += queue_negatives_for(qv, sc).size() + queue_negatives_for(qs, sc).size();
        EXPECT_EQ(contributing_terms(qv, qs, sub), expect);
        const Tensor part = queue_loss_rows(ops::slice(s, 0, 0, b), ops::slice(v, 0, 0, b), qv, qs, sub, cfg);
        for (std::size_t i = 0; i < b; ++i) EXPECT_EQ(part.at({i}), all.at({i}));
    }
    // Per pair, the pool is the filtered queue, whatever the batch.
    EXPECT_EQ(contributing_terms(qv, qs, {0}), queue_negatives_for(qv, 0).size() + queue_negatives_for(qs, 0).size());
}

TEST(QueueLoss, EmptyAndZeroCapacityQueuesGiveZero) {
    Rng rng(2);
    const Tensor s = unit_rows(rng, 3, 4), v = unit_rows(rng, 3, 4);
    NegativeQueue qv(0, 4), qs(0, 4);
    qv.push(unit_rows(rng, 3, 4), {1, 2, 3});
    const Tensor r = queue_loss_rows(s, v, qv, qs, {0, 0, 0}, LossConfig{});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.at({i}), 0.0);
}

TEST(QueueLoss, DifficultyWeightPeaksAtInverseBeta) {
    for (double beta : {1.0, 5.0, 20.0}) {
        const double peak = difficulty_weight(1.0 / beta, beta);
        EXPECT_NEAR(peak, 1.0 / (beta * std::exp(1.0)), 1e-15);
        for (int k = 0; k <= 400; ++k) {
            const double l = 0.01 * k / beta;
            EXPECT_LE(difficulty_weight(l, beta), peak);
        }
    }
    EXPECT_EQ(difficulty_weight(0.3, 0.0), 0.3);
}

TEST(QueueLoss, FiniteAcrossMarginAndBetaSweep) {
    Rng rng(12);
    const Tensor s = unit_rows(rng, 4, 5), v = unit_rows(rng, 4, 5);
    const NegativeQueue qv = filled_queue(rng, 16, 5, 4), qs = filled_queue(rng, 16, 5, 4);
    for (double margin : {0.05, 0.2, 1.0, 2.0})
        for (double beta : {0.0, 1.0, 20.0, 200.0}) {
            LossConfig cfg;
            cfg.margin = margin;
            cfg.beta = beta;
            const Tensor r = queue_loss_rows(s, v, qv, qs, {0, 1, 2, 3}, cfg);
            for (double x : r.data()) EXPECT_TRUE(std::isfinite(x) && x >= 0.0);
        }
}

TEST(QueueLoss, Gradcheck) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        LossConfig cfg;
        cfg.margin = 0.8;
        cfg.beta = 2.0;
        const std::size_t e = 6;
        const NegativeQueue qv = filled_queue(rng, 10, e, 3), qs = filled_queue(rng, 10, e, 3);
        const Tensor s = rng.normal_tensor({e}, 1.0), v = rng.normal_tensor({e}, 1.0);
        auto f = [&] {
            return queue_loss(ops::l2_normalize(s, 0), ops::l2_normalize(v, 0), qv, qs, seed % 3, cfg);
        };
        ASSERT_GT(f().item(), 0.0);
        const auto res = grad_check(f, {s, v});
        EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
    }
}

TEST(InfoNce, TrivialCases) {
    const Tensor one({1, 2}, {0.6, 0.8});
    EXPECT_NEAR(infonce_batch_loss(one, one, 0.07).item(), 0.0, 1e-15);
    // All pairwise similarities equal.
    const Tensor v({2, 2}, {1, 0, 1, 0}), s({2, 2}, {0.6, 0.8, 0.6, 0.8});
    EXPECT_NEAR(infonce_batch_loss(v, s, 0.07).item(), std::log(2.0), 1e-12);
    EXPECT_THROW(infonce_batch_loss(v, Tensor({3, 2}, std::vector<double>(6, 0.5)), 0.07), DimensionError);
}

TEST(InfoNce, MatchesBruteForceOracle) {
    for (std::size_t b = 1; b <= 8; ++b) {
        Rng rng(100 + b);
        const Tensor v = unit_rows(rng, b, 5), s = unit_rows(rng, b, 5);
        for (double tau : {0.07, 0.5, 1.0}) {
            const double expect = oracle::infonce(oracle::rows(v), oracle::rows(s), tau);
            EXPECT_NEAR(infonce_batch_loss(v, s, tau).item(), expect, 1e-10);
            EXPECT_NEAR(infonce_batch_loss(v, s, Tensor::scalar(std::log(tau))).item(), expect, 1e-10);
            EXPECT_GE(infonce_batch_loss(v, s, tau).item(), 0.0);
        }
    }
}

TEST(InfoNce, SoftmaxRowsSumToOne) {
    Rng rng(5);
    const Tensor v = unit_rows(rng, 6, 4), s = unit_rows(rng, 6, 4);
    const Tensor logits = ops::scalar_mul(ops::matmul(s, ops::transpose(v)), 1 / 0.07);
    for (std::size_t axis : {0u, 1u}) {
        const Tensor p = ops::softmax(logits, axis);
        for (std::size_t i = 0; i < 6; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 6; ++j) sum += axis == 1 ? p.at({i, j}) : p.at({j, i});
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(InfoNce, DecreasesAsDiagonalGrows) {
    // Fixed off-diagonal similarity matrix; raise the diagonal.
    Rng rng(6);
    const std::size_t b = 5;
    std::vector<std::vector<double>> off(b, std::vector<double>(b));
    for (auto& r : off)
        for (double& x : r) x = rng.uniform(-0.5, 0.5);
    auto loss_at = [&](double diag) {
        // v = identity rows, s_i = similarity row i, so s v^T is exactly the matrix.
        std::vector<double> vs(b * b, 0.0), ss(b * b);
        for (std::size_t i = 0; i < b; ++i) {
            vs[i * b + i] = 1.0;
            for (std::size_t j = 0; j < b; ++j) ss[i * b + j] = i == j ? diag : off[i][j];
        }
        return infonce_batch_loss(Tensor({b, b}, vs), Tensor({b, b}, ss), 0.1).item();
    };
    EXPECT_GT(loss_at(0.2), loss_at(0.6));
    EXPECT_GT(loss_at(0.6), loss_at(0.9));
}

TEST(InfoNce, Gradcheck) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const Tensor v = rng.normal_tensor({4, 5}, 1.0), s = rng.normal_tensor({4, 5}, 1.0);
        const Tensor log_tau = Tensor::scalar(std::log(0.5));
        auto f = [&] { return infonce_batch_loss(ops::l2_normalize(v, 1), ops::l2_normalize(s, 1), log_tau); };
        const auto res = grad_check(f, {v, s, log_tau});
        EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
    }
}

TEST(InfoNce, LogitScaleIsCapped) {
    Rng rng(4);
    const Tensor v = unit_rows(rng, 3, 4), s = unit_rows(rng, 3, 4);
    const double capped = infonce_batch_loss(v, s, Tensor::scalar(std::log(0.001))).item();
    EXPECT_NEAR(capped, infonce_batch_loss(v, s, 0.01).item(), 1e-12);
}

TEST(TotalLoss, SumOfBatchAndMeanQueue) {
    Rng rng(9);
    LossConfig cfg;
    const Tensor v = unit_rows(rng, 4, 6), s = unit_rows(rng, 4, 6);
    const Tensor log_tau = Tensor::scalar(std::log(cfg.temperature));
    NegativeQueue empty_v(16, 6), empty_s(16, 6);
    const std::vector<std::size_t> scenes{0, 1, 2, 3};
    const LossTerms bare = total_loss(v, s, log_tau, empty_v, empty_s, scenes, cfg);
    EXPECT_EQ(bare.queue.item(), 0.0);
    EXPECT_EQ(bare.total.item(), bare.batch.item());
    EXPECT_NEAR(bare.total.item(), infonce_batch_loss(v, s, cfg.temperature).item(), 1e-12);

    cfg.margin = 1.0;
    const NegativeQueue qv = filled_queue(rng, 16, 6, 4), qs = filled_queue(rng, 16, 6, 4);
    const LossTerms t = total_loss(v, s, log_tau, qv, qs, scenes, cfg);
    double mean = 0;
    for (std::size_t i = 0; i < 4; ++i)
        mean += oracle::queue_loss(row(s, i), row(v, i), qv, qs, scenes[i], cfg.margin, cfg.beta) / 4.0;
    EXPECT_GT(mean, 0.0);
    EXPECT_NEAR(t.queue.item(), mean, 1e-12);
    EXPECT_NEAR(t.total.item(), t.batch.item() + mean, 1e-12);
}

TEST(TotalLoss, GradcheckAndDetachedQueue) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        LossConfig cfg;
        cfg.margin = 0.9;
        cfg.beta = 3.0;
        const Tensor v = rng.normal_tensor({4, 5}, 1.0), s = rng.normal_tensor({4, 5}, 1.0);
        const Tensor log_tau = Tensor::scalar(std::log(0.2));
        NegativeQueue qv = filled_queue(rng, 8, 5, 3), qs = filled_queue(rng, 8, 5, 3);
        const std::vector<std::size_t> scenes{0, 1, 2, 0};
        auto f = [&] {
            return total_loss(ops::l2_normalize(v, 1), ops::l2_normalize(s, 1), log_tau, qv, qs, scenes, cfg).total;
        };
        const auto res = grad_check(f, {v, s, log_tau});
        EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;

        // The backward pass only reaches v, s and log_tau; queue snapshots are plain data.
        Tape tape;
        Tensor y;
        {
            TapeScope scope(tape);
            y = f();
        }
        const std::vector<double> before = qv.entries()[0].embedding;
        tape.backward(y);
        EXPECT_EQ(qv.entries()[0].embedding, before);
    }
}
