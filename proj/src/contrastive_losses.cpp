// SPDX-License-Identifier: Apache-2.0
#include "cmer/contrastive_losses.h"

#include <cmath>
#include <string>

#include "cmer/errors.h"
#include "cmer/ops.h"

namespace cmer::loss {

namespace {

// CLIP-style cap on the logit scale 1/tau.
constexpr double kMaxLogitScale = 100.0;

Tensor row_sums(const Tensor& m) {
    // [R, C] -> [R]
    const std::size_t r = m.dim(0), c = m.dim(1);
    return ops::reshape(ops::matmul(m, Tensor::ones({c, 1})), {r});
}

Tensor column_sums(const Tensor& m) {
    // [R, C] -> [C]
    const std::size_t r = m.dim(0), c = m.dim(1);
    return ops::reshape(ops::matmul(Tensor::ones({1, r}), m), {c});
}

Tensor identity(std::size_t n) {
    Tensor eye = Tensor::zeros({n, n});
    auto d = eye.mutable_data();
    for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
    return eye;
}

// Per-anchor hinge sums against one queue. anchors/partner: [B, E]; pos: [B].
Tensor queue_terms(const Tensor& anchors, const Tensor& pos, const NegativeQueue& queue,
                   const std::vector<std::size_t>& scene_ids, const LossConfig& cfg) {
    const std::size_t b = anchors.dim(0), e = anchors.dim(1), m = queue.size();
    std::vector<double> qdata;
    qdata.reserve(m * e);
    std::vector<double> mask(m * b, 0.0);
    std::size_t row = 0;
    for (const auto& entry : queue.entries()) {
        qdata.insert(qdata.end(), entry.embedding.begin(), entry.embedding.end());
        for (std::size_t j = 0; j < b; ++j) mask[row * b + j] = entry.scene_id != scene_ids[j] ? 1.0 : 0.0;
        ++row;
    }
    const Tensor q({m, e}, std::move(qdata));
    const Tensor sim = ops::matmul(q, ops::transpose(anchors));  // [M, B]
    const Tensor l = ops::mul(ops::clamp_min(ops::add(ops::sub(sim, pos), Tensor::full({m, b}, cfg.margin))),
                              Tensor({m, b}, std::move(mask)));
    const Tensor weighted = ops::mul(l, ops::exp(ops::scalar_mul(l, -cfg.beta)));
    return column_sums(weighted);
}

}  // namespace

void LossConfig::validate() const {
    if (!(margin > 0.0)) throw ConfigError("margin must be positive");
    if (!(beta >= 0.0)) throw ConfigError("beta must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw DegenerateInputError("cosine_similarity of a zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cosine_similarity(const Tensor& a, const Tensor& b) { return cosine_similarity(a.data(), b.data()); }

void NegativeQueue::push(const Tensor& embeddings, const std::vector<std::size_t>& scene_ids) {
    if (embeddings.node()) throw ContractError("queue_push requires detached embeddings");
    if (embeddings.rank() != 2 || embeddings.dim(1) != dim_ || embeddings.dim(0) != scene_ids.size()) {
        throw DimensionError("queue_push: expected [" + std::to_string(scene_ids.size()) + ", " +
                             std::to_string(dim_) + "], got " + shape_str(embeddings.shape()));
    }
    const auto d = embeddings.data();
    for (std::size_t i = 0; i < scene_ids.size(); ++i) {
        QueueEntry e;
        e.embedding.assign(d.begin() + static_cast<std::ptrdiff_t>(i * dim_),
                           d.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim_));
        e.scene_id = scene_ids[i];
        e.age = pushes_;
        push_entry(std::move(e));
    }
    ++pushes_;
}

void NegativeQueue::push_entry(QueueEntry entry) {
    if (entry.embedding.size() != dim_) throw DimensionError("queue entry has the wrong embedding size");
    if (capacity_ == 0) return;
    entries_.push_back(std::move(entry));
    while (entries_.size() > capacity_) entries_.pop_front();
}

void NegativeQueue::restore(std::deque<QueueEntry> entries, std::uint64_t pushes) {
    entries_.clear();
    for (auto& e : entries) push_entry(std::move(e));
    pushes_ = pushes;
}

std::size_t default_queue_capacity(std::size_t batch_size, const LossConfig& cfg) {
    return cfg.queue_multiplier * batch_size;
}

std::vector<const QueueEntry*> queue_negatives_for(const NegativeQueue& queue, std::size_t positive_scene) {
    std::vector<const QueueEntry*> out;
    for (const auto& e : queue.entries()) {
        if (e.scene_id != positive_scene) out.push_back(&e);
    }
    return out;
}

double difficulty_weight(double l, double beta) { return l * std::exp(-beta * l); }

Tensor queue_loss_rows(const Tensor& s, const Tensor& v, const NegativeQueue& q_v, const NegativeQueue& q_s,
                       const std::vector<std::size_t>& scene_ids, const LossConfig& cfg) {
    if (s.rank() != 2 || s.shape() != v.shape() || s.dim(0) != scene_ids.size()) {
        throw DimensionError("queue_loss: expected matching [B, E] embeddings, got " + shape_str(s.shape()) +
                             " and " + shape_str(v.shape()));
    }
    const std::size_t b = s.dim(0);
    if (q_v.empty() && q_s.empty()) return Tensor::zeros({b});
    const Tensor pos = row_sums(ops::mul(s, v));
    Tensor out;
    if (!q_v.empty()) out = queue_terms(s, pos, q_v, scene_ids, cfg);
    if (!q_s.empty()) {
        const Tensor t = queue_terms(v, pos, q_s, scene_ids, cfg);
        out = out.defined() ? ops::add(out, t) : t;
    }
    return out;
}

Tensor queue_loss(const Tensor& s_e, const Tensor& v_e, const NegativeQueue& q_v, const NegativeQueue& q_s,
                  std::size_t scene_id, const LossConfig& cfg) {
    const std::size_t e = s_e.numel();
    const Tensor rows = queue_loss_rows(ops::reshape(s_e, {1, e}), ops::reshape(v_e, {1, e}), q_v, q_s,
                                        {scene_id}, cfg);
    return ops::sum(rows);
}

std::size_t contributing_terms(const NegativeQueue& q_v, const NegativeQueue& q_s,
                               const std::vector<std::size_t>& scene_ids) {
    std::size_t n = 0;
    for (std::size_t scene : scene_ids) {
        n += queue_negatives_for(q_v, scene).size() + queue_negatives_for(q_s, scene).size();
    }
    return n;
}

namespace {

Tensor infonce_from_logits(const Tensor& logits) {
    const std::size_t b = logits.dim(0);
    const Tensor eye = identity(b);
    const Tensor p_t2i = ops::softmax(logits, 1);
    const Tensor p_i2t = ops::softmax(logits, 0);
    const Tensor log_t2i = ops::log(row_sums(ops::mul(p_t2i, eye)));
    const Tensor log_i2t = ops::log(column_sums(ops::mul(p_i2t, eye)));
    return ops::scalar_mul(ops::add(ops::sum(log_t2i), ops::sum(log_i2t)), -0.5 / static_cast<double>(b));
}

void check_pair(const Tensor& v, const Tensor& s) {
    if (v.rank() != 2 || v.shape() != s.shape()) {
        throw DimensionError("infonce_batch_loss: expected matching [B, E] batches, got " + shape_str(v.shape()) +
                             " and " + shape_str(s.shape()));
    }
}

}  // namespace

Tensor infonce_batch_loss(const Tensor& v, const Tensor& s, double tau) {
    check_pair(v, s);
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
    return infonce_from_logits(ops::scalar_mul(ops::matmul(s, ops::transpose(v)), 1.0 / tau));
}

Tensor infonce_batch_loss(const Tensor& v, const Tensor& s, const Tensor& log_tau) {
    check_pair(v, s);
    if (log_tau.numel() != 1) throw DimensionError("log_tau must be a scalar");
    Tensor scale = ops::exp(ops::scalar_mul(ops::reshape(log_tau, {}), -1.0));
    if (scale.item() > kMaxLogitScale) scale = Tensor::scalar(kMaxLogitScale);
    return infonce_from_logits(ops::mul(ops::matmul(s, ops::transpose(v)), scale));
}

LossTerms total_loss(const Tensor& v, const Tensor& s, const Tensor& log_tau, const NegativeQueue& q_v,
                     const NegativeQueue& q_s, const std::vector<std::size_t>& scene_ids, const LossConfig& cfg) {
    LossTerms t;
    t.batch = infonce_batch_loss(v, s, log_tau);
    t.queue = ops::scalar_mul(ops::sum(queue_loss_rows(s, v, q_v, q_s, scene_ids, cfg)),
                              1.0 / static_cast<double>(v.dim(0)));
    t.total = ops::add(t.batch, t.queue);
    return t;
}

}  // namespace cmer::loss
