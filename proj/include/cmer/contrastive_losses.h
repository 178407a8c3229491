// SPDX-License-Identifier: Apache-2.0
//
// Training objective: in-batch symmetric InfoNCE plus a difficulty-weighted
// hinge loss against FIFO queues of recycled embeddings.
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <vector>

#include "cmer/tensor.h"

namespace cmer::loss {

struct LossConfig {
    double margin = 0.2;       // alpha
    double beta = 20.0;        // difficulty weight
    double temperature = 0.07; // initial tau
    bool learnable_temperature = true;
    std::size_t queue_multiplier = 4;
    /// Optimizer steps trained on L_batch alone before L_queue joins; the queues fill from step 1.
    std::size_t queue_start = 100;

    void validate() const;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const Tensor& a, const Tensor& b);

struct QueueEntry {
    std::vector<double> embedding;
    std::size_t scene_id = 0;
    std::uint64_t age = 0;  // push counter at insertion time
};

/// FIFO ring of detached embeddings; the oldest entries are evicted first.
class NegativeQueue {
public:
    NegativeQueue() = default;
    NegativeQueue(std::size_t capacity, std::size_t embed_dim) : capacity_(capacity), dim_(embed_dim) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t embed_dim() const { return dim_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::deque<QueueEntry>& entries() const { return entries_; }
    std::uint64_t pushes() const { return pushes_; }

    /// Appends the rows of a [B, embed_dim] tensor. Taped tensors are rejected.
    void push(const Tensor& embeddings, const std::vector<std::size_t>& scene_ids);
    void push_entry(QueueEntry entry);
    void clear() { entries_.clear(); }
    /// Reinstates saved entries (oldest first) and the push counter.
    void restore(std::deque<QueueEntry> entries, std::uint64_t pushes);

private:
    std::size_t capacity_ = 0;
    std::size_t dim_ = 0;
    std::uint64_t pushes_ = 0;
    std::deque<QueueEntry> entries_;
};

std::size_t default_queue_capacity(std::size_t batch_size, const LossConfig& cfg);

/// Entries whose scene differs from the positive's, in queue order.
std::vector<const QueueEntry*> queue_negatives_for(const NegativeQueue& queue, std::size_t positive_scene);

/// l e^{-beta l}.
double difficulty_weight(double l, double beta);

/// Per-pair hinge loss against scene-filtered negatives of both queues:
///   sum_{q_v} l_v e^{-beta l_v} + sum_{q_s} l_s e^{-beta l_s}
/// with l_v = [alpha - S(s,v) + S(s,q_v)]_+ and l_s = [alpha - S(v,s) + S(v,q_s)]_+.
/// s_e and v_e are unit [embed_dim] tensors.
Tensor queue_loss(const Tensor& s_e, const Tensor& v_e, const NegativeQueue& q_v, const NegativeQueue& q_s,
                  std::size_t scene_id, const LossConfig& cfg);

/// Batched form over rows of [B, embed_dim]; returns the [B] per-pair losses.
Tensor queue_loss_rows(const Tensor& s, const Tensor& v, const NegativeQueue& q_v, const NegativeQueue& q_s,
                       const std::vector<std::size_t>& scene_ids, const LossConfig& cfg);

/// Number of (pair, negative) terms that enter the queue loss for a batch.
std::size_t contributing_terms(const NegativeQueue& q_v, const NegativeQueue& q_s,
                               const std::vector<std::size_t>& scene_ids);

/// Symmetric InfoNCE; logits = (s v^T) * scale where scale is 1/tau.
Tensor infonce_batch_loss(const Tensor& v, const Tensor& s, double tau);
/// Same with a learnable log(tau) scalar tensor.
Tensor infonce_batch_loss(const Tensor& v, const Tensor& s, const Tensor& log_tau);

struct LossTerms {
    Tensor total;
    Tensor batch;
    Tensor queue;
};

/// total = L_batch + mean over the batch of per-pair queue losses.
LossTerms total_loss(const Tensor& v, const Tensor& s, const Tensor& log_tau, const NegativeQueue& q_v,
                     const NegativeQueue& q_s, const std::vector<std::size_t>& scene_ids, const LossConfig& cfg);

}  // namespace cmer::loss
