// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmer/checkpoint.h"
#include "cmer/contrastive_losses.h"
#include "cmer/data_pipeline.h"
#include "cmer/model.h"
#include "cmer/tape.h"

namespace cmer::train {

struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::uint64_t step = 0;
};

/// Decoupled weight decay followed by the bias-corrected Adam update, on every
/// parameter that requires grad and holds one. All gradients are checked for
/// NaN/Inf before anything is modified.
/// Rows flagged in `frozen_rows` (keyed by parameter name) are left untouched.
using RowMasks = std::map<std::string, std::vector<bool>>;
void adamw_step(const NamedTensors& params, AdamState& state, const TrainConfig& cfg, double lr,
                const RowMasks& frozen_rows = {});

double learning_rate_at(const TrainConfig& cfg, std::uint64_t step);

struct StepMetrics {
    std::uint64_t step = 0;
    double loss = 0.0;
    double l_batch = 0.0;
    double l_queue = 0.0;
    std::size_t saved_bytes = 0;
    double pairs_per_s = 0.0;
};

struct StepResult {
    StepMetrics metrics;
    MemoryReport memory;
};

/// Model, optimizer state and negative queues: everything one step mutates.
class Learner {
public:
    Learner(const RunConfig& cfg, const std::vector<bool>& frozen_token_rows = {});

    /// Forward both encoders, total loss, backward, AdamW, queue push.
    StepResult step(const data::Batch& batch);

    const RunConfig& config() const { return cfg_; }
    RetrievalModel& model() { return model_; }
    const RetrievalModel& model() const { return model_; }
    AdamState& adam() { return adam_; }
    const AdamState& adam() const { return adam_; }
    loss::NegativeQueue& queue_v() { return queue_v_; }
    loss::NegativeQueue& queue_s() { return queue_s_; }
    const loss::NegativeQueue& queue_v() const { return queue_v_; }
    const loss::NegativeQueue& queue_s() const { return queue_s_; }
    /// Largest |grad| ever seen on a frozen token-embedding row.
    double max_frozen_row_grad() const { return max_frozen_row_grad_; }

    /// Parameters, moments and queues as checkpoint records.
    std::map<std::string, Tensor> state_tensors() const;
    void load_state_tensors(const std::map<std::string, Tensor>& tensors, bool with_optimizer);

private:
    RunConfig cfg_;
    RetrievalModel model_;
    AdamState adam_;
    loss::NegativeQueue queue_v_;
    loss::NegativeQueue queue_s_;
    double max_frozen_row_grad_ = 0.0;
};

struct Dataset {
    data::Manifest manifest;
    data::Vocab vocab;
    std::vector<data::PairedSample> samples;
};

/// Loads manifest, builds the vocabulary and tokenizes under `cfg`.
Dataset load_dataset(const std::filesystem::path& manifest_path, const RunConfig& cfg,
                     const std::optional<data::Vocab>& vocab = std::nullopt);

struct TrainOptions {
    /// When set: metrics.jsonl, best.cmck, last.cmck and vocab.json go here.
    std::optional<std::filesystem::path> out_dir;
    std::optional<std::filesystem::path> resume_from;
    bool validate = true;
    /// Stop after this many steps of this call (0 = no limit); used to cut runs short.
    std::size_t stop_after = 0;
    std::function<void(const StepMetrics&)> on_step;
};

struct TrainResult {
    std::vector<StepMetrics> history;
    std::vector<double> val_mr;
    double best_val_mr = -1.0;
    std::uint64_t steps = 0;
    double max_frozen_row_grad = 0.0;
    Checkpoint last;
};

struct TrainProgress {
    std::size_t epoch = 0;
    std::size_t batch = 0;
    double best_val_mr = -1.0;
};

Checkpoint make_checkpoint(const Learner& learner, const Dataset& ds, const TrainProgress& progress);
/// Restores a learner (and progress) from a checkpoint written by make_checkpoint.
TrainProgress restore_checkpoint(Learner& learner, const Checkpoint& ck, const Dataset& ds);
/// Config and vocabulary stored in a checkpoint.
RunConfig checkpoint_config(const Checkpoint& ck);
data::Vocab checkpoint_vocab(const Checkpoint& ck);
std::vector<std::string> checkpoint_scenes(const Checkpoint& ck);
/// Model with the checkpoint's parameters loaded.
RetrievalModel model_from_checkpoint(const Checkpoint& ck);

TrainResult train(const RunConfig& cfg, const Dataset& ds, const TrainOptions& opts = {});

}  // namespace cmer::train
