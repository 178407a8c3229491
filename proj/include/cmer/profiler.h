// SPDX-License-Identifier: Apache-2.0
//
// Per-strategy efficiency measurement on one fixed batch: trainable
// parameter count, peak saved-activation bytes per step (from the tape) and
// wall-clock throughput.
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "cmer/data_pipeline.h"
#include "cmer/model.h"

namespace cmer::profile {

struct EfficiencyReport {
    Strategy strategy = Strategy::side_branch;
    std::size_t trainable_params = 0;
    std::size_t saved_activation_bytes = 0;
    double throughput_pairs_per_s = 0.0;
    std::size_t tape_entries = 0;
    std::size_t backbone_block_entries = 0;
    std::map<std::string, std::size_t> bytes_by_module;
    std::map<std::string, std::size_t> bytes_by_op;
};

struct ProfileOptions {
    std::size_t warmup_steps = 5;
    std::size_t timed_steps = 10;
    std::vector<Strategy> strategies = {Strategy::side_branch, Strategy::lora_backbone, Strategy::full_finetune};
};

/// Runs warmup + timed training steps per strategy on the same batch.
std::vector<EfficiencyReport> profile_strategies(const RunConfig& cfg, const data::Batch& batch,
                                                 const std::vector<bool>& frozen_token_rows = {},
                                                 const ProfileOptions& opts = {});

/// Throws ValidationError (with the full byte breakdown) unless
/// side_branch < lora_backbone < full_finetune in saved bytes.
void check_memory_ordering(const std::vector<EfficiencyReport>& reports);

std::string reports_json(const std::vector<EfficiencyReport>& reports, const std::string& config_json,
                         int indent = 2);

/// Deterministic sample batch for profiling: random images in [0, 1] and
/// random in-vocabulary captions of assorted lengths.
data::Batch random_batch(const RunConfig& cfg, std::size_t batch_size, std::uint64_t seed);

}  // namespace cmer::profile
