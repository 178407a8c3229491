// SPDX-License-Identifier: Apache-2.0
#include "cmer/profiler.h"

#include <algorithm>
#include <chrono>
#include <sstream>

#include <json.hpp>

#include "cmer/errors.h"
#include "cmer/random.h"
#include "cmer/trainer.h"

namespace cmer::profile {

namespace {

// Collapses "vision.blocks.3.attn" style scopes to their top two levels.
std::string module_of(const std::string& scope) {
    const auto first = scope.find('.');
    if (first == std::string::npos) return scope;
    const auto second = scope.find('.', first + 1);
    return second == std::string::npos ? scope : scope.substr(0, second);
}

std::size_t block_entries(const MemoryReport& report) {
    std::size_t n = 0;
    for (const auto& [scope, count] : report.entries_by_scope) {
        if (scope.rfind("vision.blocks.", 0) == 0) n += count;
    }
    return n;
}

}  // namespace

std::vector<EfficiencyReport> profile_strategies(const RunConfig& cfg, const data::Batch& batch,
                                                 const std::vector<bool>& frozen_token_rows,
                                                 const ProfileOptions& opts) {
    if (batch.size() < 2) throw ConfigError("profiling needs a batch of at least 2 pairs");
    std::vector<EfficiencyReport> out;
    for (Strategy strategy : opts.strategies) {
        RunConfig c = cfg;
        c.train.strategy = strategy;
        c.train.batch_size = batch.size();
        c.loss.queue_start = 0;
        train::Learner learner(c, frozen_token_rows);
        EfficiencyReport rep;
        rep.strategy = strategy;
        rep.trainable_params = count_trainable(learner.model());
        double timed_seconds = 0.0;
        std::size_t timed_pairs = 0;
        const std::size_t total = opts.warmup_steps + std::max<std::size_t>(opts.timed_steps, 1);
        for (std::size_t i = 0; i < total; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            const train::StepResult r = learner.step(batch);
            const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            if (r.memory.total_saved_bytes >= rep.saved_activation_bytes) {
                rep.saved_activation_bytes = r.memory.total_saved_bytes;
                rep.tape_entries = r.memory.entry_count;
                rep.backbone_block_entries = block_entries(r.memory);
                rep.bytes_by_op = r.memory.bytes_by_op;
                rep.bytes_by_module.clear();
                for (const auto& [scope, bytes] : r.memory.bytes_by_scope) rep.bytes_by_module[module_of(scope)] += bytes;
            }
            if (i >= opts.warmup_steps) {
                timed_seconds += dt;
                timed_pairs += batch.size();
            }
        }
        rep.throughput_pairs_per_s = timed_seconds > 0.0 ? static_cast<double>(timed_pairs) / timed_seconds : 0.0;
        out.push_back(std::move(rep));
    }
    return out;
}

void check_memory_ordering(const std::vector<EfficiencyReport>& reports) {
    auto find = [&reports](Strategy s) -> const EfficiencyReport* {
        for (const auto& r : reports) {
            if (r.strategy == s) return &r;
        }
        return nullptr;
    };
    const auto* side = find(Strategy::side_branch);
    const auto* lora = find(Strategy::lora_backbone);
    const auto* full = find(Strategy::full_finetune);
    if (!side || !lora || !full) throw ValidationError("memory ordering needs all three strategies");
    if (side->saved_activation_bytes < lora->saved_activation_bytes &&
        lora->saved_activation_bytes < full->saved_activation_bytes) {
        return;
    }
    std::ostringstream os;
    os << "saved-activation ordering violated:";
    for (const auto* r : {side, lora, full}) {
        os << "\n  " << strategy_name(r->strategy) << " total=" << r->saved_activation_bytes;
        for (const auto& [m, b] : r->bytes_by_module) os << "\n    " << m << " " << b;
    }
    throw ValidationError(os.str());
}

std::string reports_json(const std::vector<EfficiencyReport>& reports, const std::string& config_json, int indent) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json j;
        j["strategy"] = strategy_name(r.strategy);
        j["trainable_params"] = r.trainable_params;
        j["saved_activation_bytes"] = r.saved_activation_bytes;
        j["throughput_pairs_per_s"] = r.throughput_pairs_per_s;
        j["tape_entries"] = r.tape_entries;
        j["backbone_block_entries"] = r.backbone_block_entries;
        j["bytes_by_module"] = r.bytes_by_module;
        j["bytes_by_op"] = r.bytes_by_op;
        if (!config_json.empty()) j["config"] = nlohmann::ordered_json::parse(config_json);
        arr.push_back(std::move(j));
    }
    return arr.dump(indent);
}

data::Batch random_batch(const RunConfig& cfg, std::size_t batch_size, std::uint64_t seed) {
    const auto& v = cfg.model.vision;
    const auto& t = cfg.model.text;
    if (t.vocab_size <= kNumReservedIds) throw ConfigError("random_batch needs text_vocab_size > 4");
    Rng rng(seed);
    data::Batch b;
    b.images = rng.uniform_tensor({batch_size, v.channels, v.image_size, v.image_size}, 0.0, 1.0);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t len = 3 + rng.below(std::max<std::size_t>(t.max_len - 2, 1));
        TokenIds ids{kBosId};
        while (ids.size() + 1 < std::min(len, t.max_len)) ids.push_back(kNumReservedIds + rng.below(t.vocab_size - kNumReservedIds));
        ids.push_back(kEosId);
        b.tokens.push_back(std::move(ids));
        b.scene_ids.push_back(i % 4);
        b.sample_indices.push_back(i);
    }
    return b;
}

}  // namespace cmer::profile
