// SPDX-License-Identifier: Apache-2.0
//
// Dual-encoder retrieval model, training strategies and the flat JSON
// configuration surface.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "cmer/contrastive_losses.h"
#include "cmer/focus_adapter.h"
#include "cmer/text_encoder.h"
#include "cmer/tokens.h"
#include "cmer/vision_encoder.h"

namespace cmer {

/// side_branch:   frozen visual backbone + Focus-Adapter ladder, text LoRA.
/// lora_backbone: LoRA on the visual backbone's query/value projections, text LoRA.
/// full_finetune: every base weight of both encoders trainable, no adapters.
enum class Strategy { side_branch, lora_backbone, full_finetune };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct ModelConfig {
    vision::VisionConfig vision;
    text::TextConfig text;
    std::size_t focus_hidden_dim = 64;
    std::size_t focus_field = 2;
    std::size_t focus_heads = 2;
    std::size_t focus_depth = 0;
    std::size_t adapter_stride = 1;
    std::size_t lora_rank = 4;
    double lora_alpha = 8.0;
    bool scene_prompt = true;

    focus::FocusConfig focus() const;
    void validate() const;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 5e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 7;
    Strategy strategy = Strategy::side_branch;
    std::size_t warmup_steps = 0;
    /// Stop after this many optimizer steps; 0 means run every epoch.
    std::size_t max_steps = 0;
    std::size_t min_freq = 1;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    loss::LossConfig loss;
    TrainConfig train;

    void validate() const;
    /// Flat JSON object with prefixed keys (vision_width, focus_field, ...).
    std::string to_json(int indent = -1) const;
    static RunConfig from_json(const std::string& text);
    static RunConfig load(const std::string& path);
};

/// Default desk-scale configuration; text.vocab_size is still 0.
RunConfig default_run_config();

/// All trainable and frozen tensors of one model, plus the temperature.
class RetrievalModel {
public:
    RetrievalModel(const ModelConfig& cfg, Strategy strategy, std::uint64_t seed, const loss::LossConfig& loss_cfg,
                   const std::vector<bool>& frozen_token_rows = {});

    const ModelConfig& config() const { return cfg_; }
    Strategy strategy() const { return strategy_; }

    /// [B, C, H, W] -> [B, embed_dim] unit rows.
    Tensor encode_images(const Tensor& images) const;
    Tensor encode_texts(std::span<const TokenIds> tokens) const;

    /// vision.*, text.*, focus.* and log_tau.
    NamedTensors parameters() const;
    NamedTensors trainable() const;
    const Tensor& log_tau() const { return log_tau_; }

    const vision::VisionParams& vision() const { return vision_; }
    const text::TextParams& text() const { return text_; }
    const std::optional<focus::FocusParams>& focus_params() const { return focus_; }

private:
    ModelConfig cfg_;
    Strategy strategy_;
    vision::VisionParams vision_;
    text::TextParams text_;
    std::optional<focus::FocusParams> focus_;
    Tensor log_tau_;
};

std::size_t count_trainable(const NamedTensors& params);
/// Excludes frozen token-embedding rows.
std::size_t count_trainable(const RetrievalModel& model);

}  // namespace cmer
