// SPDX-License-Identifier: Apache-2.0
//
// Small configurations and scratch directories for tests that train.
#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

#include "cmer/data_pipeline.h"
#include "cmer/model.h"

namespace cmer::fixtures {

inline std::filesystem::path scratch(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("cmer_" + name + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

/// 16x16 images, 4x4 patch grid, width 16, two blocks per encoder.
inline RunConfig tiny_run_config() {
    RunConfig c;
    auto& v = c.model.vision;
    v.image_size = 16;
    v.patch_size = 4;
    v.width = 16;
    v.depth = 2;
    v.heads = 2;
    v.mlp_ratio = 2;
    v.embed_dim = 8;
    auto& t = c.model.text;
    t.max_len = 16;
    t.width = 16;
    t.depth = 2;
    t.heads = 2;
    t.mlp_ratio = 2;
    t.embed_dim = 8;
    c.model.focus_hidden_dim = 8;
    c.model.focus_heads = 2;
    c.model.lora_rank = 2;
    c.loss.queue_start = 0;
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.train.learning_rate = 1e-3;
    return c;
}

/// 3 scenes x 8 images at 16x16; 20 training samples under the 80/10/10 rule.
inline data::SyntheticConfig tiny_synthetic() { return {3, 8, 16, 3, 11}; }

}  // namespace cmer::fixtures
