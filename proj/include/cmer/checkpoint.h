// SPDX-License-Identifier: Apache-2.0
//
// CMCK checkpoint, little-endian:
//   "CMCK"  u32 version  u64 step
//   u64 len + metadata JSON (run config, vocabulary, scenes, progress)
//   u64 len + RNG state text
//   u32 record count, then per record in ascending name order:
//     u32 name_len, name bytes, u32 ndim, ndim x u64 dims, f64 payload
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "cmer/tensor.h"

namespace cmer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint64_t step = 0;
    std::string meta_json = "{}";
    std::string rng_state;
    std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& ck);

}  // namespace cmer
