// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

namespace cmer {

using TokenIds = std::vector<std::size_t>;

inline constexpr std::size_t kBosId = 0;
inline constexpr std::size_t kEosId = 1;
inline constexpr std::size_t kPadId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kNumReservedIds = 4;

}  // namespace cmer
