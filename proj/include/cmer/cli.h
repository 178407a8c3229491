// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace cmer {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitNumeric = 2;

/// Subcommands: synth, train, eval, profile. Returns the process exit code.
int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cmer
