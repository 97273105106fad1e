// SPDX-License-Identifier: Apache-2.0
//
// The `cake` command line: synth | train | infer | eval | bench | gradcheck.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cake::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;  // runtime error or failed check
inline constexpr int kUsage = 2;    // bad arguments or configuration

/// Runs one invocation; args excludes the program name. Machine-readable
/// results go to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cake::cli
