// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "kunbr/evalrtt/experiment.hpp"

namespace kunbr::cli {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitValidation = 2, kExitNumeric = 3, kExitIo = 4 };

// Parses and runs one subcommand; never throws. `args` excludes argv[0].
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

// Per-seed rows followed by one mean±std row per method, in percent.
std::string comparison_table(const eval::Comparison& cmp);

}  // namespace kunbr::cli
