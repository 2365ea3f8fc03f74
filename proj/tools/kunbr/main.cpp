// SPDX-License-Identifier: Apache-2.0
#include "kunbr/cli/commands.hpp"

int main(int argc, char** argv) { return kunbr::cli::run(argc, argv); }
