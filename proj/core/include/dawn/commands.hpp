#pragma once

#include <string>

#include "dawn/config.hpp"

namespace dawn {

// Subcommand bodies shared by the CLI binary and the test harnesses. Each
// returns a process exit code: 0 ok, 1 I/O failure, 2 usage, 3 incompatible
// inputs, 4 numerical failure.
int cmd_gen_data(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg);
int cmd_eval(const RunConfig& cfg);
int cmd_visualize(const RunConfig& cfg);

// Full argv-level entry point (parsing, config file, dispatch).
int run_cli(int argc, const char* const* argv);

}  // namespace dawn
