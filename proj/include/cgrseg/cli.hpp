#pragma once

#include <ostream>

namespace cgr {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,      // bad arguments, config, or input files
  kExitNumerical = 2,  // gradient check failure or training divergence
};

/// Entry point of the `cgrseg` tool: subcommands flops, gradcheck, train-toy
/// and infer. Normal output goes to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cgr
