#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace structconv {

/// Exit codes of the structconv tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // a check failed, a tolerance was breached or training diverged
  kExitUsage = 2,    // bad flags, unreadable or invalid input
};

/// Runs `structconv <verb> [flags]`. args[0] is the program name. Results go
/// to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace structconv
