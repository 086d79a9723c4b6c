#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace uvgpu {

/// Exit codes: 0 success, 1 usage, parse, validation or check failure,
/// 2 runtime trap.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitTrap = 2;

/// Runs one command line (without the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace uvgpu
