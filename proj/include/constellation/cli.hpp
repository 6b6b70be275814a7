#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace constellation::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Dispatches `args` (without the program name) to a subcommand. Errors are
/// printed to `err` and mapped to exit codes.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace constellation::cli
