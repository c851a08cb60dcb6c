#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bae {

/// Exit codes: 0 success, 1 usage error, 2 runtime error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one command. `args` excludes the program name. Results go to `out`
/// (JSON lines), diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bae
