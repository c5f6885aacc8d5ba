#pragma once

#include <string>
#include <vector>

namespace quanos::cli {

/// Runs one subcommand. Returns 0 on success, 1 on a domain error and 2 on
/// a usage error. Output and diagnostics go to stdout/stderr.
int dispatch(int argc, const char* const* argv);
/// Same, with the arguments after the program name.
int dispatch(const std::vector<std::string>& args);

/// Values of "a:b:step" (inclusive) or "a,b,c".
std::vector<double> parse_grid(const std::string& text);

}  // namespace quanos::cli
