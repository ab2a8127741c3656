#pragma once

#include <string>
#include <vector>

namespace factlab::cli {

// Dispatch one subcommand invocation (argv without the program name).
// Returns the process exit code; never throws.
int run(const std::vector<std::string>& args);

}  // namespace factlab::cli
