#pragma once

#include <string>
#include <vector>

namespace aimsim::cli {

/// Parses and runs one command. Returns the process exit status: 0 on
/// success, 1 on a runtime or contract error, 2 on a usage error.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

}  // namespace aimsim::cli
