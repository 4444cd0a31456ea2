#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dcv::cli {

/// Runs the command line `args` (without the program name). Returns the
/// process exit code: 0 success, 1 usage/validation/data errors, 2 internal.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace dcv::cli
