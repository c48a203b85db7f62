#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sedlab {

/// Entry point of the `sedlab` command. Returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage or validation error.
/// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sedlab
