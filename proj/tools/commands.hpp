#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qsm::tools {

/// Runs one qsmtool invocation. `args` excludes the program name. Reports go
/// to `out`, JSON errors and help text to `err`. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qsm::tools
