#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cte::cli {

enum ExitCode : int { ok = 0, usage_error = 1, data_error = 2, numerical_error = 3 };

/// Runs one command. `args` excludes the program name. Results go to the
/// declared output paths and `out`; logs and diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cte::cli
