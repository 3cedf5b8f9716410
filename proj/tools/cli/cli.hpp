#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cor::cli {

/// Runs cor-lab on argv-style arguments (args[0] is the program name).
/// Human summaries go to `out`, warnings and errors to `err`. Returns the
/// exit code: 0 on success, 2 on input or configuration errors, 3 when a
/// numeric check fails.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cor::cli
