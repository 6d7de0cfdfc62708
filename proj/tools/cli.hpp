#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace itsr::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3 };

/// Runs one `itsr` subcommand. args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace itsr::cli
