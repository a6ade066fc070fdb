#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace crodino::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3 };

/// Entry point behind the `crodino` executable. args excludes the program
/// name. Diagnostics go to err as a single line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace crodino::cli
