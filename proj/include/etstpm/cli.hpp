#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace etstpm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitDataOrConfig = 2, kExitNumeric = 3 };

/// Entry point of the `etstpm` tool. Diagnostics go to `err`, progress to `out`.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace etstpm
