#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace step {

/// Exit statuses of the `step` command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPrerequisite = 3;

/// Parses `args` (without the program name) and runs one subcommand.
/// Progress goes to `out`; errors go to `err` as one JSON object per line.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace step
