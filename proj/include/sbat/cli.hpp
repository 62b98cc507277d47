#pragma once

#include <iosfwd>

namespace sbat {

enum ExitCode : int { kExitOk = 0, kExitInput = 2, kExitContract = 3 };

/// Entry point of the `sbat` binary. Input, config and load errors return 2,
/// contract and numeric failures 3; messages go to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sbat
