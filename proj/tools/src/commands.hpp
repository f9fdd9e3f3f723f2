#pragma once

#include <iosfwd>

namespace uniicl::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitContract = 3,
  kExitIo = 4,
};

/// Parses argv and runs one subcommand. Errors are reported on `err` as a
/// single JSON line: {"error":<kind>,"exit_code":<n>,"message":<text>}.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace uniicl::cli
