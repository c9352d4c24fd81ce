#pragma once

#include <ostream>

namespace omsmon::cli {

enum ExitCode { ok = 0, runtime_failure = 1, usage = 2 };

/// Runs the omsmon command line with the given streams. Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace omsmon::cli
