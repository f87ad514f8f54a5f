#pragma once

#include <iosfwd>

namespace unsafespot::cli {

/// Runs the command line. Returns 0 on success, 2 on validation errors and
/// 1 on runtime errors.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace unsafespot::cli
