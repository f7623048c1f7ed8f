#pragma once

#include <iosfwd>

namespace opd::cli {

// Exit codes: 0 success, 1 runtime failure, 2 invalid input or usage.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace opd::cli
