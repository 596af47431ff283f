#pragma once

#include <iosfwd>

namespace dkm::cli {

/// Exit codes: 0 success, 1 I/O or unexpected failure, 2 invalid input,
/// 3 numerical failure.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dkm::cli
