#pragma once

#include <iosfwd>

namespace lvlm {

/// Entry point of the `lvlm` tool. Returns the process exit code:
/// 0 success, 1 gradcheck failure or replay mismatch, 2 usage/config, 3 I/O, 4 numeric.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace lvlm
