#pragma once

#include <iosfwd>

namespace sadkit {

/// Entry point of the sadkit tool. Failures print {"error": ...} to `err` and
/// return nonzero.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sadkit
