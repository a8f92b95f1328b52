#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace protolab {

// Entry point behind the `protolab` executable. args[0] is the program name.
// Failures print {"error": {...}} to `err` and return nonzero.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace protolab
