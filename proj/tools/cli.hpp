#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pymx::cli {

/// Parses `args` (without the program name), runs one subcommand and returns
/// the process exit code. Errors are reported on `err` as a single
/// "error[<kind>]: <message>" line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pymx::cli
