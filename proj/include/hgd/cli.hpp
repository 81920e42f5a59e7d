#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hgd {

/// Entry point of the `hgd` command. `args` excludes the program name.
/// Returns the process exit code (0 ok, 2 usage, 3 validation, 4 runtime).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hgd
