#pragma once

#include <iosfwd>

namespace roadenkf::cli {

/// Runs one subcommand. Exit codes: 0 success, 1 other failure, 2 usage or
/// configuration error, 3 numeric divergence.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace roadenkf::cli
