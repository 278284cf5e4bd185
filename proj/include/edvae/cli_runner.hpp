#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace edvae {

// Experiment driver behind the `edvae` binary. Exposed as a function so tests
// can exercise the command surface in-process.
// Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace edvae
