#pragma once

#include <string>
#include <vector>

namespace ipr {

// Command-line frontend with subcommands gen, train, eval, verify-sampler,
// and diagnose.  Returns the process exit code:
//   0 success, 1 oracle failure (verify-sampler), 2 usage or config error,
//   3 numerical divergence during training, 4 checkpoint/config mismatch.
// The IPR_SEED environment variable overrides the config seed everywhere.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace ipr
