#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

namespace astra {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitProtocol = 3,
  kExitViolations = 4,
};

// Runs one subcommand (infer, bench, verify, train, ablate) on an already
// loaded config document. Diagnostics go to `err`, the summary line to `out`.
int run_command(const std::string& command, nlohmann::json doc, const std::vector<std::string>& overrides,
                std::ostream& out, std::ostream& err);

int run_cli(int argc, char** argv);

}  // namespace astra
