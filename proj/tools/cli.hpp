#pragma once

// Command-line front end: fit, transport, indirect, synth, simulate and
// validate subcommands. Every run that writes files also writes a
// manifest.json listing its inputs and outputs with SHA-256 digests.

#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace agt::cli {

/// Run the tool with `args` (without the program name). Returns the process
/// exit code: 0 success, 1 numerical failure, 2 input or usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct OptionDoc {
  std::string command;  // empty for global options
  std::string name;
  std::string description;
};

std::vector<OptionDoc> option_inventory();

/// Help page of a subcommand, or of the whole tool for an empty name.
std::string help_text(std::string_view command);

}  // namespace agt::cli
