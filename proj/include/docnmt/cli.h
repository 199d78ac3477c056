#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace docnmt {

inline constexpr int kExitOk = 0;
inline constexpr int kExitStageFailure = 1;
inline constexpr int kExitConfigError = 2;

// Runs one subcommand (args exclude the program name). Throws on failure;
// bad arguments raise ConfigError.
void run_command(const std::vector<std::string>& args, std::ostream& log);
bool is_command(const std::string& name);

// Entry point of the docnmt tool: maps failures to exit codes.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace docnmt
