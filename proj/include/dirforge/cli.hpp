#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dirforge {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitInvariant = 3;

// Runs one command. args excludes the program name, e.g.
// {"phantom", "--spec", "s.json", "--out", "dir"}. Returns the exit code.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace dirforge
