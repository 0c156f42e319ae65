#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "evtrack/error.hpp"

namespace evtrack {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitFormat = 3, kExitNumeric = 4, kExitIo = 5 };

int exit_code_for(ErrorCode code);

// "key = value" lines; blank lines and '#' comments are ignored.
std::map<std::string, std::string> parse_config(const std::string& text);

/// Runs one command line (args excludes the program name) and returns the exit code.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evtrack
