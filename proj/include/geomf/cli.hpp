#pragma once

// Command-line front end: gen-data, train, eval, check, inspect.

#include <iosfwd>
#include <string>
#include <vector>

namespace geomf {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,  // invalid configuration or malformed file
  kExitIo = 2,
  kExitNumeric = 3,
  kExitAudit = 4,
};

/// Runs one invocation; `args` excludes the program name. Flags override
/// values from --config (flat JSON); GEOMF_SEED overrides the config seed.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a of a file's bytes as 16 hex digits. Throws IoError.
std::string file_hash(const std::string& path);

}  // namespace geomf
