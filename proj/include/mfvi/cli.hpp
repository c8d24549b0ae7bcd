#pragma once

// The `vi` command line: fit, simulate, eval, diagnose-meanfield.
//
// Exit codes: 0 success, 2 configuration error, 3 data-format error,
// 4 numeric failure, 1 anything else (e.g. an unwritable output directory).

#include <iosfwd>

namespace mfvi::cli {

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Runs one command. Results and requested printouts go to `out`, log lines
/// and error messages to `err`.
int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err);

} // namespace mfvi::cli
