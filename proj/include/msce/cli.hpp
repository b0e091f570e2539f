#pragma once

namespace msce::cli {

// Parses argv, runs one subcommand and returns the process exit status
// (0 ok, 1 computation, 2 input, 3 config). Errors are printed to stderr as
// a single line "error[CODE]: message".
int run_command(int argc, char** argv);

}  // namespace msce::cli
