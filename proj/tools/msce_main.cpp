#include "msce/cli.hpp"

int main(int argc, char** argv) { return msce::cli::run_command(argc, argv); }
