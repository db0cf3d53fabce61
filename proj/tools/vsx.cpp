// Command-line entry point. Subcommands are implemented in vsx/cli.hpp.
#include <iostream>
#include <string>
#include <vector>

#include "vsx/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return vsx::run_cli(args, std::cout, std::cerr);
}
