#include <iostream>

#include "ratnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ratnet::run_cli(args, std::cout, std::cerr);
}
