#include <iostream>
#include <string>
#include <vector>

#include "structconv/commands.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return structconv::run_cli(args, std::cout, std::cerr);
}
