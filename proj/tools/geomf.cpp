#include <iostream>
#include <string>
#include <vector>

#include "geomf/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return geomf::run_cli(args, std::cout, std::cerr);
}
