#include <iostream>
#include <string>
#include <vector>

#include "leakprobe/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return leakprobe::cli::run(args, std::cout, std::cerr);
}
