#include <iostream>
#include <string>
#include <vector>

#include "edvae/cli_runner.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return edvae::run_cli(args, std::cout, std::cerr);
}
