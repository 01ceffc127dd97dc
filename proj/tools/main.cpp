#include <iostream>
#include <string>
#include <vector>

#include "p2p/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return p2p::cli::run(std::move(args), std::cout, std::cerr);
}
