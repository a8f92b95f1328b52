#include <iostream>

#include "protolab/cli.hpp"

int main(int argc, char** argv) {
  return protolab::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
