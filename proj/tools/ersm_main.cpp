#include <iostream>
#include <string>
#include <vector>

#include "ersm/cli.hpp"

int main(int argc, char** argv) {
  ersm::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return ersm::run_cli(args, std::cout, std::cerr);
}
