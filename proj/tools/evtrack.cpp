#include <iostream>
#include <string>
#include <vector>

#include "evtrack/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return evtrack::dispatch(args, std::cout, std::cerr);
}
