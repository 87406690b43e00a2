#include <iostream>
#include <string>
#include <vector>

#include "cte/cli.hpp"
#include "cte/tensor.hpp"

int main(int argc, char** argv) {
  cte::num::retain_freed_memory();
  std::vector<std::string> args(argv + 1, argv + argc);
  return cte::cli::run(args, std::cout, std::cerr);
}
