#include <iostream>

#include "constellation/cli.hpp"

int main(int argc, char** argv) {
  return constellation::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
