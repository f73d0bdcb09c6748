#include <iostream>

#include "tfr/cli.hpp"

int main(int argc, char** argv) {
  return tfr::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
