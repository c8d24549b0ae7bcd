#include <iostream>

#include "mfvi/cli.hpp"

int main(int argc, char **argv) {
  return mfvi::cli::run_cli(argc, argv, std::cout, std::cerr);
}
