#include <iostream>

#include "loraq/cli.hpp"

int main(int argc, char **argv) {
  return loraq::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
