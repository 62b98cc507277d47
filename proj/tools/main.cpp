#include <iostream>

#include "sbat/cli.hpp"

int main(int argc, char** argv) { return sbat::run_cli(argc, argv, std::cout, std::cerr); }
