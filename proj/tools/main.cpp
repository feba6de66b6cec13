#include <iostream>

#include "ehmam/cli.hpp"

int main(int argc, char** argv) { return ehmam::run_cli(argc, argv, std::cout, std::cerr); }
