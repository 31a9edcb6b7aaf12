#include <iostream>

#include "qgn/cli.hpp"

int main(int argc, char** argv) { return qgn::run_cli(argc, argv, std::cout, std::cerr); }
