#include "sadkit/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return sadkit::run_cli(argc, argv, std::cout, std::cerr); }
