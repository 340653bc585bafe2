#include <iostream>

#include "lvlm/cli.hpp"

int main(int argc, char** argv) { return lvlm::run_cli(argc, argv, std::cout, std::cerr); }
