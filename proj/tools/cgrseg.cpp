#include "cgrseg/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return cgr::run_cli(argc, argv, std::cout, std::cerr); }
