#include <iostream>

#include "dsc/cli.hpp"

int main(int argc, char** argv) { return dsc::cli::run(argc, argv, std::cout, std::cerr); }
