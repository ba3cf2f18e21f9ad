#include <iostream>

#include "transflower/cli.hpp"

int main(int argc, char** argv) { return transflower::cli::run(argc, argv, std::cout, std::cerr); }
