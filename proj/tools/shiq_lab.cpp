#include "shiq/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
    return shiq::run_cli(argc, argv, std::cout, std::cerr);
}
