#include <iostream>

#include "dirforge/cli.hpp"

int main(int argc, char **argv) {
    return dirforge::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
