#include <iostream>
#include <string>
#include <vector>

#include "dialign/cli.hpp"

int main(int argc, char** argv) {
    return dialign::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
