#include <iostream>
#include <string>
#include <vector>

#include "etstpm/cli.hpp"

int main(int argc, char** argv) {
    return etstpm::cli_main(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
