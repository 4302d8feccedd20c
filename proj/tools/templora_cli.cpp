#include <iostream>
#include <string>
#include <vector>

#include "templora/harness/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return templora::harness::cli_dispatch(args, std::cout, std::cerr);
}
