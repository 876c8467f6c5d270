#include <string>
#include <vector>

#include "balab/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return balab::run_cli(args);
}
