#include <string>
#include <vector>

#include "dsa_ltd/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dsa_ltd::cli::dispatch(args);
}
