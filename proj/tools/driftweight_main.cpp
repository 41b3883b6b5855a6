#include <string>
#include <vector>

#include "driftweight/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return driftweight::cli::run(args);
}
