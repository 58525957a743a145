#include <string>
#include <vector>

#include "habitat/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return habitat::cli::run(std::move(args));
}
