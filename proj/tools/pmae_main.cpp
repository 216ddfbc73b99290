#include <iostream>

#include "pmae/cli.hpp"

int main(int argc, char** argv) {
    return pmae::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
