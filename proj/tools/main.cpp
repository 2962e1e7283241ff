#include <string>
#include <vector>

#include "uxw/cli.hpp"

int main(int argc, char** argv) { return uxw::cli::run(std::vector<std::string>(argv + 1, argv + argc)); }
