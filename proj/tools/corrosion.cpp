#include <string>
#include <vector>

#include "corrosion/cli.hpp"

int main(int argc, char** argv) {
  return corrosion::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
