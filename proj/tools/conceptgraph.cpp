#include <string>
#include <vector>

#include "conceptgraph/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cg::run_cli(args);
}
