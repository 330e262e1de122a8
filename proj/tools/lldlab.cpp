#include <string>
#include <vector>

#include "lldlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return lldlab::cli_run(std::move(args));
}
