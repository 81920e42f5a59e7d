#include <torch/torch.h>

#include <iostream>
#include <string>
#include <vector>

#include "hgd/cli.hpp"

int main(int argc, char** argv) {
  // Single intra-op thread keeps CPU runs bit-reproducible.
  torch::set_num_threads(1);
  std::vector<std::string> args(argv + 1, argv + argc);
  return hgd::run_cli(args, std::cout, std::cerr);
}
