#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "exuseg/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a small synthetic fundus-like dataset with lesion masks"};
  std::string dir = "demo-data";
  std::size_t train = 4, test = 2, size = 256;
  std::uint64_t seed = 1;
  app.add_option("dir", dir, "Output directory");
  app.add_option("--train", train, "Number of training images");
  app.add_option("--test", test, "Number of test images");
  app.add_option("--size", size, "Image side length in pixels")->check(CLI::Range(32, 4096));
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    exuseg::synth::write_dataset(dir, train, test, size, seed);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  std::cout << "wrote " << train + test << " image/mask pairs to " << dir << '\n';
  return 0;
}
