#include "ssrgnet/cli.hpp"

int main(int argc, char** argv) {
  return ssrgnet::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
