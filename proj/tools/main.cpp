#include <string>
#include <vector>

#include <bayeslearn/cli.hpp>

int main(int argc, char** argv) {
  return bayeslearn::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
