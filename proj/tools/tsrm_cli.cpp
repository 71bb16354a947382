#include "tsrm/cli.hpp"
#include "tsrm/runtime.hpp"

int main(int argc, char** argv) {
  tsrm::tune_allocator();
  return tsrm::run_cli(argc, argv);
}
