#include "tensornet/cli.hpp"

int main(int argc, char **argv) { return tensornet::run_cli(argc, argv); }
