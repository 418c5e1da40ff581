#include "tracesim/cli.hpp"

int main(int argc, char** argv) { return tracesim::run_cli(argc, argv); }
