#pragma once

#include <string>
#include <vector>

namespace tracesim {

// Entry point behind the tracesim binary. Exit codes: 0 success, 1 usage or
// unexpected failure, 2 parse, 3 graph construction, 4 simulation,
// 5 transform/cost-model.
int run_cli(int argc, const char* const* argv);

// Test convenience: args without the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace tracesim
