#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace ratnet {

// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ratnet
