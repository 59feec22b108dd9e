#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace tamformer {

// Exit codes: 0 success, 1 failed check or divergence, 2 contract/usage
// error, 3 I/O error. args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tamformer
