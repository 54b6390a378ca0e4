#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "lgf/dataset.hpp"

namespace lgf::cli {

// Environment variable naming the default output root.
inline constexpr const char* kOutputRootEnv = "LGF_OUTPUT_ROOT";

// Withholds every k-th row (rows with i % k == k / 2, so both ends stay in
// the training part).
data::Split split_holdout(const data::DataSet& data, std::size_t every);

// Runs one subcommand. Returns the process exit status; on failure a single
// `ERROR command=<cmd> code=<kind> message="..."` line goes to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lgf::cli
