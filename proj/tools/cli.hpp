#pragma once

#include <string>
#include <vector>

namespace imo::cli {

/// Entry point of the `imo` binary. Returns the process exit status:
/// 0 success, 1 runtime failure, 2 configuration or usage error. Failures
/// print one JSON line to stderr.
int run(const std::vector<std::string>& args);

}  // namespace imo::cli
