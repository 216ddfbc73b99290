#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pmae {

// Environment variable naming the default output root.
inline constexpr const char* kOutRootEnv = "PMAE_OUT_ROOT";

/// Runs one command line (args exclude the program name).
///
/// Returns 0 on success, 2 on a bad configuration or usage, 1 on a runtime
/// failure. Failures print one line "error: <category>: <detail>" to `err`,
/// where category is one of usage, config, io, shape, non_finite, runtime.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace pmae
