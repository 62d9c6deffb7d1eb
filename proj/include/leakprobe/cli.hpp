#pragma once

// The `leakprobe` command line, callable in-process.
//
// Exit codes: 0 success, 1 validation or runtime failure, 2 usage error.

#include <iosfwd>
#include <string>
#include <vector>

namespace leakprobe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable that sets the output directory when --out-dir is absent.
inline constexpr const char* kOutDirEnv = "LEAKPROBE_OUT_DIR";

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

const char* version();

}  // namespace leakprobe::cli
