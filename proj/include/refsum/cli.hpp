#pragma once

namespace refsum::cli {

/// Subcommands: build-vocab, pretrain, train, generate, evaluate, inspect.
/// Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
int run(int argc, char** argv);

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

}  // namespace refsum::cli
