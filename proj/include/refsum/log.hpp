#pragma once

#include <iostream>
#include <string_view>

namespace refsum {

enum class LogLevel { kQuiet, kWarn, kInfo };

/// Process-wide verbosity; defaults to kWarn.
LogLevel& log_level();

inline void log_warn(std::string_view msg) {
  if (log_level() >= LogLevel::kWarn) std::clog << "[warn] " << msg << '\n';
}

inline void log_info(std::string_view msg) {
  if (log_level() >= LogLevel::kInfo) std::clog << "[info] " << msg << '\n';
}

}  // namespace refsum
