#pragma once

#include <stdexcept>

namespace refsum {

/// Bad command line or configuration value.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or malformed input data.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or parameter during training.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace refsum
