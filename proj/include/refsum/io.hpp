#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace refsum {

/// Whole file as bytes; throws DataError when unreadable.
std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file, then renames over `path`, so readers
/// never observe a truncated artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace refsum
