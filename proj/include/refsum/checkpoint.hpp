// Binary checkpoint: magic, version, config record, training step, then
// named little-endian float64 arrays. Optimizer moments travel as extra
// arrays under "adam/m/<name>", "adam/v/<name>" and "adam/step".
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "refsum/model.hpp"
#include "refsum/optimizer.hpp"

namespace refsum {

inline constexpr std::string_view kCheckpointMagic = "REFSUMCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

struct CheckpointFile {
  ModelConfig config;
  std::uint64_t step = 0;
  std::vector<NamedArray> arrays;
};

std::string serialize(const CheckpointFile& file);
/// Throws DataError on a bad magic, version, or truncated payload.
CheckpointFile parse(std::string_view bytes);

struct Checkpoint {
  ModelParams params;
  AdamState adam;  // empty when the file carries no optimizer state
  std::uint64_t step = 0;
};

std::string serialize_checkpoint(const ModelParams& params, const AdamState* adam, std::uint64_t step);
/// Throws DataError if arrays are missing or misshapen for the stored config.
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const AdamState* adam,
                     std::uint64_t step);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// FNV-1a over an array's raw little-endian payload.
std::uint64_t array_checksum(const NamedArray& array);

}  // namespace refsum
