// Resolved run configuration: model and training settings, decoding and
// evaluation switches, and file paths. Sources are applied in increasing
// precedence: defaults, key=value file, environment (paths only), flags.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "refsum/model.hpp"
#include "refsum/trainer.hpp"

namespace refsum {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  double mlm_learning_rate = 1e-3;

  std::size_t vocab_target = 2000;  // build-vocab size
  bool lowercase = false;
  bool blocking_enabled = true;
  bool stemming = false;
  bool progressive_refine = false;
  int beam_size = 4;
  double length_penalty = 1.0;
  double dev_fraction = 0.05;
  std::size_t min_summary_words = 0;
  std::string eval_mode = "full";  // full | limited-recall
  std::vector<std::size_t> bucket_edges;

  std::filesystem::path corpus;
  std::filesystem::path dev_corpus;
  std::filesystem::path vocab;
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path checkpoint;
  std::filesystem::path input;
  std::filesystem::path reference;
  std::filesystem::path output;

  RunConfig();

  GenerateOptions generate_options() const;
  TextOptions text_options() const { return {lowercase}; }
};

/// Sets one field by key; throws UsageError on an unknown key or a value
/// that does not parse.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

/// Flat "key = value" lines; '#' starts a comment. Throws UsageError with
/// the line number on malformed input.
void apply_config_text(RunConfig& cfg, std::string_view text);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

/// REFSUM_CORPUS, REFSUM_DEV_CORPUS, REFSUM_VOCAB, REFSUM_CHECKPOINT_DIR,
/// REFSUM_CHECKPOINT, REFSUM_INPUT, REFSUM_REFERENCE, REFSUM_OUTPUT.
void apply_environment(RunConfig& cfg);

/// Every key with its resolved value, one "key = value" line each, in a
/// fixed order. Feeding the text back through apply_config_text is lossless.
std::string describe(const RunConfig& cfg);

struct PresetDelta {
  bool refine_enabled = true;
  bool rl_enabled = false;
};

/// one-stage, two-stage or two-stage-rl; throws UsageError otherwise.
PresetDelta ablation_preset(std::string_view name);
void apply_preset(RunConfig& cfg, std::string_view name);

}  // namespace refsum
