// Training loop: teacher-forced draft and refine losses, optional sampled
// policy-gradient terms, gradient accumulation, Adam, checkpoints, and
// dev-set checkpoint selection. Also the masked-LM encoder warm-up.
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refsum/inference.hpp"
#include "refsum/objectives.hpp"
#include "refsum/optimizer.hpp"

namespace refsum {

struct TrainConfig {
  double learning_rate = 3e-4;
  AdamHyper adam;
  long warmup_steps = 0;  // 0: 10% of the planned steps
  std::size_t batch_size = 36;
  std::size_t accumulate_steps = 12;
  std::size_t micro_batch = 3;
  int epochs = 4;
  double dropout = 0.15;
  double smoothing = 0.1;
  double gamma = 0.99;
  bool rl_enabled = false;
  bool refine_enabled = true;
  std::uint64_t seed = 1;
  std::size_t keep_last_checkpoints = 10;
  long checkpoint_every = 200;
  long max_steps = 0;  // 0: no cap
  long mlm_pretrain_steps = 0;
  std::filesystem::path checkpoint_dir;  // empty: keep checkpoints in memory only

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
};

struct ExampleLoss {
  Node total;
  LossReport report;
};

/// Ancestral sample from the draft decoder in eval mode; ends with PAD
/// unless max_len was reached first.
std::vector<TokenId> sample_draft(ModelParams& params, const EncoderOutput& enc, int max_len,
                                  std::mt19937_64& rng);

/// Joint loss of one example on a training tape. `target` may carry
/// trailing PAD; `source` may too. RL sampling and the dropout of the RL
/// scoring pass draw from `rl_rng` only.
ExampleLoss compute_example_loss(Tape& tape, ModelParams& params, std::span<const TokenId> source,
                                 std::span<const TokenId> source_copy, int num_oov,
                                 std::span<const TokenId> target, const TrainConfig& cfg,
                                 std::mt19937_64& rl_rng);

struct CheckpointRecord {
  long step = 0;
  int epoch = 0;
  std::string bytes;
  std::filesystem::path path;  // set when written to checkpoint_dir
};

struct TrainResult {
  std::vector<CheckpointRecord> checkpoints;  // oldest first, at most keep_last
  std::vector<LossReport> reports;            // one per logical step
  std::vector<std::string> log;               // format_log_record lines
  AdamState adam;
  long steps = 0;
};

/// Throws DataError for an empty dataset and NumericError on a non-finite
/// loss.
TrainResult train(ModelParams& params, const std::vector<TokenizedExample>& data, const TrainConfig& cfg);

/// Mean over examples of the (R-1 + R-2 + R-L) / 3 full-length F1 of the
/// generated text against the reference.
double dev_score(ModelParams& params, const Vocabulary& vocab, const std::vector<TokenizedExample>& dev,
                 const GenerateOptions& opts, bool stem = false);

/// Index of the highest score; ties go to the later index.
std::size_t select_best_index(std::span<const double> scores);

/// Scores each checkpoint on `dev` and returns the winner's index. Throws
/// std::invalid_argument for an empty dev set or checkpoint list.
std::size_t select_best_checkpoint(std::span<const CheckpointRecord> checkpoints,
                                   const std::vector<TokenizedExample>& dev, const Vocabulary& vocab,
                                   const GenerateOptions& opts, std::vector<double>* scores = nullptr);

struct MlmConfig {
  long steps = 0;
  std::size_t batch = 8;
  double learning_rate = 1e-3;
  double mask_rate = 0.15;
  std::uint64_t seed = 1;
  AdamHyper adam;
};

/// Masks a seeded subset of each sequence and trains the encoder with the
/// tied output head to restore it. Only encoder-side tensors move. Returns
/// the mean masked-token loss per step.
std::vector<double> mlm_pretrain(ModelParams& params, const std::vector<std::vector<TokenId>>& sequences,
                                 const MlmConfig& cfg);

/// Fraction of masked positions whose argmax equals the original token.
double mlm_accuracy(ModelParams& params, const std::vector<std::vector<TokenId>>& sequences, double mask_rate,
                    std::uint64_t seed);

}  // namespace refsum
