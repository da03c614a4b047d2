// Draft beam search with trigram blocking, greedy cloze refinement, and
// the sentence-level clean-up applied to the final text.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "refsum/model.hpp"

namespace refsum {

struct Hypothesis {
  std::vector<TokenId> tokens;  // starts with CLS
  double logprob = 0;
  bool finished = false;

  /// Generated tokens, PAD included when finished.
  std::size_t length() const { return tokens.size() - 1; }
  double score(double length_penalty) const;
};

struct BeamOptions {
  int beam_size = 4;
  double length_penalty = 1.0;
  int max_len = 0;  // 0 or anything larger: the model's max_target_len
  bool block_trigrams = true;
};

/// False iff (prefix[-2], prefix[-1], candidate) already occurs in prefix.
bool trigram_allowed(std::span<const TokenId> prefix, TokenId candidate);

/// Generated ids without CLS, cut at the first PAD.
std::vector<TokenId> strip_draft(std::span<const TokenId> tokens);

/// Beam search over decode_draft_step. Candidates are ranked by cumulative
/// log-probability; a PAD expansion ranked inside the beam finishes, the
/// best non-PAD expansions refill it. Search stops once `beam_size`
/// hypotheses have finished, the beam empties, or max_len is reached. The
/// best finished hypothesis by score() wins; if none finished, the best
/// partial does. Throws std::invalid_argument for beam_size < 1.
Hypothesis beam_search(ModelParams& params, const EncoderOutput& enc, const BeamOptions& opts);

/// beam_search, returned as a draft (no CLS, no PAD).
std::vector<TokenId> beam_search_draft(ModelParams& params, const EncoderOutput& enc, const BeamOptions& opts);

/// Argmax decoding with the same blocking and stopping rules.
Hypothesis greedy_search(ModelParams& params, const EncoderOutput& enc, int max_len, bool block_trigrams);

/// Re-predicts every draft position from the masked draft. By default each
/// position sees the original draft; `progressive` feeds refined tokens
/// forward left to right. An empty draft is returned unchanged.
std::vector<TokenId> refine_greedy(ModelParams& params, std::span<const TokenId> draft, const EncoderOutput& enc,
                                   bool progressive = false);

/// Splits at tokens ending in . ? or !, drops repeated sentences (first kept)
/// and sentences with fewer than `min_words` words, then rejoins.
std::string postprocess(std::string_view text, std::size_t min_words = 3);

struct GenerateOptions {
  BeamOptions beam;
  bool refine = true;
  bool progressive = false;
  bool clean = true;  // run postprocess on the final text
};

struct Generation {
  std::string id;
  std::vector<TokenId> draft;
  std::vector<TokenId> refined;
  std::string draft_text;
  std::string refined_text;
  std::string final_text;
};

/// Encodes `example`, drafts, optionally refines, decodes and cleans.
Generation generate(ModelParams& params, const Vocabulary& vocab, const TokenizedExample& example,
                    const GenerateOptions& opts);

}  // namespace refsum
