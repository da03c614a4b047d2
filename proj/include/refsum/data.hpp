// Corpus ingestion (one JSON object per line with id, article, summary),
// filtering, dev split and seeded micro-batching.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "refsum/tokenizer.hpp"

namespace refsum {

struct CorpusExample {
  std::string id;
  std::string article;
  std::string summary;
};

struct CorpusStats {
  std::size_t lines = 0;
  std::size_t loaded = 0;
  std::size_t skipped_malformed = 0;
  std::size_t skipped_empty = 0;
};

/// Malformed lines and records with an empty article or summary are
/// skipped with a warning and counted. Blank lines are ignored.
std::vector<CorpusExample> parse_corpus(std::string_view text, CorpusStats* stats = nullptr);
/// Throws DataError if the file cannot be read.
std::vector<CorpusExample> read_corpus(const std::filesystem::path& path, CorpusStats* stats = nullptr);

std::vector<TokenizedExample> tokenize_corpus(const std::vector<CorpusExample>& corpus, const Vocabulary& vocab,
                                              std::size_t max_source, std::size_t max_target,
                                              const TextOptions& opts = {});

std::vector<TokenizedExample> load_corpus(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t max_source, std::size_t max_target,
                                          const TextOptions& opts = {}, CorpusStats* stats = nullptr);

/// Keeps examples whose summary has at least `min_words` whitespace words.
std::vector<TokenizedExample> filter_min_summary(const std::vector<TokenizedExample>& examples,
                                                 std::size_t min_words);

struct MicroBatch {
  std::vector<std::size_t> indices;  // into the example list
  // One row per example, right-padded with PAD to the in-batch maximum.
  std::vector<std::vector<TokenId>> source;
  std::vector<std::vector<TokenId>> source_copy;
  std::vector<std::vector<TokenId>> target;
};

/// Seeded shuffle for (seed, epoch), then consecutive chunks of
/// `micro_batch`; only the last chunk may be short.
std::vector<MicroBatch> make_batches(const std::vector<TokenizedExample>& examples, std::size_t micro_batch,
                                     std::uint64_t seed, std::uint64_t epoch);

struct DevSplit {
  std::vector<TokenizedExample> train;
  std::vector<TokenizedExample> dev;
};

/// An example goes to dev when a seeded hash of its id falls in the lowest
/// `fraction` of the hash range.
DevSplit split_dev(std::vector<TokenizedExample> examples, double fraction, std::uint64_t seed);

}  // namespace refsum
