#include "refsum/data.hpp"

#include <json.hpp>
#include <stdexcept>

#include "refsum/error.hpp"
#include "refsum/io.hpp"
#include "refsum/log.hpp"
#include "refsum/rng.hpp"

namespace refsum {

namespace {

bool blank(std::string_view s) {
  return s.find_first_not_of(" \t\r\n\f\v") == std::string_view::npos;
}

std::vector<TokenId> padded(const std::vector<TokenId>& ids, std::size_t width) {
  std::vector<TokenId> row(ids);
  row.resize(width, kPad);
  return row;
}

}  // namespace

std::vector<CorpusExample> parse_corpus(std::string_view text, CorpusStats* stats) {
  CorpusStats local;
  CorpusStats& st = stats != nullptr ? *stats : local;
  std::vector<CorpusExample> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (blank(line)) continue;
    ++st.lines;
    CorpusExample ex;
    try {
      const auto j = nlohmann::json::parse(line);
      ex.article = j.at("article").get<std::string>();
      ex.summary = j.at("summary").get<std::string>();
      const auto& id = j.at("id");
      ex.id = id.is_string() ? id.get<std::string>() : id.dump();
    } catch (const nlohmann::json::exception& e) {
      log_warn("corpus line " + std::to_string(line_no) + " skipped: " + e.what());
      ++st.skipped_malformed;
      continue;
    }
    if (blank(ex.article) || blank(ex.summary)) {
      log_warn("corpus line " + std::to_string(line_no) + " skipped: empty article or summary");
      ++st.skipped_empty;
      continue;
    }
    out.push_back(std::move(ex));
    ++st.loaded;
  }
  return out;
}

std::vector<CorpusExample> read_corpus(const std::filesystem::path& path, CorpusStats* stats) {
  return parse_corpus(read_file(path), stats);
}

std::vector<TokenizedExample> tokenize_corpus(const std::vector<CorpusExample>& corpus, const Vocabulary& vocab,
                                              std::size_t max_source, std::size_t max_target,
                                              const TextOptions& opts) {
  std::vector<TokenizedExample> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) {
    out.push_back(make_example(ex.id, ex.article, ex.summary, vocab, max_source, max_target, opts));
  }
  return out;
}

std::vector<TokenizedExample> load_corpus(const std::filesystem::path& path, const Vocabulary& vocab,
                                          std::size_t max_source, std::size_t max_target,
                                          const TextOptions& opts, CorpusStats* stats) {
  return tokenize_corpus(read_corpus(path, stats), vocab, max_source, max_target, opts);
}

std::vector<TokenizedExample> filter_min_summary(const std::vector<TokenizedExample>& examples,
                                                 std::size_t min_words) {
  std::vector<TokenizedExample> out;
  for (const auto& ex : examples) {
    if (split_words(ex.reference).size() >= min_words) out.push_back(ex);
  }
  return out;
}

std::vector<MicroBatch> make_batches(const std::vector<TokenizedExample>& examples, std::size_t micro_batch,
                                     std::uint64_t seed, std::uint64_t epoch) {
  if (micro_batch < 1) throw std::invalid_argument("make_batches: micro_batch must be >= 1");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)));
  shuffle(order, rng);

  std::vector<MicroBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += micro_batch) {
    MicroBatch b;
    const std::size_t end = std::min(order.size(), start + micro_batch);
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    std::size_t src_w = 0, tgt_w = 0;
    for (auto i : b.indices) {
      src_w = std::max(src_w, examples[i].source_ids.size());
      tgt_w = std::max(tgt_w, examples[i].target_ids.size());
    }
    for (auto i : b.indices) {
      b.source.push_back(padded(examples[i].source_ids, src_w));
      b.source_copy.push_back(padded(examples[i].source_copy_ids, src_w));
      b.target.push_back(padded(examples[i].target_ids, tgt_w));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

DevSplit split_dev(std::vector<TokenizedExample> examples, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw std::invalid_argument("split_dev: fraction must be in [0, 1]");
  DevSplit split;
  const auto threshold = static_cast<std::uint64_t>(fraction * 10000.0);
  for (auto& ex : examples) {
    std::uint64_t h = fnv1a64(&seed, sizeof seed);
    h = fnv1a64(ex.id.data(), ex.id.size(), h);
    (h % 10000 < threshold ? split.dev : split.train).push_back(std::move(ex));
  }
  return split;
}

}  // namespace refsum
