// ROUGE-N and ROUGE-L over arbitrary token types, plus the text-level
// protocols: full-length F1, limited-length recall with semicolon-split
// references, and length-bucketed aggregation.
#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace refsum {

struct RougeScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;

  static RougeScore from_counts(double overlap, double candidate_total, double reference_total) {
    RougeScore s;
    s.precision = candidate_total > 0 ? overlap / candidate_total : 0.0;
    s.recall = reference_total > 0 ? overlap / reference_total : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
  }
};

template <typename T>
std::map<std::vector<T>, long> ngram_counts(std::span<const T> tokens, int n) {
  std::map<std::vector<T>, long> counts;
  if (n < 1 || tokens.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    ++counts[std::vector<T>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                            tokens.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return counts;
}

template <typename T>
long clipped_overlap(const std::map<std::vector<T>, long>& cand, const std::map<std::vector<T>, long>& ref) {
  long overlap = 0;
  for (const auto& [gram, count] : cand) {
    if (auto it = ref.find(gram); it != ref.end()) overlap += std::min(count, it->second);
  }
  return overlap;
}

/// Clipped n-gram overlap; precision over candidate n-grams, recall over
/// reference n-grams. Throws std::invalid_argument for n < 1.
template <typename T>
RougeScore rouge_n(std::span<const T> candidate, std::span<const T> reference, int n) {
  if (n < 1) throw std::invalid_argument("rouge_n: n must be >= 1");
  const auto c = ngram_counts(candidate, n);
  const auto r = ngram_counts(reference, n);
  long c_total = 0, r_total = 0;
  for (const auto& [g, k] : c) c_total += k;
  for (const auto& [g, k] : r) r_total += k;
  return RougeScore::from_counts(static_cast<double>(clipped_overlap(c, r)),
                                 static_cast<double>(c_total), static_cast<double>(r_total));
}

/// Dynamic-programming LCS table, (|a|+1) x (|b|+1), row-major.
template <typename T>
std::vector<std::size_t> lcs_table(std::span<const T> a, std::span<const T> b) {
  const std::size_t w = b.size() + 1;
  std::vector<std::size_t> dp((a.size() + 1) * w, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      dp[i * w + j] = a[i - 1] == b[j - 1] ? dp[(i - 1) * w + j - 1] + 1
                                           : std::max(dp[(i - 1) * w + j], dp[i * w + j - 1]);
    }
  }
  return dp;
}

template <typename T>
std::size_t lcs_length(std::span<const T> a, std::span<const T> b) {
  return lcs_table(a, b).back();
}

/// Positions of `reference` that lie on one longest common subsequence
/// with `candidate`.
template <typename T>
std::vector<std::size_t> lcs_reference_hits(std::span<const T> reference, std::span<const T> candidate) {
  const auto dp = lcs_table(reference, candidate);
  const std::size_t w = candidate.size() + 1;
  std::vector<std::size_t> hits;
  std::size_t i = reference.size(), j = candidate.size();
  while (i > 0 && j > 0) {
    if (reference[i - 1] == candidate[j - 1]) {
      hits.push_back(i - 1);
      --i;
      --j;
    } else if (dp[(i - 1) * w + j] >= dp[i * w + j - 1]) {
      --i;
    } else {
      --j;
    }
  }
  std::reverse(hits.begin(), hits.end());
  return hits;
}

/// Whole-sequence LCS: p = LCS/|candidate|, r = LCS/|reference|.
template <typename T>
RougeScore rouge_l(std::span<const T> candidate, std::span<const T> reference) {
  return RougeScore::from_counts(static_cast<double>(lcs_length(candidate, reference)),
                                 static_cast<double>(candidate.size()),
                                 static_cast<double>(reference.size()));
}

// ---------------------------------------------------------------- text

std::string porter_stem(std::string_view word);

/// Lowercase, non-alphanumerics to spaces, whitespace split, optional stemming.
std::vector<std::string> rouge_tokenize(std::string_view text, bool stem = false);

/// Splits on ';' and tokenizes each piece; empty pieces are dropped.
std::vector<std::vector<std::string>> semicolon_sentences(std::string_view text, bool stem = false);

struct ExampleScores {
  RougeScore r1, r2, rl;
  std::size_t reference_length = 0;

  double mean_f1() const { return (r1.f1 + r2.f1 + rl.f1) / 3.0; }
};

/// Full-length ROUGE-1/2/L of one candidate against one reference.
ExampleScores score_full(std::string_view candidate, std::string_view reference, bool stem = false);

struct RecallTriple {
  double r1 = 0;
  double r2 = 0;
  double rl = 0;
};

/// Recall after truncating the candidate to the reference's token count.
/// The reference is split into sentences at semicolons: bigrams do not
/// cross sentence boundaries and ROUGE-L is the union-LCS recall summed
/// over reference sentences.
RecallTriple limited_length_recall(std::string_view candidate, std::string_view reference, bool stem = false);

struct ScoredExample {
  std::size_t reference_length = 0;
  double r1 = 0;
  double r2 = 0;
  double rl = 0;
};

struct BucketRow {
  std::size_t lower = 0;
  std::optional<std::size_t> upper;  // exclusive; none for the last bucket
  std::size_t count = 0;
  std::optional<double> r1, r2, rl;
};

/// Buckets [edges[i], edges[i+1]) plus [edges.back(), inf) by reference
/// length. Edges must be strictly ascending.
std::vector<BucketRow> length_bucket_report(std::span<const ScoredExample> examples,
                                            std::span<const std::size_t> edges);

/// Macro average of per-example scores.
ExampleScores mean_scores(std::span<const ExampleScores> scores);

}  // namespace refsum
