#include "refsum/rouge.hpp"

#include <cctype>
#include <set>
#include <stdexcept>

namespace refsum {

namespace {

using Sentence = std::vector<std::string>;

std::vector<std::string_view> split_on(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = text.find(sep, start);
    parts.push_back(text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return parts;
}

template <typename T>
void add_counts(std::map<std::vector<T>, long>& into, const std::map<std::vector<T>, long>& from) {
  for (const auto& [g, k] : from) into[g] += k;
}

std::map<Sentence, long> sentence_ngrams(const std::vector<Sentence>& sentences, int n) {
  std::map<Sentence, long> counts;
  for (const auto& s : sentences) add_counts(counts, ngram_counts<std::string>(s, n));
  return counts;
}

long total(const std::map<Sentence, long>& counts) {
  long n = 0;
  for (const auto& [g, k] : counts) n += k;
  return n;
}

}  // namespace

std::vector<std::string> rouge_tokenize(std::string_view text, bool stem) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    out.push_back(stem ? porter_stem(cur) : cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

std::vector<std::vector<std::string>> semicolon_sentences(std::string_view text, bool stem) {
  std::vector<Sentence> out;
  for (auto part : split_on(text, ';')) {
    auto toks = rouge_tokenize(part, stem);
    if (!toks.empty()) out.push_back(std::move(toks));
  }
  return out;
}

ExampleScores score_full(std::string_view candidate, std::string_view reference, bool stem) {
  const auto c = rouge_tokenize(candidate, stem);
  const auto r = rouge_tokenize(reference, stem);
  const std::span<const std::string> cs(c), rs(r);
  ExampleScores s;
  s.r1 = rouge_n(cs, rs, 1);
  s.r2 = rouge_n(cs, rs, 2);
  s.rl = rouge_l(cs, rs);
  s.reference_length = r.size();
  return s;
}

RecallTriple limited_length_recall(std::string_view candidate, std::string_view reference, bool stem) {
  const auto refs = semicolon_sentences(reference, stem);
  std::size_t budget = 0;
  for (const auto& s : refs) budget += s.size();
  RecallTriple out;
  if (budget == 0) return out;

  // Truncate the candidate to the reference length, keeping its own
  // sentence boundaries.
  std::vector<Sentence> cands;
  std::size_t used = 0;
  for (auto& s : semicolon_sentences(candidate, stem)) {
    if (used == budget) break;
    const std::size_t take = std::min(s.size(), budget - used);
    s.resize(take);
    used += take;
    cands.push_back(std::move(s));
  }

  for (int n : {1, 2}) {
    const auto rc = sentence_ngrams(refs, n);
    const long denom = total(rc);
    const double recall = denom > 0 ? static_cast<double>(clipped_overlap(sentence_ngrams(cands, n), rc)) /
                                          static_cast<double>(denom)
                                    : 0.0;
    (n == 1 ? out.r1 : out.r2) = recall;
  }

  std::size_t hits = 0;
  for (const auto& r : refs) {
    std::set<std::size_t> union_hits;
    for (const auto& c : cands) {
      for (std::size_t i : lcs_reference_hits<std::string>(r, c)) union_hits.insert(i);
    }
    hits += union_hits.size();
  }
  out.rl = static_cast<double>(hits) / static_cast<double>(budget);
  return out;
}

std::vector<BucketRow> length_bucket_report(std::span<const ScoredExample> examples,
                                            std::span<const std::size_t> edges) {
  if (edges.empty()) throw std::invalid_argument("length_bucket_report: no bucket edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw std::invalid_argument("length_bucket_report: edges must ascend");
  }
  std::vector<BucketRow> rows(edges.size());
  std::vector<double> s1(edges.size(), 0), s2(edges.size(), 0), sl(edges.size(), 0);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    rows[i].lower = edges[i];
    if (i + 1 < edges.size()) rows[i].upper = edges[i + 1];
  }
  for (const auto& ex : examples) {
    if (ex.reference_length < edges.front()) continue;
    std::size_t b = edges.size() - 1;
    while (ex.reference_length < edges[b]) --b;
    ++rows[b].count;
    s1[b] += ex.r1;
    s2[b] += ex.r2;
    sl[b] += ex.rl;
  }
  for (std::size_t b = 0; b < rows.size(); ++b) {
    if (rows[b].count == 0) continue;
    const auto n = static_cast<double>(rows[b].count);
    rows[b].r1 = s1[b] / n;
    rows[b].r2 = s2[b] / n;
    rows[b].rl = sl[b] / n;
  }
  return rows;
}

ExampleScores mean_scores(std::span<const ExampleScores> scores) {
  ExampleScores m;
  if (scores.empty()) return m;
  for (const auto& s : scores) {
    for (auto [dst, src] : {std::pair{&m.r1, &s.r1}, std::pair{&m.r2, &s.r2}, std::pair{&m.rl, &s.rl}}) {
      dst->precision += src->precision;
      dst->recall += src->recall;
      dst->f1 += src->f1;
    }
    m.reference_length += s.reference_length;
  }
  const auto n = static_cast<double>(scores.size());
  for (RougeScore* r : {&m.r1, &m.r2, &m.rl}) {
    r->precision /= n;
    r->recall /= n;
    r->f1 /= n;
  }
  m.reference_length /= scores.size();
  return m;
}

}  // namespace refsum
