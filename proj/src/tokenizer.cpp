#include "refsum/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "refsum/error.hpp"
#include "refsum/io.hpp"

namespace refsum {

namespace {

constexpr std::string_view kContinuation = "##";

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

/// Byte offsets of code point boundaries, including 0 and word.size().
std::vector<std::size_t> char_boundaries(std::string_view word) {
  std::vector<std::size_t> cuts{0};
  std::size_t i = 0;
  while (i < word.size()) {
    i = std::min(word.size(), i + utf8_length(static_cast<unsigned char>(word[i])));
    cuts.push_back(i);
  }
  return cuts;
}

bool is_continuation(std::string_view piece) {
  return piece.size() > kContinuation.size() && piece.starts_with(kContinuation);
}

std::string merge_pieces(const std::string& left, const std::string& right) {
  return left + (is_continuation(right) ? right.substr(kContinuation.size()) : right);
}

}  // namespace

// ------------------------------------------------------------ Vocabulary

const std::vector<std::string>& Vocabulary::special_tokens() {
  static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return specials;
}

Vocabulary::Vocabulary() {
  for (const auto& s : special_tokens()) add(s);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) {
  const auto& specials = special_tokens();
  if (tokens.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw DataError("vocabulary must start with the five special tokens");
  }
  for (auto& t : tokens) {
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw DataError("vocabulary token is empty or contains whitespace");
    }
    if (token_to_id_.contains(t)) throw DataError("duplicate vocabulary token: " + t);
    add(std::move(t));
  }
}

void Vocabulary::add(std::string token) {
  token_to_id_.emplace(token, static_cast<TokenId>(id_to_token_.size()));
  id_to_token_.push_back(std::move(token));
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id outside vocabulary");
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (const auto& t : id_to_token_) {
    out += t;
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) tokens.emplace_back(line);
    start = end + 1;
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

Vocabulary Vocabulary::load(const std::filesystem::path& path) { return from_text(read_file(path)); }

// --------------------------------------------------------- normalization

std::vector<std::string> split_words(std::string_view text, const TextOptions& opts) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current += opts.lowercase ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : c;
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::string normalize_whitespace(std::string_view text, const TextOptions& opts) {
  std::string out;
  for (const auto& w : split_words(text, opts)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

// -------------------------------------------------------------- building

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size,
                       const TextOptions& opts) {
  if (target_size < 6) throw std::invalid_argument("build_vocab: target_size must be at least 6");
  std::map<std::string, long> word_counts;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text, opts)) ++word_counts[std::move(w)];
  }
  if (word_counts.empty()) throw DataError("build_vocab: empty corpus");

  std::map<std::string, long> char_counts;
  for (const auto& [word, count] : word_counts) {
    const auto cuts = char_boundaries(word);
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      char_counts[word.substr(cuts[i], cuts[i + 1] - cuts[i])] += count;
    }
  }
  std::vector<std::pair<std::string, long>> ranked(char_counts.begin(), char_counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens = Vocabulary::special_tokens();
  std::map<std::string, bool> present;
  for (const auto& t : tokens) present[t] = true;
  auto add_token = [&](const std::string& t) {
    if (tokens.size() >= target_size || present.contains(t)) return;
    present[t] = true;
    tokens.push_back(t);
  };
  for (const auto& [c, count] : ranked) {
    add_token(c);
    add_token(std::string(kContinuation) + c);
  }

  // Words as piece sequences; words with an unrepresentable character
  // cannot take part in merges.
  std::vector<std::pair<std::vector<std::string>, long>> segmented;
  for (const auto& [word, count] : word_counts) {
    const auto cuts = char_boundaries(word);
    std::vector<std::string> pieces;
    bool ok = true;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
      std::string piece = (i == 0 ? "" : std::string(kContinuation)) +
                          word.substr(cuts[i], cuts[i + 1] - cuts[i]);
      ok = ok && present.contains(piece);
      pieces.push_back(std::move(piece));
    }
    if (ok && pieces.size() > 1) segmented.emplace_back(std::move(pieces), count);
  }

  while (tokens.size() < target_size) {
    std::map<std::pair<std::string, std::string>, long> pair_counts;
    for (const auto& [pieces, count] : segmented) {
      for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pair_counts[{pieces[i], pieces[i + 1]}] += count;
    }
    if (pair_counts.empty()) break;
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    const std::string merged = merge_pieces(left, right);
    for (auto& [pieces, count] : segmented) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i + 1 < pieces.size() && pieces[i] == left && pieces[i + 1] == right) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(pieces[i]);
        }
      }
      pieces = std::move(next);
    }
    std::erase_if(segmented, [](const auto& w) { return w.first.size() < 2; });
    add_token(merged);
  }
  return Vocabulary(std::move(tokens));
}

// ------------------------------------------------------ encode / decode

EncodedText encode(std::string_view text, const Vocabulary& vocab, const TextOptions& opts) {
  EncodedText out;
  for (const auto& word : split_words(text, opts)) {
    const auto cuts = char_boundaries(word);
    std::vector<TokenId> pieces;
    std::size_t at = 0;
    bool ok = true;
    while (at + 1 < cuts.size()) {
      bool found = false;
      for (std::size_t end = cuts.size() - 1; end > at; --end) {
        std::string piece = (at == 0 ? "" : std::string(kContinuation)) +
                            word.substr(cuts[at], cuts[end] - cuts[at]);
        if (auto id = vocab.find(piece); id && !is_special(*id)) {
          pieces.push_back(*id);
          at = end;
          found = true;
          break;
        }
      }
      if (!found) {
        ok = false;
        break;
      }
    }
    if (ok) {
      for (TokenId id : pieces) {
        out.ids.push_back(id);
        out.oov_surface.emplace_back();
      }
    } else {
      out.ids.push_back(kUnk);
      out.oov_surface.emplace_back(word);
    }
  }
  return out;
}

TokenId OovMap::insert(const std::string& surface) {
  if (auto it = index_.find(surface); it != index_.end()) return it->second;
  const TokenId id = base_ + size();
  surfaces_.push_back(surface);
  index_.emplace(surface, id);
  return id;
}

std::optional<TokenId> OovMap::find(std::string_view surface) const {
  auto it = index_.find(std::string(surface));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& OovMap::surface(TokenId id) const {
  if (id < base_ || id >= extended_size()) {
    throw std::out_of_range("extended id " + std::to_string(id) + " has no oov entry");
  }
  return surfaces_[static_cast<std::size_t>(id - base_)];
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov) {
  std::string out;
  auto append_word = [&out](std::string_view w) {
    if (!out.empty()) out += ' ';
    out += w;
  };
  for (TokenId id : ids) {
    if (id >= vocab.size()) {
      if (oov.empty() || oov.base() != vocab.size()) {
        throw std::out_of_range("extended id " + std::to_string(id) + " has no oov entry");
      }
      append_word(oov.surface(id));
      continue;
    }
    if (id < 0) throw std::out_of_range("negative token id");
    if (is_special(id)) continue;
    const std::string& piece = vocab.token(id);
    if (is_continuation(piece)) {
      out += piece.substr(kContinuation.size());
    } else {
      append_word(piece);
    }
  }
  return out;
}

TokenizedExample make_example(std::string id, std::string_view article, std::string_view summary,
                              const Vocabulary& vocab, std::size_t max_source,
                              std::size_t max_target, const TextOptions& opts) {
  TokenizedExample ex;
  ex.id = std::move(id);
  ex.reference = normalize_whitespace(summary, opts);
  ex.oov = OovMap(vocab.size());

  EncodedText src = encode(article, vocab, opts);
  const std::size_t m = std::min(src.ids.size(), max_source);
  for (std::size_t i = 0; i < m; ++i) {
    ex.source_ids.push_back(src.ids[i]);
    if (src.oov_surface[i]) {
      ex.source_copy_ids.push_back(ex.oov.insert(*src.oov_surface[i]));
    } else {
      ex.source_copy_ids.push_back(src.ids[i]);
    }
  }

  EncodedText tgt = encode(summary, vocab, opts);
  const std::size_t n = std::min(tgt.ids.size(), max_target);
  for (std::size_t i = 0; i < n; ++i) {
    TokenId t = tgt.ids[i];
    if (tgt.oov_surface[i]) {
      if (auto ext = ex.oov.find(*tgt.oov_surface[i])) t = *ext;
    }
    ex.target_ids.push_back(t);
  }
  return ex;
}

}  // namespace refsum
