// Subword vocabulary with "##" continuation pieces, greedy longest-match
// encoding, and the per-example extended vocabulary used for copying.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace refsum {

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kNumSpecials = 5;

inline bool is_special(TokenId id) { return id >= 0 && id < kNumSpecials; }

class Vocabulary {
 public:
  /// Specials only.
  Vocabulary();
  /// Tokens in id order; the first five must be the specials.
  explicit Vocabulary(std::vector<std::string> tokens);

  TokenId size() const { return static_cast<TokenId>(id_to_token_.size()); }
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  /// One token per line, line number = id.
  std::string to_text() const;
  static Vocabulary from_text(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  static const std::vector<std::string>& special_tokens();

 private:
  void add(std::string token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

struct TextOptions {
  bool lowercase = false;
};

/// Whitespace split after optional lowercasing.
std::vector<std::string> split_words(std::string_view text, const TextOptions& opts = {});
std::string normalize_whitespace(std::string_view text, const TextOptions& opts = {});

/// Frequency-ranked character units, then byte-pair style merges until the
/// vocabulary holds `target_size` entries or no pair is left.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t target_size,
                       const TextOptions& opts = {});

struct EncodedText {
  std::vector<TokenId> ids;
  /// Surface word at UNK positions, empty elsewhere.
  std::vector<std::optional<std::string>> oov_surface;
};

EncodedText encode(std::string_view text, const Vocabulary& vocab, const TextOptions& opts = {});

/// Source out-of-vocabulary words in first-occurrence order. The i-th
/// surface has extended id base + i, with base = vocabulary size.
class OovMap {
 public:
  OovMap() = default;
  explicit OovMap(TokenId base) : base_(base) {}

  TokenId base() const { return base_; }
  TokenId size() const { return static_cast<TokenId>(surfaces_.size()); }
  bool empty() const { return surfaces_.empty(); }
  TokenId extended_size() const { return base_ + size(); }

  TokenId insert(const std::string& surface);
  std::optional<TokenId> find(std::string_view surface) const;
  /// Throws std::out_of_range for ids without an entry.
  const std::string& surface(TokenId id) const;
  const std::vector<std::string>& surfaces() const { return surfaces_; }

 private:
  TokenId base_ = 0;
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Extended ids resolve through `oov`; specials are dropped and "##" pieces
/// are joined onto the preceding word.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab, const OovMap& oov = {});

struct TokenizedExample {
  std::string id;
  /// Source with UNK at out-of-vocabulary positions.
  std::vector<TokenId> source_ids;
  /// Same as source_ids except OOV positions carry their extended id.
  std::vector<TokenId> source_copy_ids;
  /// Summary tokens; OOV words that occur in the source carry extended ids.
  std::vector<TokenId> target_ids;
  OovMap oov;
  /// Untruncated reference summary text.
  std::string reference;
};

TokenizedExample make_example(std::string id, std::string_view article, std::string_view summary,
                              const Vocabulary& vocab, std::size_t max_source,
                              std::size_t max_target, const TextOptions& opts = {});

}  // namespace refsum
