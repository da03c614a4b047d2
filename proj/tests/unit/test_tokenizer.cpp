#include <doctest.h>

#include <filesystem>
#include <map>
#include <random>

#include "refsum/error.hpp"
#include "refsum/rng.hpp"
#include "refsum/tokenizer.hpp"

using namespace refsum;

namespace {

const std::vector<std::string> kCorpus = {
    "the cat sat on the mat", "the dog sat on the log", "a cat and a dog met on the mat",
    "cats and dogs are friends", "the mat was red and the log was brown"};

std::string random_text(std::mt19937_64& rng, const std::vector<std::string>& words, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    if (!out.empty()) out += (uniform01(rng) < 0.2 ? "   " : " ");
    out += words[uniform_index(rng, words.size())];
  }
  return out;
}

}  // namespace

TEST_CASE("specials take ids 0 to 4") {
  const Vocabulary v;
  CHECK(v.size() == 5);
  CHECK(v.token(kPad) == "[PAD]");
  CHECK(v.token(kUnk) == "[UNK]");
  CHECK(v.token(kCls) == "[CLS]");
  CHECK(v.token(kSep) == "[SEP]");
  CHECK(v.token(kMask) == "[MASK]");
}

TEST_CASE("build_vocab covers every corpus character") {
  const std::vector<std::string> corpus{"aaab", "aab"};
  const Vocabulary v = build_vocab(corpus, 10);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  CHECK(v.size() <= 10);
}

TEST_CASE("target size 6 keeps only the most frequent character") {
  const std::vector<std::string> corpus{"xyzzy zz", "zebra"};
  const Vocabulary v = build_vocab(corpus, 6);
  REQUIRE(v.size() == 6);
  // z: 5 occurrences, more than any other character
  CHECK(v.token(5) == "z");
}

TEST_CASE("build_vocab rejects empty input and tiny targets") {
  const std::vector<std::string> empty;
  CHECK_THROWS_AS(build_vocab(empty, 20), DataError);
  const std::vector<std::string> blank{"   ", ""};
  CHECK_THROWS_AS(build_vocab(blank, 20), DataError);
  CHECK_THROWS_AS(build_vocab(kCorpus, 5), std::invalid_argument);
}

TEST_CASE("build_vocab is deterministic and bounded") {
  const Vocabulary a = build_vocab(kCorpus, 40);
  const Vocabulary b = build_vocab(kCorpus, 40);
  CHECK(a.tokens() == b.tokens());
  CHECK(a.size() <= 40);
  for (TokenId id = kNumSpecials; id < a.size(); ++id) {
    CHECK(a.token(id).find(' ') == std::string::npos);
    CHECK_FALSE(a.token(id).empty());
  }
}

TEST_CASE("token and id maps are inverse") {
  const Vocabulary v = build_vocab(kCorpus, 60);
  for (TokenId id = 0; id < v.size(); ++id) CHECK(v.find(v.token(id)) == id);
}

TEST_CASE("round trip reproduces whitespace-normalized text") {
  const Vocabulary v = build_vocab(kCorpus, 50);
  std::vector<std::string> words;
  for (const auto& line : kCorpus) {
    for (const auto& w : split_words(line)) words.push_back(w);
  }
  words.push_back("tac");  // in-alphabet but unseen as a word
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::string text = random_text(rng, words, 1 + static_cast<int>(uniform_index(rng, 8)));
    const EncodedText enc = encode(text, v);
    CHECK(decode(enc.ids, v) == normalize_whitespace(text));
  }
}

TEST_CASE("encode of the empty string is empty") { CHECK(encode("", build_vocab(kCorpus, 30)).ids.empty()); }

TEST_CASE("unknown characters become UNK with the surface recorded") {
  const Vocabulary v = build_vocab(kCorpus, 30);
  const EncodedText enc = encode("the qqq cat", v);
  const auto unk = std::find(enc.ids.begin(), enc.ids.end(), kUnk);
  REQUIRE(unk != enc.ids.end());
  const auto pos = static_cast<std::size_t>(unk - enc.ids.begin());
  CHECK(enc.oov_surface[pos] == "qqq");
  CHECK(std::count(enc.ids.begin(), enc.ids.end(), kUnk) == 1);
}

TEST_CASE("encoding concatenates over whitespace") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  std::vector<std::string> words{"the", "cat", "mats", "xq", "dogs", "a", "frien"};
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::string a = random_text(rng, words, 1 + static_cast<int>(uniform_index(rng, 4)));
    const std::string b = random_text(rng, words, 1 + static_cast<int>(uniform_index(rng, 4)));
    auto ea = encode(a, v).ids;
    const auto eb = encode(b, v).ids;
    ea.insert(ea.end(), eb.begin(), eb.end());
    CHECK(ea == encode(a + " " + b, v).ids);
  }
}

TEST_CASE("encoded text never contains model-only specials") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  const auto ids = encode("the [MASK] cat [CLS] sat", v).ids;
  CHECK(std::find(ids.begin(), ids.end(), kMask) == ids.end());
  CHECK(std::find(ids.begin(), ids.end(), kCls) == ids.end());
}

TEST_CASE("decode drops specials and resolves extended ids") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  const std::vector<TokenId> pad_only{kPad};
  CHECK(decode(pad_only, v).empty());
  CHECK(decode(encode("the cat", v).ids, v) == "the cat");

  OovMap oov(v.size());
  CHECK(oov.insert("zyzzyva") == v.size());
  const std::vector<TokenId> ext{v.size()};
  CHECK(decode(ext, v, oov) == "zyzzyva");
  const std::vector<TokenId> missing{v.size() + 1};
  CHECK_THROWS(decode(missing, v, oov));
  CHECK_THROWS(decode(ext, v));
}

TEST_CASE("oov map assigns contiguous ids in first-occurrence order") {
  OovMap oov(100);
  CHECK(oov.insert("b") == 100);
  CHECK(oov.insert("a") == 101);
  CHECK(oov.insert("b") == 100);
  CHECK(oov.extended_size() == 102);
  CHECK(oov.surface(101) == "a");
  CHECK_THROWS_AS(oov.surface(99), std::out_of_range);
}

TEST_CASE("make_example links target OOVs to source copies") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  const TokenizedExample ex = make_example("e1", "the zork met the qux cat", "zork and blorp", v, 64, 16);
  CHECK(ex.oov.size() == 2);
  for (TokenId id : ex.source_ids) CHECK(id < v.size());
  CHECK(ex.source_ids.size() == ex.source_copy_ids.size());
  const auto zork = ex.oov.find("zork");
  REQUIRE(zork.has_value());
  CHECK(ex.target_ids.front() == *zork);
  CHECK(ex.target_ids.back() == kUnk);  // blorp is not in the source
  for (TokenId id : ex.target_ids) CHECK((id < v.size() || ex.oov.find(ex.oov.surface(id)).has_value()));
  CHECK(decode(ex.target_ids, v, ex.oov).starts_with("zork and"));
}

TEST_CASE("make_example truncates both sides") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  std::string article;
  for (int i = 0; i < 600; ++i) article += "cat ";
  const TokenizedExample ex = make_example("e", article, article, v, 512, 100);
  CHECK(ex.source_ids.size() == 512);
  CHECK(ex.target_ids.size() == 100);
}

TEST_CASE("vocabulary file round trip is byte exact") {
  const Vocabulary v = build_vocab(kCorpus, 45);
  const auto path = std::filesystem::temp_directory_path() / "refsum_vocab_test.txt";
  v.save(path);
  const Vocabulary back = Vocabulary::load(path);
  CHECK(back.tokens() == v.tokens());
  CHECK(back.to_text() == v.to_text());
  std::filesystem::remove(path);
}

TEST_CASE("vocabulary rejects files without the specials") {
  CHECK_THROWS_AS(Vocabulary::from_text("a\nb\n"), DataError);
  CHECK_THROWS_AS(Vocabulary(std::vector<std::string>{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "a"}),
                  DataError);
}
