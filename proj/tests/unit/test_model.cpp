#include <doctest.h>

#include <cmath>
#include <set>

#include "refsum/model.hpp"
#include "refsum/objectives.hpp"
#include "support.hpp"

using namespace refsum;
using namespace refsum::testing;

namespace {

// Straight-line multi-head attention: per pair scores, explicit softmax,
// residual plus output projection.
Matrix naive_attention(const AttentionParams& p, int heads, const Matrix& x, const Matrix& keys, const Mask& allowed) {
  const Index n = x.rows(), m = keys.rows(), d = x.cols(), hd = d / heads;
  const Matrix q = x * p.query.value, k = keys * p.key.value, v = keys * p.value.value;
  Matrix mixed = Matrix::Zero(n, d);
  for (int h = 0; h < heads; ++h) {
    for (Index i = 0; i < n; ++i) {
      std::vector<double> a(static_cast<std::size_t>(m));
      double top = -1e300;
      for (Index j = 0; j < m; ++j) {
        double s = 0;
        for (Index c = 0; c < hd; ++c) s += q(i, h * hd + c) * k(j, h * hd + c);
        a[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(d));
        if (allowed(i, j)) top = std::max(top, a[static_cast<std::size_t>(j)]);
      }
      double z = 0;
      for (Index j = 0; j < m; ++j) z += allowed(i, j) ? std::exp(a[static_cast<std::size_t>(j)] - top) : 0.0;
      for (Index j = 0; j < m; ++j) {
        if (!allowed(i, j)) continue;
        const double w = std::exp(a[static_cast<std::size_t>(j)] - top) / z;
        for (Index c = 0; c < hd; ++c) mixed(i, h * hd + c) += w * v(j, h * hd + c);
      }
    }
  }
  return x + mixed * p.output.value;
}

Matrix encode_value(ModelParams& params, const std::vector<TokenId>& src, const std::vector<TokenId>& copy = {},
                    int oov = 0) {
  Tape tape;
  return encode_document(tape, params, src, copy, oov).states.value();
}

Matrix draft_step_value(ModelParams& params, const RandomSource& s, const std::vector<TokenId>& prev) {
  Tape tape;
  const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
  return decode_draft_step(tape, params, prev, enc).value();
}

Matrix refine_value(ModelParams& params, const RandomSource& s, const std::vector<TokenId>& draft, std::size_t pos) {
  Tape tape;
  const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
  return refine_step(tape, params, encode_masked_draft(tape, params, draft, pos), enc, pos).value();
}

void check_distribution(const Matrix& p, Index support) {
  CHECK(p.cols() == support);
  CHECK((p.array() >= 0).all());
  for (Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) < 1e-9);
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.max_target_len = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config(3);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("zero value projection makes attention a passthrough") {
  auto params = init_params(tiny_config(), 1);
  auto& att = params.encoder[0].attention;
  att.value.value.setZero();
  std::mt19937_64 rng(2);
  const Matrix h = random_matrix(rng, 5, 8);
  Tape tape;
  const Node x = tape.constant(h);
  CHECK(attention_sublayer(tape, att, 2, x, x, full_mask(5, 5)).value() == h);
}

TEST_CASE("a single key gets attention weight one") {
  auto params = init_params(tiny_config(), 3);
  auto& att = params.encoder[0].attention;
  std::mt19937_64 rng(4);
  const Matrix h = random_matrix(rng, 1, 8);
  Tape tape;
  const Node x = tape.constant(h);
  const Matrix got = attention_sublayer(tape, att, 2, x, x, full_mask(1, 1)).value();
  const Matrix want = h + h * att.value.value * att.output.value;
  CHECK(max_abs_diff(got, want) < 1e-14);
}

TEST_CASE("attention matches a per-pair loop") {
  auto params = init_params(tiny_config(), 5);
  std::mt19937_64 rng(6);
  for (int heads : {1, 2, 4}) {
    auto& att = params.decoder[1].cross_attention;
    const Matrix h = random_matrix(rng, 2, 8);
    Tape tape;
    const Node x = tape.constant(h);
    CHECK(max_abs_diff(attention_sublayer(tape, att, heads, x, x, full_mask(2, 2)).value(),
                       naive_attention(att, heads, h, h, full_mask(2, 2))) < 1e-10);

    const Matrix keys = random_matrix(rng, 6, 8);
    Mask allowed = full_mask(2, 6);
    allowed(0, 3) = false;
    allowed(1, 0) = false;
    allowed(1, 5) = false;
    const Node k = tape.constant(keys);
    CHECK(max_abs_diff(attention_sublayer(tape, att, heads, x, k, allowed).value(),
                       naive_attention(att, heads, h, keys, allowed)) < 1e-10);
  }
}

TEST_CASE("a query with no allowed key is rejected") {
  auto params = init_params(tiny_config(), 5);
  Tape tape;
  const Node x = tape.constant(Matrix::Ones(3, 8));
  Mask allowed = full_mask(3, 3);
  allowed.row(1).setConstant(false);
  CHECK_THROWS_AS(attention_sublayer(tape, params.encoder[0].attention, 2, x, x, allowed), std::invalid_argument);
  CHECK_THROWS_AS(attention_sublayer(tape, params.encoder[0].attention, 2, x, x, full_mask(2, 3)),
                  std::invalid_argument);
}

TEST_CASE("encoder output has one row per source token") {
  auto params = init_params(tiny_config(), 7);
  std::mt19937_64 rng(8);
  const Matrix h = encode_value(params, random_ids(rng, 7, 30));
  CHECK(h.rows() == 7);
  CHECK(h.cols() == 8);
  CHECK(h.allFinite());
  Tape tape;
  const std::vector<TokenId> empty;
  CHECK_THROWS_AS(encode_document(tape, params, empty), std::invalid_argument);
  const std::vector<TokenId> pads{kPad, kPad};
  CHECK_THROWS_AS(encode_document(tape, params, pads), std::invalid_argument);
  CHECK_THROWS_AS(encode_document(tape, params, random_ids(rng, 13, 30)), std::invalid_argument);
}

TEST_CASE("trailing padding leaves real encoder rows unchanged") {
  auto params = init_params(tiny_config(), 9);
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto src = random_ids(rng, 1 + uniform_index(rng, 7), 30);
    const Matrix plain = encode_value(params, src);
    const std::size_t n = src.size();
    src.insert(src.end(), 1 + uniform_index(rng, 4), kPad);
    const Matrix padded = encode_value(params, src);
    CHECK(max_abs_diff(padded.topRows(static_cast<Index>(n)), plain) < 1e-10);
  }
}

TEST_CASE("encoder is sensitive to token order") {
  auto params = init_params(tiny_config(), 11);
  const std::vector<TokenId> a{6, 7, 8, 9}, b{7, 6, 8, 9};
  const Matrix ha = encode_value(params, a), hb = encode_value(params, b);
  CHECK(max_abs_diff(ha.row(0), hb.row(1)) > 1e-6);
  CHECK(max_abs_diff(ha, hb) > 1e-6);
}

TEST_CASE("draft step distributions are normalized over the extended support") {
  auto params = init_params(tiny_config(), 12);
  std::mt19937_64 rng(13);
  for (int oov : {0, 1, 3}) {
    const auto s = random_source(rng, 6, 30, oov);
    for (std::size_t t = 0; t < 5; ++t) {
      auto prev = random_ids(rng, t, 30);
      if (oov > 0 && t > 0) prev[0] = 30;  // a copied extended id embeds as UNK
      check_distribution(draft_step_value(params, s, prev), 30 + oov);
    }
  }
}

TEST_CASE("extended ids in the prefix embed as UNK") {
  auto params = init_params(tiny_config(), 14);
  std::mt19937_64 rng(15);
  const auto s = random_source(rng, 6, 30, 2);
  const std::vector<TokenId> ext{7, 31}, unk{7, kUnk};
  CHECK(draft_step_value(params, s, ext) == draft_step_value(params, s, unk));
}

TEST_CASE("draft decoding is causal") {
  auto params = init_params(tiny_config(), 16);
  std::mt19937_64 rng(17);
  const auto s = random_source(rng, 8, 30, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t len = 1 + uniform_index(rng, 8);
    auto seq = random_ids(rng, len, 30);
    Matrix base;
    {
      Tape tape;
      const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
      base = draft_distributions(tape, params, seq, enc).value();
    }
    for (std::size_t k = 0; k < len; ++k) {
      auto changed = seq;
      changed[k] = 5 + (changed[k] - 5 + 1 + static_cast<TokenId>(uniform_index(rng, 24))) % 25;
      Tape tape;
      const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
      const Matrix after = draft_distributions(tape, params, changed, enc).value();
      // row t sees inputs [0, t); rows up to k are untouched
      CHECK(max_abs_diff(after.topRows(static_cast<Index>(k + 1)), base.topRows(static_cast<Index>(k + 1))) == 0.0);
      CHECK(max_abs_diff(after.row(static_cast<Index>(k + 1)), base.row(static_cast<Index>(k + 1))) > 0.0);
    }
  }
}

TEST_CASE("teacher-forced rows agree with step-by-step decoding") {
  auto params = init_params(tiny_config(), 18);
  std::mt19937_64 rng(19);
  const auto s = random_source(rng, 6, 30, 1);
  const auto seq = random_ids(rng, 5, 30);
  Tape tape;
  const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
  const Matrix all = draft_distributions(tape, params, seq, enc).value();
  for (std::size_t t = 0; t <= seq.size(); ++t) {
    const std::vector<TokenId> prev(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
    CHECK(max_abs_diff(all.row(static_cast<Index>(t)), draft_step_value(params, s, prev)) < 1e-12);
  }
}

TEST_CASE("copy gate extremes") {
  auto params = init_params(tiny_config(), 20);
  std::mt19937_64 rng(21);
  const auto s = random_source(rng, 5, 30, 2);
  Tape tape;
  const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
  const Node states = tape.constant(random_matrix(rng, 3, 8));
  const Node pv = vocab_distribution(tape, params, states);
  const Matrix off = copy_distribution(tape, params, states, enc, pv, 0.0).value();
  CHECK(off.leftCols(30) == pv.value());
  CHECK(off.rightCols(2).isZero(0.0));

  const std::vector<TokenId> one{17, kPad, kPad};
  const auto single = encode_document(tape, params, one);
  const Matrix on = copy_distribution(tape, params, states, single, pv, 1.0).value();
  for (Index i = 0; i < 3; ++i) {
    for (Index j = 0; j < 30; ++j) CHECK(on(i, j) == (j == 17 ? 1.0 : 0.0));
  }

  check_distribution(copy_distribution(tape, params, states, enc, pv).value(), 32);
}

TEST_CASE("copy mass lands on extended ids") {
  auto params = init_params(tiny_config(), 22);
  const std::vector<TokenId> ids{kUnk, 9, kUnk}, copy{30, 9, 31};
  Tape tape;
  const auto enc = encode_document(tape, params, ids, copy, 2);
  const Node states = tape.constant(Matrix::Ones(1, 8));
  const Node pv = vocab_distribution(tape, params, states);
  const Matrix p = copy_distribution(tape, params, states, enc, pv, 1.0).value();
  CHECK(p(0, kUnk) == 0.0);
  CHECK(p(0, 30) > 0.0);
  CHECK(p(0, 31) > 0.0);
  CHECK(std::abs(p.sum() - 1.0) < 1e-12);
}

TEST_CASE("masked draft reading ignores the masked token") {
  auto params = init_params(tiny_config(), 23);
  std::mt19937_64 rng(24);
  for (std::size_t len = 1; len <= 8; ++len) {
    const auto draft = random_ids(rng, len, 30);
    for (std::size_t pos = 0; pos < len; ++pos) {
      auto other = draft;
      other[pos] = draft[pos] == 9 ? 10 : 9;
      Tape tape;
      const Matrix a = encode_masked_draft(tape, params, draft, pos).value();
      const Matrix b = encode_masked_draft(tape, params, other, pos).value();
      CHECK(a.rows() == static_cast<Index>(len));
      CHECK(a.cols() == 8);
      CHECK(max_abs_diff(a, b) <= 1e-12);
    }
  }
}

TEST_CASE("a one-token draft reads as a lone MASK") {
  auto params = init_params(tiny_config(), 25);
  const std::vector<TokenId> a{11}, mask{kMask};
  Tape tape;
  const Matrix got = encode_masked_draft(tape, params, a, 0).value();
  const std::vector<TokenId> framed{kCls, kMask, kSep};
  CHECK(max_abs_diff(got, encoder_stack(tape, params, framed).value().row(1)) == 0.0);
  CHECK_THROWS_AS(encode_masked_draft(tape, params, a, 1), std::out_of_range);
}

TEST_CASE("refine step is normalized and reads both sides and the source") {
  auto params = init_params(tiny_config(), 26);
  std::mt19937_64 rng(27);
  const auto s = random_source(rng, 6, 30, 1);
  const auto draft = random_ids(rng, 5, 30);
  for (std::size_t pos = 0; pos < draft.size(); ++pos) check_distribution(refine_value(params, s, draft, pos), 31);

  const std::size_t pos = 2;
  const Matrix base = refine_value(params, s, draft, pos);
  auto right = draft;
  right[pos + 1] = draft[pos + 1] == 12 ? 13 : 12;
  CHECK(max_abs_diff(base, refine_value(params, s, right, pos)) > 1e-9);
  auto left = draft;
  left[pos - 1] = draft[pos - 1] == 12 ? 13 : 12;
  CHECK(max_abs_diff(base, refine_value(params, s, left, pos)) > 1e-9);
  auto src = s;
  src.ids[3] = src.copy[3] = src.ids[3] == 14 ? 15 : 14;
  CHECK(max_abs_diff(base, refine_value(params, src, draft, pos)) > 1e-9);
}

TEST_CASE("refine distributions stack one row per position") {
  auto params = init_params(tiny_config(), 28);
  std::mt19937_64 rng(29);
  const auto s = random_source(rng, 6, 30, 0);
  const auto draft = random_ids(rng, 4, 30);
  Tape tape;
  const auto enc = encode_document(tape, params, s.ids);
  const Matrix all = refine_distributions(tape, params, draft, enc).value();
  REQUIRE(all.rows() == 4);
  for (std::size_t pos = 0; pos < 4; ++pos) {
    CHECK(max_abs_diff(all.row(static_cast<Index>(pos)), refine_value(params, s, draft, pos)) < 1e-12);
  }
}

TEST_CASE("both stages read the single decoder weight set") {
  auto params = init_params(tiny_config(), 30);
  std::mt19937_64 rng(31);
  const auto s = random_source(rng, 6, 30, 0);
  const auto draft = random_ids(rng, 4, 30);
  const std::vector<TokenId> prev(draft.begin(), draft.begin() + 2);
  const Matrix d0 = draft_step_value(params, s, prev), r0 = refine_value(params, s, draft, 1);
  params.decoder[0].ffn.w1.value(0, 0) += 0.5;
  CHECK(max_abs_diff(d0, draft_step_value(params, s, prev)) > 1e-9);
  CHECK(max_abs_diff(r0, refine_value(params, s, draft, 1)) > 1e-9);
  params.copy.bilinear.value(1, 1) += 0.5;
  const Matrix d1 = draft_step_value(params, s, prev), r1 = refine_value(params, s, draft, 1);
  params.copy.gate_bias.value(0, 0) += 0.5;
  CHECK(max_abs_diff(d1, draft_step_value(params, s, prev)) > 1e-9);
  CHECK(max_abs_diff(r1, refine_value(params, s, draft, 1)) > 1e-9);
}

TEST_CASE("parameter names and counts are stable") {
  const auto a = init_params(tiny_config(), 1), b = init_params(tiny_config(), 1), c = init_params(tiny_config(), 2);
  std::vector<std::string> names;
  a.for_each([&](const std::string& n, const Param&) { names.push_back(n); });
  CHECK(names.front() == "embedding.token");
  CHECK(names.back() == "copy.gate_bias");
  CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
  CHECK(a.count() == b.count());
  CHECK(a.token_embedding.value == b.token_embedding.value);
  CHECK(a.token_embedding.value != c.token_embedding.value);
  ModelParams copy = a;
  CHECK(copy.encoder_side().size() < copy.all().size());
}

TEST_CASE("full model gradient matches finite differences") {
  ModelConfig cfg = tiny_config(20, 8, 2, 2);
  auto params = init_params(cfg, 32);
  std::mt19937_64 rng(33);
  const auto s = random_source(rng, 4, 20, 1);
  const std::vector<TokenId> gold{7, 20, 11};
  auto loss = [&](Tape& tape) {
    const auto enc = encode_document(tape, params, s.ids, s.copy, s.num_oov);
    std::vector<TokenId> target = gold;
    target.push_back(kPad);
    const Node dec = mle_loss(tape, draft_distributions(tape, params, gold, enc), target, 20, 0.1);
    const std::vector<TokenId> one{gold[1]};
    const Node ref = refine_loss(tape, refine_step(tape, params, encode_masked_draft(tape, params, gold, 1), enc, 1),
                                 one, 20, 0.1);
    return joint_loss(dec, ref);
  };
  const auto all = params.all();
  CHECK(grad_check<double>(loss, all, 1e-5) < 1e-3);
}
