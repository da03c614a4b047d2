#include "refsum/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace refsum {

namespace {

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

AttentionParams make_attention(int d) {
  return {Param(d, d), Param(d, d), Param(d, d), Param(d, d)};
}

LayerNormParams make_norm(int d) { return {Param(1, d), Param(1, d)}; }

FeedForwardParams make_ffn(int d, int f) {
  return {Param(d, f), Param(1, f), Param(f, d), Param(1, d)};
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Node feed_forward(Tape& tape, FeedForwardParams& p, const Node& x) {
  Node hidden = gelu(add(matmul(x, tape.param(p.w1)), tape.param(p.b1)));
  return add(matmul(hidden, tape.param(p.w2)), tape.param(p.b2));
}

Node norm(Tape& tape, LayerNormParams& p, const Node& x) {
  return layer_norm(x, tape.param(p.gain), tape.param(p.bias));
}

Node drop(const Node& x, double rate) { return dropout(x, static_cast<Real>(rate)); }

std::vector<TokenId> frame(std::span<const TokenId> ids) {
  std::vector<TokenId> framed;
  framed.reserve(ids.size() + 2);
  framed.push_back(kCls);
  framed.insert(framed.end(), ids.begin(), ids.end());
  framed.push_back(kSep);
  return framed;
}

}  // namespace

// ----------------------------------------------------------- config

void ModelConfig::validate() const {
  if (model_dim <= 0 || num_heads <= 0 || model_dim % num_heads != 0) {
    throw std::invalid_argument("model_dim must be a positive multiple of num_heads");
  }
  if (encoder_layers < 1 || decoder_layers < 1) throw std::invalid_argument("layer counts must be >= 1");
  if (ffn_dim < 1) throw std::invalid_argument("ffn_dim must be >= 1");
  if (vocab_size < kNumSpecials) throw std::invalid_argument("vocab_size must cover the specials");
  if (max_source_len < 1 || max_target_len < 1) throw std::invalid_argument("max lengths must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must be in [0, 1)");
}

int ModelConfig::max_positions() const { return std::max(max_source_len, max_target_len + 1) + 2; }

// ----------------------------------------------------------- params

ModelParams::ModelParams(const ModelConfig& cfg) : config(cfg) {
  cfg.validate();
  const int d = cfg.model_dim;
  token_embedding = Param(cfg.vocab_size, d);
  position_embedding = Param(cfg.max_positions(), d);
  embedding_norm = make_norm(d);
  output_bias = Param(1, cfg.vocab_size);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    encoder.push_back({make_attention(d), make_norm(d), make_ffn(d, cfg.ffn_dim), make_norm(d)});
  }
  for (int l = 0; l < cfg.decoder_layers; ++l) {
    decoder.push_back({make_attention(d), make_norm(d), make_attention(d), make_norm(d),
                       make_ffn(d, cfg.ffn_dim), make_norm(d)});
  }
  copy = {Param(d, d), Param(1, 2 * d), Param(1, 1)};
}

std::vector<Param*> ModelParams::all() {
  std::vector<Param*> out;
  for_each([&out](const std::string&, Param& p) { out.push_back(&p); });
  return out;
}

std::vector<Param*> ModelParams::encoder_side() {
  std::vector<Param*> out{&token_embedding, &position_embedding, &embedding_norm.gain,
                          &embedding_norm.bias, &output_bias};
  for (auto& layer : encoder) {
    for (Param* p : {&layer.attention.query, &layer.attention.key, &layer.attention.value,
                     &layer.attention.output, &layer.attention_norm.gain, &layer.attention_norm.bias,
                     &layer.ffn.w1, &layer.ffn.b1, &layer.ffn.w2, &layer.ffn.b2,
                     &layer.ffn_norm.gain, &layer.ffn_norm.bias}) {
      out.push_back(p);
    }
  }
  return out;
}

void ModelParams::zero_grad() {
  for_each([](const std::string&, Param& p) { p.zero_grad(); });
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for_each([&n](const std::string&, const Param& p) { n += static_cast<std::size_t>(p.size()); });
  return n;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams params(config);
  std::mt19937_64 rng(seed);
  params.for_each([&rng](const std::string& name, Param& p) {
    if (ends_with(name, ".gain")) {
      p.value.setOnes();
    } else if (ends_with(name, ".bias") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
      p.value.setZero();
    } else {
      const Real bound = std::sqrt(6.0 / static_cast<Real>(p.value.rows() + p.value.cols()));
      for (Index i = 0; i < p.value.size(); ++i) {
        p.value.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
      }
    }
    p.zero_grad();
  });
  return params;
}

// ----------------------------------------------------------- masks

Mask causal_mask(Index n) {
  Mask m(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) m(i, j) = j <= i;
  }
  return m;
}

Mask full_mask(Index rows, Index cols) { return Mask::Constant(rows, cols, true); }

// ----------------------------------------------------------- layers

Node attention_sublayer(Tape& tape, AttentionParams& p, int num_heads, const Node& queries,
                        const Node& keys, const Mask& allowed, double dropout_rate) {
  const Index n = queries.rows();
  const Index m = keys.rows();
  if (allowed.rows() != n || allowed.cols() != m) throw std::invalid_argument("attention mask shape mismatch");
  for (Index i = 0; i < n; ++i) {
    if (!allowed.row(i).any()) throw std::invalid_argument("attention mask disallows every key for a query");
  }
  const Index d = queries.cols();
  const Index head_dim = d / num_heads;
  const Real inv_scale = 1.0 / std::sqrt(static_cast<Real>(d));
  const Mask blocked = !allowed;

  Node q = matmul(queries, tape.param(p.query));
  Node k = matmul(keys, tape.param(p.key));
  Node v = matmul(keys, tape.param(p.value));
  std::vector<Node> heads;
  heads.reserve(static_cast<std::size_t>(num_heads));
  for (int h = 0; h < num_heads; ++h) {
    const Index c = h * head_dim;
    Node scores = scale(matmul_nt(slice_cols(q, c, head_dim), slice_cols(k, c, head_dim)), inv_scale);
    if (blocked.any()) scores = masked_fill(scores, blocked, kNegInf);
    heads.push_back(matmul(softmax(scores, 1), slice_cols(v, c, head_dim)));
  }
  Node mixed = num_heads == 1 ? heads.front() : concat_cols<Real>(heads);
  return add(queries, drop(matmul(mixed, tape.param(p.output)), dropout_rate));
}

Node self_attention_layer(Tape& tape, EncoderLayerParams& p, int num_heads, const Node& h,
                          const Mask& allowed, double dropout_rate) {
  Node z = norm(tape, p.attention_norm, attention_sublayer(tape, p.attention, num_heads, h, h, allowed, dropout_rate));
  return norm(tape, p.ffn_norm, add(z, drop(feed_forward(tape, p.ffn, z), dropout_rate)));
}

Node embed_tokens(Tape& tape, ModelParams& params, std::span<const TokenId> ids) {
  const auto& cfg = params.config;
  if (ids.empty()) throw std::invalid_argument("embed_tokens: empty sequence");
  if (static_cast<int>(ids.size()) > cfg.max_positions()) {
    throw std::invalid_argument("sequence longer than the position table");
  }
  std::vector<TokenId> base(ids.begin(), ids.end());
  for (auto& id : base) {
    if (id < 0 || id >= cfg.vocab_size) id = kUnk;
  }
  std::vector<Index> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<Index>(i);
  Node x = add(gather_rows<Real, TokenId>(tape.param(params.token_embedding), base),
               gather_rows<Real, Index>(tape.param(params.position_embedding), positions));
  return drop(norm(tape, params.embedding_norm, x), cfg.dropout);
}

Node encoder_stack(Tape& tape, ModelParams& params, std::span<const TokenId> framed_ids) {
  const Index n = static_cast<Index>(framed_ids.size());
  Mask allowed(n, n);
  for (Index j = 0; j < n; ++j) allowed.col(j).setConstant(framed_ids[static_cast<std::size_t>(j)] != kPad);
  Node h = embed_tokens(tape, params, framed_ids);
  for (auto& layer : params.encoder) {
    h = self_attention_layer(tape, layer, params.config.num_heads, h, allowed, params.config.dropout);
  }
  return h;
}

EncoderOutput encode_document(Tape& tape, ModelParams& params, std::span<const TokenId> source_ids,
                              std::span<const TokenId> copy_ids, int num_oov) {
  if (source_ids.empty()) throw std::invalid_argument("encode_document: empty source");
  if (static_cast<int>(source_ids.size()) > params.config.max_source_len) {
    throw std::invalid_argument("encode_document: source longer than max_source_len");
  }
  if (copy_ids.empty()) copy_ids = source_ids;
  if (copy_ids.size() != source_ids.size()) throw std::invalid_argument("copy_ids length mismatch");
  if (num_oov < 0) throw std::invalid_argument("num_oov must be >= 0");

  const auto real = static_cast<std::size_t>(
      std::find(source_ids.begin(), source_ids.end(), kPad) - source_ids.begin());
  if (real == 0) throw std::invalid_argument("encode_document: all source positions are padding");
  const std::size_t m = source_ids.size();

  std::vector<TokenId> framed = frame(source_ids.first(real));
  framed.insert(framed.end(), m - real, kPad);
  Node out = encoder_stack(tape, params, framed);

  EncoderOutput enc;
  if (real == m) {
    enc.states = slice_rows(out, 1, static_cast<Index>(m));
  } else {
    const std::vector<Node> parts{slice_rows(out, 1, static_cast<Index>(real)),
                                  slice_rows(out, static_cast<Index>(real + 2), static_cast<Index>(m - real))};
    enc.states = concat_rows<Real>(parts);
  }
  enc.extended_size = params.config.vocab_size + num_oov;
  enc.pad.resize(m);
  enc.copy_ids.assign(copy_ids.begin(), copy_ids.end());
  enc.copy_scatter = Matrix::Zero(static_cast<Index>(m), enc.extended_size);
  for (std::size_t i = 0; i < m; ++i) {
    enc.pad[i] = source_ids[i] == kPad;
    if (enc.pad[i]) continue;
    const TokenId c = copy_ids[i];
    if (c < 0 || c >= enc.extended_size) throw std::out_of_range("copy id outside extended vocabulary");
    enc.copy_scatter(static_cast<Index>(i), c) = 1.0;
  }
  return enc;
}

EncoderOutput detach(Tape& tape, const EncoderOutput& enc) {
  EncoderOutput out = enc;
  out.states = tape.constant(enc.states.value());
  return out;
}

// ----------------------------------------------------------- decoder

Node decoder_stack(Tape& tape, ModelParams& params, const Node& input, const Mask& self_allowed,
                   const EncoderOutput& enc) {
  const Index n = input.rows();
  const Index m = enc.states.rows();
  Mask cross(n, m);
  for (Index j = 0; j < m; ++j) cross.col(j).setConstant(!enc.pad[static_cast<std::size_t>(j)]);
  const int heads = params.config.num_heads;
  const double rate = params.config.dropout;
  Node x = input;
  for (auto& layer : params.decoder) {
    x = norm(tape, layer.self_norm, attention_sublayer(tape, layer.self_attention, heads, x, x, self_allowed, rate));
    x = norm(tape, layer.cross_norm,
             attention_sublayer(tape, layer.cross_attention, heads, x, enc.states, cross, rate));
    x = norm(tape, layer.ffn_norm, add(x, drop(feed_forward(tape, layer.ffn, x), rate)));
  }
  return x;
}

Node vocab_distribution(Tape& tape, ModelParams& params, const Node& states) {
  Node logits = add(matmul_nt(states, tape.param(params.token_embedding)), tape.param(params.output_bias));
  return softmax(logits, 1);
}

Node copy_distribution(Tape& tape, ModelParams& params, const Node& states,
                       const EncoderOutput& enc, const Node& p_vocab,
                       std::optional<double> forced_gate) {
  const Index t = states.rows();
  const Index m = enc.states.rows();
  if (std::all_of(enc.pad.begin(), enc.pad.end(), [](bool p) { return p; })) {
    throw std::invalid_argument("copy_distribution: every source position is padding");
  }
  Node scores = matmul_nt(matmul(states, tape.param(params.copy.bilinear)), enc.states);
  Mask blocked(t, m);
  for (Index j = 0; j < m; ++j) blocked.col(j).setConstant(enc.pad[static_cast<std::size_t>(j)]);
  if (blocked.any()) scores = masked_fill(scores, blocked, kNegInf);
  Node alpha = softmax(scores, 1);
  Node context = matmul(alpha, enc.states);

  Node gate;
  if (forced_gate) {
    gate = tape.constant(Matrix::Constant(t, 1, *forced_gate));
  } else {
    const std::vector<Node> gate_in{states, context};
    gate = sigmoid(add(matmul_nt(concat_cols<Real>(gate_in), tape.param(params.copy.gate_weight)),
                       tape.param(params.copy.gate_bias)));
  }

  Node generate = p_vocab;
  const Index extra = enc.extended_size - p_vocab.cols();
  if (extra < 0) throw std::invalid_argument("copy_distribution: vocabulary wider than extended support");
  if (extra > 0) {
    const std::vector<Node> parts{p_vocab, tape.constant(Matrix::Zero(t, extra))};
    generate = concat_cols<Real>(parts);
  }
  Node copied = matmul(alpha, tape.constant(enc.copy_scatter));
  return add(mul(generate, affine(gate, -1.0, 1.0)), mul(copied, gate));
}

Node draft_distributions(Tape& tape, ModelParams& params, std::span<const TokenId> inputs,
                         const EncoderOutput& enc) {
  std::vector<TokenId> ids;
  ids.reserve(inputs.size() + 1);
  ids.push_back(kCls);
  ids.insert(ids.end(), inputs.begin(), inputs.end());
  Node x = embed_tokens(tape, params, ids);
  Node states = decoder_stack(tape, params, x, causal_mask(x.rows()), enc);
  return copy_distribution(tape, params, states, enc, vocab_distribution(tape, params, states));
}

Node decode_draft_step(Tape& tape, ModelParams& params, std::span<const TokenId> prev_ids,
                       const EncoderOutput& enc) {
  Node all = draft_distributions(tape, params, prev_ids, enc);
  return slice_rows(all, all.rows() - 1, 1);
}

Node encode_masked_draft(Tape& tape, ModelParams& params, std::span<const TokenId> draft,
                         std::size_t pos) {
  if (pos >= draft.size()) throw std::out_of_range("encode_masked_draft: position outside draft");
  std::vector<TokenId> framed = frame(draft);
  framed[pos + 1] = kMask;
  // Extended ids and any PAD inside a draft embed as UNK.
  for (std::size_t i = 1; i + 1 < framed.size(); ++i) {
    if (framed[i] == kPad || framed[i] >= params.config.vocab_size) framed[i] = kUnk;
  }
  Node out = encoder_stack(tape, params, framed);
  return slice_rows(out, 1, static_cast<Index>(draft.size()));
}

Node refine_step(Tape& tape, ModelParams& params, const Node& masked_ctx, const EncoderOutput& enc,
                 std::size_t pos) {
  if (pos >= static_cast<std::size_t>(masked_ctx.rows())) throw std::out_of_range("refine_step: position outside draft");
  const Index n = masked_ctx.rows();
  Node states = decoder_stack(tape, params, masked_ctx, full_mask(n, n), enc);
  Node row = slice_rows(states, static_cast<Index>(pos), 1);
  return copy_distribution(tape, params, row, enc, vocab_distribution(tape, params, row));
}

Node refine_distributions(Tape& tape, ModelParams& params, std::span<const TokenId> draft,
                          const EncoderOutput& enc) {
  if (draft.empty()) throw std::invalid_argument("refine_distributions: empty draft");
  std::vector<Node> rows;
  rows.reserve(draft.size());
  for (std::size_t pos = 0; pos < draft.size(); ++pos) {
    rows.push_back(refine_step(tape, params, encode_masked_draft(tape, params, draft, pos), enc, pos));
  }
  return rows.size() == 1 ? rows.front() : concat_rows<Real>(rows);
}

}  // namespace refsum
