// Bidirectional encoder, shared transformer decoder, and copy head.
//
// The encoder reads [CLS] tokens [SEP] (trailing PAD allowed); its output
// rows for the tokens themselves form the document memory H. One decoder
// weight set serves both stages: the draft stage feeds embedded previous
// tokens under a causal mask, the refine stage feeds the encoder's reading
// of a masked draft with no causal mask. Both finish in copy_distribution.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "refsum/tensor.hpp"
#include "refsum/tokenizer.hpp"

namespace refsum {

using Real = double;
using Matrix = MatrixX<Real>;
using Param = Tensor<Real>;
using Tape = Graph<Real>;
using Node = Var<Real>;

struct ModelConfig {
  int model_dim = 32;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int num_heads = 4;
  int ffn_dim = 64;
  int vocab_size = 0;
  int max_source_len = 64;
  int max_target_len = 32;
  double dropout = 0.15;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  /// Rows in the position table: framed source or decoder input.
  int max_positions() const;

  bool operator==(const ModelConfig&) const = default;
};

struct AttentionParams {
  Param query, key, value, output;
};

struct LayerNormParams {
  Param gain, bias;
};

struct FeedForwardParams {
  Param w1, b1, w2, b2;
};

struct EncoderLayerParams {
  AttentionParams attention;
  LayerNormParams attention_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct DecoderLayerParams {
  AttentionParams self_attention;
  LayerNormParams self_norm;
  AttentionParams cross_attention;
  LayerNormParams cross_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct CopyParams {
  Param bilinear;     // W_c, d x d
  Param gate_weight;  // W_g, 1 x 2d over [o_t, c_t]
  Param gate_bias;    // b_g, 1 x 1
};

struct ModelParams {
  ModelConfig config;
  Param token_embedding;     // vocab x d, also the tied output projection
  Param position_embedding;  // positions x d
  LayerNormParams embedding_norm;
  Param output_bias;  // 1 x vocab
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  CopyParams copy;

  /// Zero-valued parameters shaped for `config`.
  explicit ModelParams(const ModelConfig& config);
  ModelParams() = default;

  /// Visits (name, tensor) in a fixed order; names are stable across runs.
  template <typename F>
  void for_each(F&& f);
  template <typename F>
  void for_each(F&& f) const;

  std::vector<Param*> all();
  std::vector<Param*> encoder_side();
  void zero_grad();
  std::size_t count() const;
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)); norms at gain 1.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// ----------------------------------------------------------- encoder

struct EncoderOutput {
  Node states;  // H, m x d (PAD rows present but never attended)
  std::vector<bool> pad;
  std::vector<TokenId> copy_ids;
  TokenId extended_size = 0;
  Matrix copy_scatter;  // m x extended_size one-hot of copy_ids, zero at PAD
};

/// o = h + sum_j softmax_j(a_ij) (h_j W_V) per head, a_ij = (h_i W_Q)(h_j W_K)^T / sqrt(d).
/// `allowed(i, j)` marks keys query i may attend to; every row needs one.
Node attention_sublayer(Tape& tape, AttentionParams& p, int num_heads, const Node& queries,
                        const Node& keys, const Mask& allowed, double dropout = 0.0);

/// Attention sublayer and position-wise feed-forward sublayer, each
/// followed by a residual layer norm.
Node self_attention_layer(Tape& tape, EncoderLayerParams& p, int num_heads, const Node& h,
                          const Mask& allowed, double dropout);

/// Token + position embeddings, normalized. Ids past the base vocabulary
/// embed as UNK.
Node embed_tokens(Tape& tape, ModelParams& params, std::span<const TokenId> ids);

/// Bidirectional encoder over an already framed id sequence; PAD keys masked.
Node encoder_stack(Tape& tape, ModelParams& params, std::span<const TokenId> framed_ids);

/// H for `source_ids` (without framing). `copy_ids` defaults to source_ids;
/// `num_oov` extends the output support past the base vocabulary.
EncoderOutput encode_document(Tape& tape, ModelParams& params, std::span<const TokenId> source_ids,
                              std::span<const TokenId> copy_ids = {}, int num_oov = 0);

/// Copy of `enc` whose states live on `tape` as a constant.
EncoderOutput detach(Tape& tape, const EncoderOutput& enc);

// ----------------------------------------------------------- decoder

Node decoder_stack(Tape& tape, ModelParams& params, const Node& input, const Mask& self_allowed,
                   const EncoderOutput& enc);

/// softmax(states E^T + b) over the base vocabulary.
Node vocab_distribution(Tape& tape, ModelParams& params, const Node& states);

/// Mixes generation and copying. `forced_gate` pins g_t (test hook).
Node copy_distribution(Tape& tape, ModelParams& params, const Node& states,
                       const EncoderOutput& enc, const Node& p_vocab,
                       std::optional<double> forced_gate = std::nullopt);

/// Teacher-forced draft stage: row t is P(. | [CLS] inputs[0..t), H).
/// Returns inputs.size()+1 rows over the extended support.
Node draft_distributions(Tape& tape, ModelParams& params, std::span<const TokenId> inputs,
                         const EncoderOutput& enc);

/// Next-token distribution (1 x extended) after `prev_ids`.
Node decode_draft_step(Tape& tape, ModelParams& params, std::span<const TokenId> prev_ids,
                       const EncoderOutput& enc);

/// Encoder reading of `draft` with position `pos` (0-based) replaced by
/// [MASK]; |draft| x d.
Node encode_masked_draft(Tape& tape, ModelParams& params, std::span<const TokenId> draft,
                         std::size_t pos);

/// P(y_pos | draft without pos, H), 1 x extended.
Node refine_step(Tape& tape, ModelParams& params, const Node& masked_ctx, const EncoderOutput& enc,
                 std::size_t pos);

/// One refine_step per position of `draft`, stacked: |draft| x extended.
Node refine_distributions(Tape& tape, ModelParams& params, std::span<const TokenId> draft,
                          const EncoderOutput& enc);

/// Causal mask: query i may see keys j <= i.
Mask causal_mask(Index n);
Mask full_mask(Index rows, Index cols);

// ------------------------------------------------------ implementation

template <typename F>
void visit_attention(const std::string& prefix, AttentionParams& a, F& f) {
  f(prefix + ".query", a.query);
  f(prefix + ".key", a.key);
  f(prefix + ".value", a.value);
  f(prefix + ".output", a.output);
}

template <typename F>
void visit_norm(const std::string& prefix, LayerNormParams& n, F& f) {
  f(prefix + ".gain", n.gain);
  f(prefix + ".bias", n.bias);
}

template <typename F>
void visit_ffn(const std::string& prefix, FeedForwardParams& p, F& f) {
  f(prefix + ".w1", p.w1);
  f(prefix + ".b1", p.b1);
  f(prefix + ".w2", p.w2);
  f(prefix + ".b2", p.b2);
}

template <typename F>
void ModelParams::for_each(F&& f) {
  f(std::string("embedding.token"), token_embedding);
  f(std::string("embedding.position"), position_embedding);
  visit_norm("embedding.norm", embedding_norm, f);
  f(std::string("output.bias"), output_bias);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    visit_attention(p + ".attention", encoder[l].attention, f);
    visit_norm(p + ".attention_norm", encoder[l].attention_norm, f);
    visit_ffn(p + ".ffn", encoder[l].ffn, f);
    visit_norm(p + ".ffn_norm", encoder[l].ffn_norm, f);
  }
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    const std::string p = "decoder." + std::to_string(l);
    visit_attention(p + ".self_attention", decoder[l].self_attention, f);
    visit_norm(p + ".self_norm", decoder[l].self_norm, f);
    visit_attention(p + ".cross_attention", decoder[l].cross_attention, f);
    visit_norm(p + ".cross_norm", decoder[l].cross_norm, f);
    visit_ffn(p + ".ffn", decoder[l].ffn, f);
    visit_norm(p + ".ffn_norm", decoder[l].ffn_norm, f);
  }
  f(std::string("copy.bilinear"), copy.bilinear);
  f(std::string("copy.gate_weight"), copy.gate_weight);
  f(std::string("copy.gate_bias"), copy.gate_bias);
}

template <typename F>
void ModelParams::for_each(F&& f) const {
  const_cast<ModelParams*>(this)->for_each(
      [&f](const std::string& name, Param& p) { f(name, static_cast<const Param&>(p)); });
}

}  // namespace refsum
