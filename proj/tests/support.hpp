// Shared fixtures: small random models and synthetic corpora.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "refsum/model.hpp"
#include "refsum/rng.hpp"

namespace refsum::testing {

inline ModelConfig tiny_config(int vocab = 30, int dim = 8, int layers = 2, int heads = 2) {
  ModelConfig c;
  c.model_dim = dim;
  c.encoder_layers = layers;
  c.decoder_layers = layers;
  c.num_heads = heads;
  c.ffn_dim = 2 * dim;
  c.vocab_size = vocab;
  c.max_source_len = 12;
  c.max_target_len = 8;
  c.dropout = 0.0;
  return c;
}

inline std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, int vocab, TokenId lo = kNumSpecials) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = lo + static_cast<TokenId>(uniform_index(rng, static_cast<std::uint64_t>(vocab - lo)));
  return ids;
}

/// Random source with `num_oov` positions carrying extended copy ids.
struct RandomSource {
  std::vector<TokenId> ids;
  std::vector<TokenId> copy;
  int num_oov = 0;
};

inline RandomSource random_source(std::mt19937_64& rng, std::size_t n, int vocab, int num_oov,
                                  TokenId lo = kNumSpecials) {
  RandomSource s;
  s.ids = random_ids(rng, n, vocab, lo);
  s.copy = s.ids;
  s.num_oov = num_oov;
  for (int k = 0; k < num_oov && static_cast<std::size_t>(k) < n; ++k) {
    const auto pos = static_cast<std::size_t>(uniform_index(rng, n));
    s.ids[pos] = kUnk;
    s.copy[pos] = vocab + k;
  }
  // every extended id needs at least one source position
  for (int k = 0; k < num_oov; ++k) {
    s.ids[static_cast<std::size_t>(k) % n] = kUnk;
    s.copy[static_cast<std::size_t>(k) % n] = vocab + k;
  }
  return s;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace refsum::testing

namespace refsum::testing {

inline Matrix random_matrix(std::mt19937_64& rng, Index rows, Index cols, double lo = -2.0, double hi = 2.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = lo + (hi - lo) * uniform01(rng);
  return m;
}

}  // namespace refsum::testing
