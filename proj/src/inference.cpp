#include "refsum/inference.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>

namespace refsum {

namespace {

std::vector<TokenId> generated(const std::vector<TokenId>& tokens) {
  return {tokens.begin() + 1, tokens.end()};
}

bool has_word_char(const std::string& token) {
  return std::any_of(token.begin(), token.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)); });
}

}  // namespace

double Hypothesis::score(double length_penalty) const {
  const auto n = static_cast<double>(std::max<std::size_t>(length(), 1));
  return logprob / std::pow(n, length_penalty);
}

bool trigram_allowed(std::span<const TokenId> prefix, TokenId candidate) {
  const std::size_t n = prefix.size();
  if (n < 2) return true;
  const TokenId a = prefix[n - 2], b = prefix[n - 1];
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (prefix[i] == a && prefix[i + 1] == b && prefix[i + 2] == candidate) return false;
  }
  return true;
}

std::vector<TokenId> strip_draft(std::span<const TokenId> tokens) {
  auto begin = tokens.begin();
  if (begin != tokens.end() && *begin == kCls) ++begin;
  return {begin, std::find(begin, tokens.end(), kPad)};
}

Hypothesis beam_search(ModelParams& params, const EncoderOutput& source, const BeamOptions& opts) {
  if (opts.beam_size < 1) throw std::invalid_argument("beam_size must be >= 1");
  const int limit = params.config.max_target_len;
  const int max_len = opts.max_len > 0 ? std::min(opts.max_len, limit) : limit;
  const auto beam = static_cast<std::size_t>(opts.beam_size);
  Tape tape(false);
  tape.set_recording(false);
  const EncoderOutput enc = detach(tape, source);
  const std::size_t mark = tape.size();

  std::vector<Hypothesis> live{Hypothesis{{kCls}, 0.0, false}};
  std::vector<Hypothesis> finished;
  for (int step = 0; step < max_len; ++step) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      const std::vector<TokenId> prev = generated(h.tokens);
      const Matrix dist = decode_draft_step(tape, params, prev, enc).value();
      tape.rewind(mark);
      for (Index w = 0; w < dist.cols(); ++w) {
        const auto id = static_cast<TokenId>(w);
        if (dist(0, w) <= 0) continue;
        if (opts.block_trigrams && !trigram_allowed(prev, id)) continue;
        Hypothesis c{h.tokens, h.logprob + std::log(dist(0, w)), id == kPad};
        c.tokens.push_back(id);
        candidates.push_back(std::move(c));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.logprob > b.logprob; });
    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < candidates.size(); ++rank) {
      if (candidates[rank].finished) {
        if (rank < beam) finished.push_back(std::move(candidates[rank]));
      } else if (next.size() < beam) {
        next.push_back(std::move(candidates[rank]));
      }
      if (next.size() == beam && rank + 1 >= beam) break;
    }
    live = std::move(next);
    if (finished.size() >= beam || live.empty()) break;
  }

  const auto& pool = finished.empty() ? live : finished;
  if (pool.empty()) return Hypothesis{{kCls}, 0.0, false};
  const Hypothesis* best = &pool.front();
  for (const auto& h : pool) {
    if (h.score(opts.length_penalty) > best->score(opts.length_penalty)) best = &h;
  }
  return *best;
}

std::vector<TokenId> beam_search_draft(ModelParams& params, const EncoderOutput& enc, const BeamOptions& opts) {
  return strip_draft(beam_search(params, enc, opts).tokens);
}

Hypothesis greedy_search(ModelParams& params, const EncoderOutput& source, int max_len, bool block_trigrams) {
  if (max_len <= 0 || max_len > params.config.max_target_len) max_len = params.config.max_target_len;
  Tape tape(false);
  tape.set_recording(false);
  const EncoderOutput enc = detach(tape, source);
  const std::size_t mark = tape.size();
  Hypothesis h{{kCls}, 0.0, false};
  for (int step = 0; step < max_len && !h.finished; ++step) {
    const std::vector<TokenId> prev = generated(h.tokens);
    const Matrix dist = decode_draft_step(tape, params, prev, enc).value();
    tape.rewind(mark);
    Index best = -1;
    for (Index w = 0; w < dist.cols(); ++w) {
      if (dist(0, w) <= 0) continue;
      if (block_trigrams && !trigram_allowed(prev, static_cast<TokenId>(w))) continue;
      if (best < 0 || dist(0, w) > dist(0, best)) best = w;
    }
    if (best < 0) break;
    h.tokens.push_back(static_cast<TokenId>(best));
    h.logprob += std::log(dist(0, best));
    h.finished = best == kPad;
  }
  return h;
}

std::vector<TokenId> refine_greedy(ModelParams& params, std::span<const TokenId> draft,
                                   const EncoderOutput& source, bool progressive) {
  std::vector<TokenId> context(draft.begin(), draft.end());
  std::vector<TokenId> out(draft.begin(), draft.end());
  if (draft.empty()) return out;
  Tape tape(false);
  tape.set_recording(false);
  const EncoderOutput enc = detach(tape, source);
  const std::size_t mark = tape.size();
  for (std::size_t pos = 0; pos < draft.size(); ++pos) {
    const Matrix dist = refine_step(tape, params, encode_masked_draft(tape, params, context, pos), enc, pos).value();
    tape.rewind(mark);
    Index best = 0;
    dist.row(0).maxCoeff(&best);
    out[pos] = static_cast<TokenId>(best);
    if (progressive) context[pos] = out[pos];
  }
  return out;
}

std::string postprocess(std::string_view text, std::size_t min_words) {
  std::vector<std::vector<std::string>> sentences(1);
  for (const auto& tok : split_words(text)) {
    sentences.back().push_back(tok);
    const char last = tok.back();
    if (last == '.' || last == '?' || last == '!') sentences.emplace_back();
  }
  std::set<std::vector<std::string>> seen;
  std::string out;
  for (const auto& s : sentences) {
    if (s.empty()) continue;
    const auto words = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), has_word_char));
    if (words < min_words || !seen.insert(s).second) continue;
    for (const auto& tok : s) {
      if (!out.empty()) out.push_back(' ');
      out += tok;
    }
  }
  return out;
}

Generation generate(ModelParams& params, const Vocabulary& vocab, const TokenizedExample& example,
                    const GenerateOptions& opts) {
  Generation g;
  g.id = example.id;
  Tape tape(false);
  tape.set_recording(false);
  const EncoderOutput enc =
      encode_document(tape, params, example.source_ids, example.source_copy_ids, example.oov.size());
  g.draft = beam_search_draft(params, enc, opts.beam);
  g.refined = opts.refine ? refine_greedy(params, g.draft, enc, opts.progressive) : g.draft;
  g.draft_text = decode(g.draft, vocab, example.oov);
  g.refined_text = decode(g.refined, vocab, example.oov);
  g.final_text = opts.clean ? postprocess(g.refined_text) : g.refined_text;
  return g;
}

}  // namespace refsum
