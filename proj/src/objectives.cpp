#include "refsum/objectives.hpp"

#include <cstdio>
#include <stdexcept>

#include "refsum/log.hpp"

namespace refsum {

LogLevel& log_level() {
  static LogLevel level = LogLevel::kWarn;
  return level;
}

Node mle_loss(Tape& tape, const Node& dists, std::span<const TokenId> targets, int vocab_size,
              double smoothing) {
  if (static_cast<Index>(targets.size()) != dists.rows()) {
    throw std::invalid_argument("mle_loss: one distribution per target required");
  }
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("mle_loss: smoothing must be in [0, 1)");
  if (vocab_size < 1 || vocab_size > dists.cols()) throw std::invalid_argument("mle_loss: bad vocab_size");

  std::vector<Index> rows, cols;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    TokenId y = targets[t];
    if (y < 0 || y >= dists.cols()) {
      log_warn("target id " + std::to_string(y) + " outside the extended support, scored as UNK");
      y = kUnk;
    }
    rows.push_back(static_cast<Index>(t));
    cols.push_back(y);
    if (y == kPad) break;
  }
  if (rows.empty()) return tape.constant(Matrix::Zero(1, 1));
  const auto active = static_cast<Index>(rows.size());

  Node nll = affine(sum(log(pick(dists, std::move(rows), std::move(cols)))), -(1.0 - smoothing));
  if (smoothing == 0.0) return nll;
  Node base = slice_cols(slice_rows(dists, 0, active), 0, vocab_size);
  Node uniform = affine(sum(log(base)), -smoothing / static_cast<double>(vocab_size));
  return add(nll, uniform);
}

Node refine_loss(Tape& tape, const Node& dists, std::span<const TokenId> targets, int vocab_size,
                 double smoothing) {
  return mle_loss(tape, dists, targets, vocab_size, smoothing);
}

Node sequence_logprob(const Node& dists, std::span<const TokenId> ids) {
  if (static_cast<Index>(ids.size()) != dists.rows()) {
    throw std::invalid_argument("sequence_logprob: one distribution per token required");
  }
  std::vector<Index> rows(ids.size()), cols(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    rows[t] = static_cast<Index>(t);
    cols[t] = ids[t];
  }
  return sum(log(pick(dists, std::move(rows), std::move(cols))));
}

Node rl_loss(const Node& sample_logprob, double reward) {
  if (!(reward >= 0.0 && reward <= 1.0)) throw std::invalid_argument("rl_loss: reward must be in [0, 1]");
  return affine(sample_logprob, -reward);
}

Node mixed_loss(const Node& rl, const Node& mle, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("mixed_loss: gamma must be in [0, 1]");
  return add(affine(rl, gamma), affine(mle, 1.0 - gamma));
}

double mixed_loss(double rl, double mle, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("mixed_loss: gamma must be in [0, 1]");
  return gamma * rl + (1.0 - gamma) * mle;
}

Node joint_loss(const Node& dec_mixed, const Node& refine_mixed) { return add(dec_mixed, refine_mixed); }

double joint_loss(double dec_mixed, double refine_mixed) { return dec_mixed + refine_mixed; }

LossReport& LossReport::operator+=(const LossReport& o) {
  l_dec += o.l_dec;
  l_refine += o.l_refine;
  l_rl_dec += o.l_rl_dec;
  l_rl_refine += o.l_rl_refine;
  l_dec_mixed += o.l_dec_mixed;
  l_refine_mixed += o.l_refine_mixed;
  l_model += o.l_model;
  reward_draft += o.reward_draft;
  reward_refine += o.reward_refine;
  return *this;
}

LossReport LossReport::scaled(double f) const {
  LossReport r = *this;
  r.l_dec *= f;
  r.l_refine *= f;
  r.l_rl_dec *= f;
  r.l_rl_refine *= f;
  r.l_dec_mixed *= f;
  r.l_refine_mixed *= f;
  r.l_model *= f;
  r.reward_draft *= f;
  r.reward_refine *= f;
  return r;
}

std::string format_log_record(long step, double lr, const LossReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\"step\":%ld,\"lr\":%.9f,\"l_dec\":%.6f,\"l_refine\":%.6f,\"l_rl_dec\":%.6f,"
                "\"l_rl_refine\":%.6f,\"l_dec_mixed\":%.6f,\"l_refine_mixed\":%.6f,"
                "\"l_model\":%.6f,\"reward_draft\":%.6f,\"reward_refine\":%.6f}",
                step, lr, r.l_dec, r.l_refine, r.l_rl_dec, r.l_rl_refine, r.l_dec_mixed,
                r.l_refine_mixed, r.l_model, r.reward_draft, r.reward_refine);
  return buf;
}

}  // namespace refsum
