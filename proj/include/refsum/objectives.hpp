// Training losses. Every loss is a 1 x 1 node on the caller's tape.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "refsum/model.hpp"

namespace refsum {

/// Label-smoothed negative log-likelihood summed over positions.
///
/// Row t of `dists` scores `targets[t]`. The first PAD target is the
/// end-of-sequence symbol and is scored; any position after it is batch
/// padding and contributes nothing. Smoothing mass is spread uniformly over
/// the `vocab_size` base ids only. A target past the extended support is
/// scored as UNK.
Node mle_loss(Tape& tape, const Node& dists, std::span<const TokenId> targets, int vocab_size,
              double smoothing);

/// Cloze loss of the refine stage; same contract as mle_loss.
Node refine_loss(Tape& tape, const Node& dists, std::span<const TokenId> targets, int vocab_size,
                 double smoothing);

/// sum_t log dists(t, ids[t]) over every row.
Node sequence_logprob(const Node& dists, std::span<const TokenId> ids);

/// reward * (-sample_logprob); reward is a constant in [0, 1].
Node rl_loss(const Node& sample_logprob, double reward);

/// gamma * rl + (1 - gamma) * mle
Node mixed_loss(const Node& rl, const Node& mle, double gamma);
double mixed_loss(double rl, double mle, double gamma);

Node joint_loss(const Node& dec_mixed, const Node& refine_mixed);
double joint_loss(double dec_mixed, double refine_mixed);

struct LossReport {
  double l_dec = 0;
  double l_refine = 0;
  double l_rl_dec = 0;
  double l_rl_refine = 0;
  double l_dec_mixed = 0;
  double l_refine_mixed = 0;
  double l_model = 0;
  double reward_draft = 0;
  double reward_refine = 0;

  LossReport& operator+=(const LossReport& other);
  LossReport scaled(double factor) const;
};

/// One training-log line: step, lr and every LossReport field, fixed decimals.
std::string format_log_record(long step, double lr, const LossReport& report);

}  // namespace refsum
