// Adam with bias correction and the warmup / inverse-square-root schedule.
#pragma once

#include <span>
#include <vector>

#include "refsum/model.hpp"

namespace refsum {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-9;
};

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;

  bool empty() const { return m.empty(); }
  /// Zero moments shaped like `params`.
  static AdamState zeros_like(std::span<Param* const> params);
};

/// One Adam update from each parameter's accumulated `grad`. The state is
/// created on first use; shape mismatches throw std::invalid_argument.
void adam_step(std::span<Param* const> params, AdamState& state, double lr, const AdamHyper& hyper = {});

/// base_lr * min(step / warmup, sqrt(warmup / step)).
double lr_schedule(long step, long warmup_steps, double base_lr);

}  // namespace refsum
