#include "refsum/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace refsum {

AdamState AdamState::zeros_like(std::span<Param* const> params) {
  AdamState s;
  for (const Param* p : params) {
    s.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    s.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return s;
}

void adam_step(std::span<Param* const> params, AdamState& state, double lr, const AdamHyper& h) {
  if (state.empty()) state = AdamState::zeros_like(params);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Param& p = *params[i];
    const auto same = [&p](const Matrix& x) { return x.rows() == p.value.rows() && x.cols() == p.value.cols(); };
    if (!same(p.grad) || !same(state.m[i]) || !same(state.v[i])) {
      throw std::invalid_argument("adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    m = h.beta1 * m + (1.0 - h.beta1) * p.grad;
    v = h.beta2 * v + (1.0 - h.beta2) * p.grad.cwiseProduct(p.grad);
    for (Index k = 0; k < p.value.size(); ++k) {
      const double mh = m.data()[k] / c1;
      const double vh = v.data()[k] / c2;
      p.value.data()[k] -= lr * mh / (std::sqrt(vh) + h.epsilon);
    }
  }
}

double lr_schedule(long step, long warmup_steps, double base_lr) {
  if (warmup_steps < 1) throw std::invalid_argument("lr_schedule: warmup_steps must be >= 1");
  if (step < 1) throw std::invalid_argument("lr_schedule: step must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup_steps);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

}  // namespace refsum
