// Dense matrices with a reverse-mode tape.
//
// Every value is a row-major Eigen matrix; vectors are 1 x n rows and
// scalars are 1 x 1. Operations are free functions over Var handles and
// record a backward closure on the owning Graph. Graph::backward walks the
// tape in exact reverse construction order and adds parameter gradients
// into Tensor::grad, so two backward calls on the same graph double them.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "refsum/rng.hpp"

namespace refsum {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Boolean matrix; in attention masks `true` marks an allowed key.
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Tensor {
  MatrixX<Scalar> value;
  MatrixX<Scalar> grad;
  bool requires_grad = true;

  Tensor() = default;
  Tensor(Index rows, Index cols, bool trainable = true)
      : value(MatrixX<Scalar>::Zero(rows, cols)),
        grad(MatrixX<Scalar>::Zero(rows, cols)),
        requires_grad(trainable) {}
  explicit Tensor(MatrixX<Scalar> v, bool trainable = true)
      : value(std::move(v)), requires_grad(trainable) {
    grad.setZero(value.rows(), value.cols());
  }

  std::vector<Index> shape() const { return {value.rows(), value.cols()}; }
  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Graph;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const MatrixX<Scalar>& value() const { return graph_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Scalar item() const {
    if (value().size() != 1) throw std::invalid_argument("item() on non-scalar tensor");
    return value()(0, 0);
  }

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Graph {
 public:
  using Matrix = MatrixX<Scalar>;
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(bool training = false, std::mt19937_64* rng = nullptr)
      : training_(training), rng_(rng) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }
  /// When off, ops compute values only and keep no backward closures.
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  std::mt19937_64* rng() const { return rng_; }
  void set_rng(std::mt19937_64* rng) { rng_ = rng; }
  /// True once any dropout op drew a random mask on this graph.
  bool used_dropout() const { return used_dropout_; }
  void mark_dropout() { used_dropout_ = true; }

  Var<Scalar> constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter. One leaf per tensor per graph.
  Var<Scalar> param(Tensor<Scalar>& t) {
    if (auto it = param_ids_.find(&t); it != param_ids_.end()) return {this, it->second};
    Node n;
    n.external = &t.value;
    n.param = &t;
    n.needs_grad = t.requires_grad;
    nodes_.push_back(std::move(n));
    param_ids_.emplace(&t, nodes_.size() - 1);
    return {this, nodes_.size() - 1};
  }

  Var<Scalar> record(Matrix value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.needs_grad = needs_grad && recording_;
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Matrix& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient slot of a node, allocated as zeros on first use.
  Matrix& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) {
      const Matrix& v = value(id);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Drop every node created after `mark`.
  void rewind(std::size_t mark) {
    if (mark >= nodes_.size()) return;
    for (std::size_t i = mark; i < nodes_.size(); ++i) {
      if (nodes_[i].param) param_ids_.erase(nodes_[i].param);
    }
    nodes_.resize(mark);
  }

  void backward(const Var<Scalar>& loss) {
    if (loss.value().size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!nodes_[loss.id()].needs_grad) return;
    grad(loss.id()).setOnes();
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        Tensor<Scalar>& t = *n.param;
        if (t.grad.rows() != t.value.rows() || t.grad.cols() != t.value.cols()) t.zero_grad();
        t.grad += nodes_[i].grad;
      }
    }
  }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    BackwardFn backward;
    Tensor<Scalar>* param = nullptr;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, std::size_t> param_ids_;
  bool training_ = false;
  bool recording_ = true;
  bool used_dropout_ = false;
  std::mt19937_64* rng_ = nullptr;
};

namespace detail {

enum class Broadcast { kSame, kRow, kCol, kScalar };

template <typename Scalar>
Broadcast broadcast_kind(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::kCol;
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " and " +
                              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <typename Scalar>
MatrixX<Scalar> expand(const MatrixX<Scalar>& b, Broadcast kind, Index rows, Index cols) {
  switch (kind) {
    case Broadcast::kSame: return b;
    case Broadcast::kRow: return b.replicate(rows, 1);
    case Broadcast::kCol: return b.replicate(1, cols);
    case Broadcast::kScalar: return MatrixX<Scalar>::Constant(rows, cols, b(0, 0));
  }
  return b;
}

template <typename Scalar>
MatrixX<Scalar> reduce(const MatrixX<Scalar>& g, Broadcast kind) {
  switch (kind) {
    case Broadcast::kSame: return g;
    case Broadcast::kRow: return g.colwise().sum();
    case Broadcast::kCol: return g.rowwise().sum();
    case Broadcast::kScalar: return MatrixX<Scalar>::Constant(1, 1, g.sum());
  }
  return g;
}

template <typename Scalar>
void check_same_graph(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument("operands belong to different graphs");
}

}  // namespace detail

// ---------------------------------------------------------------- linear

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() * b.value(), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    if (g.needs_grad(ia)) g.grad(ia).noalias() += G * g.value(ib).transpose();
                    if (g.needs_grad(ib)) g.grad(ib).noalias() += g.value(ia).transpose() * G;
                  });
}

/// a * b^T
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimensions differ");
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(a.value() * b.value().transpose(), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    if (g.needs_grad(ia)) g.grad(ia).noalias() += G * g.value(ib);
                    if (g.needs_grad(ib)) g.grad(ib).noalias() += G.transpose() * g.value(ia);
                  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().transpose(), g.needs_grad(ia),
                  [ia](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia) += g.grad(self).transpose();
                  });
}

// ---------------------------------------------------------- elementwise

/// a + b, where b may be same-shaped, a 1 x n row, an m x 1 column or 1 x 1.
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  const auto kind = detail::broadcast_kind(a.value(), b.value(), "add");
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() + detail::expand(b.value(), kind, a.rows(), a.cols());
  return g.record(std::move(out), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib, kind](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    if (g.needs_grad(ia)) g.grad(ia) += G;
                    if (g.needs_grad(ib)) g.grad(ib) += detail::reduce(G, kind);
                  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  const auto kind = detail::broadcast_kind(a.value(), b.value(), "sub");
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  MatrixX<Scalar> out = a.value() - detail::expand(b.value(), kind, a.rows(), a.cols());
  return g.record(std::move(out), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib, kind](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    if (g.needs_grad(ia)) g.grad(ia) += G;
                    if (g.needs_grad(ib)) g.grad(ib) -= detail::reduce(G, kind);
                  });
}

/// Elementwise product with the same broadcasting rules as add.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::check_same_graph(a, b);
  const auto kind = detail::broadcast_kind(a.value(), b.value(), "mul");
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  MatrixX<Scalar> out =
      a.value().cwiseProduct(detail::expand(b.value(), kind, a.rows(), a.cols()));
  return g.record(std::move(out), g.needs_grad(ia) || g.needs_grad(ib),
                  [ia, ib, kind](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    const auto& av = g.value(ia);
                    if (g.needs_grad(ia)) {
                      g.grad(ia) += G.cwiseProduct(
                          detail::expand(g.value(ib), kind, av.rows(), av.cols()));
                    }
                    if (g.needs_grad(ib)) {
                      g.grad(ib) += detail::reduce(MatrixX<Scalar>(G.cwiseProduct(av)), kind);
                    }
                  });
}

/// alpha * a + beta
template <typename Scalar>
Var<Scalar> affine(const Var<Scalar>& a, Scalar alpha, Scalar beta = Scalar(0)) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  MatrixX<Scalar> out = (alpha * a.value().array() + beta).matrix();
  return g.record(std::move(out), g.needs_grad(ia),
                  [ia, alpha](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia) += alpha * g.grad(self);
                  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar alpha) {
  return affine(a, alpha, Scalar(0));
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Var<Scalar> operator*(Scalar s, const Var<Scalar>& a) { return scale(a, s); }

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array().exp().matrix(), g.needs_grad(ia),
                  [ia](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia) += g.grad(self).cwiseProduct(g.value(self));
                  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().array().log().matrix(), g.needs_grad(ia),
                  [ia](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia) += g.grad(self).cwiseQuotient(g.value(ia));
                  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  MatrixX<Scalar> out = a.value().unaryExpr([](Scalar x) {
    if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
    const Scalar e = std::exp(x);
    return e / (Scalar(1) + e);
  });
  return g.record(std::move(out), g.needs_grad(ia), [ia](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self).array();
    g.grad(ia).array() += g.grad(self).array() * y * (Scalar(1) - y);
  });
}

/// Gaussian error linear unit (erf form).
template <typename Scalar>
Var<Scalar> gelu(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  MatrixX<Scalar> out = a.value().unaryExpr(
      [inv_sqrt2](Scalar x) { return Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2)); });
  return g.record(std::move(out), g.needs_grad(ia),
                  [ia, inv_sqrt2](Graph<Scalar>& g, std::size_t self) {
                    const Scalar inv_sqrt_2pi = Scalar(1) / std::sqrt(Scalar(2) * Scalar(M_PI));
                    MatrixX<Scalar> d = g.value(ia).unaryExpr([&](Scalar x) {
                      return Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2)) +
                             x * inv_sqrt_2pi * std::exp(Scalar(-0.5) * x * x);
                    });
                    g.grad(ia) += g.grad(self).cwiseProduct(d);
                  });
}

// ------------------------------------------------------------ reductions

/// Normalized exponentials along `axis` (0 = down columns, 1 = along rows).
/// Entries equal to -inf get probability zero.
template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& v, int axis = 1) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  const auto& x = v.value();
  if ((axis == 1 ? x.cols() : x.rows()) == 0) throw std::invalid_argument("softmax: empty axis");
  constexpr Scalar kInf = std::numeric_limits<Scalar>::infinity();
  MatrixX<Scalar> out(x.rows(), x.cols());
  if (axis == 1) {
    for (Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      if (!std::isfinite(m)) throw std::invalid_argument("softmax: row has no finite entry");
      // Eigen's vectorized exp maps -inf to a denormal, not zero.
      out.row(r) = (x.row(r).array() == -kInf).select(Scalar(0), (x.row(r).array() - m).exp()).matrix();
      out.row(r) /= out.row(r).sum();
    }
  } else {
    for (Index c = 0; c < x.cols(); ++c) {
      const Scalar m = x.col(c).maxCoeff();
      if (!std::isfinite(m)) throw std::invalid_argument("softmax: column has no finite entry");
      out.col(c) = (x.col(c).array() == -kInf).select(Scalar(0), (x.col(c).array() - m).exp()).matrix();
      out.col(c) /= out.col(c).sum();
    }
  }
  Graph<Scalar>& g = v.graph();
  const std::size_t iv = v.id();
  return g.record(std::move(out), g.needs_grad(iv), [iv, axis](Graph<Scalar>& g, std::size_t self) {
    const auto& y = g.value(self);
    const auto& G = g.grad(self);
    MatrixX<Scalar> gy = G.cwiseProduct(y);
    if (axis == 1) {
      const auto dots = gy.rowwise().sum();
      g.grad(iv) += gy - (y.array().colwise() * dots.array()).matrix();
    } else {
      const auto dots = gy.colwise().sum();
      g.grad(iv) += gy - (y.array().rowwise() * dots.array()).matrix();
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(MatrixX<Scalar>::Constant(1, 1, a.value().sum()), g.needs_grad(ia),
                  [ia](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia).array() += g.grad(self)(0, 0);
                  });
}

/// m x n -> m x 1
template <typename Scalar>
Var<Scalar> row_sum(const Var<Scalar>& a) {
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().rowwise().sum(), g.needs_grad(ia),
                  [ia](Graph<Scalar>& g, std::size_t self) {
                    auto& ga = g.grad(ia);
                    ga += g.grad(self).replicate(1, ga.cols());
                  });
}

// ---------------------------------------------------------- structural

/// Replace entries where `mask` is true by `fill`.
template <typename Scalar>
Var<Scalar> masked_fill(const Var<Scalar>& a, const Mask& mask, Scalar fill) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    throw std::invalid_argument("masked_fill: mask shape mismatch");
  }
  MatrixX<Scalar> out = mask.select(MatrixX<Scalar>::Constant(a.rows(), a.cols(), fill), a.value());
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(std::move(out), g.needs_grad(ia), [ia, mask](Graph<Scalar>& g, std::size_t self) {
    const auto& G = g.grad(self);
    g.grad(ia) += mask.select(MatrixX<Scalar>::Zero(G.rows(), G.cols()), G);
  });
}

/// Rows of `table` selected by `ids` (embedding lookup).
template <typename Scalar, typename Id>
Var<Scalar> gather_rows(const Var<Scalar>& table, std::span<const Id> ids) {
  const auto& t = table.value();
  MatrixX<Scalar> out(static_cast<Index>(ids.size()), t.cols());
  std::vector<Index> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto r = static_cast<Index>(ids[i]);
    if (r < 0 || r >= t.rows()) throw std::out_of_range("gather_rows: index out of range");
    rows[i] = r;
    out.row(static_cast<Index>(i)) = t.row(r);
  }
  Graph<Scalar>& g = table.graph();
  const std::size_t it = table.id();
  return g.record(std::move(out), g.needs_grad(it),
                  [it, rows = std::move(rows)](Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    auto& gt = g.grad(it);
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                      gt.row(rows[i]) += G.row(static_cast<Index>(i));
                    }
                  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw std::out_of_range("slice_rows: range out of bounds");
  }
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().middleRows(begin, count), g.needs_grad(ia),
                  [ia, begin, count](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia).middleRows(begin, count) += g.grad(self);
                  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(a.value().middleCols(begin, count), g.needs_grad(ia),
                  [ia, begin, count](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ia).middleCols(begin, count) += g.grad(self);
                  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Graph<Scalar>& g = parts.front().graph();
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row counts differ");
    cols += p.cols();
    needs = needs || g.needs_grad(p.id());
    ids.push_back(p.id());
  }
  MatrixX<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return g.record(std::move(out), needs, [ids = std::move(ids)](Graph<Scalar>& g, std::size_t self) {
    const auto& G = g.grad(self);
    Index at = 0;
    for (std::size_t id : ids) {
      const Index c = g.value(id).cols();
      if (g.needs_grad(id)) g.grad(id) += G.middleCols(at, c);
      at += c;
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Graph<Scalar>& g = parts.front().graph();
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool needs = false;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column counts differ");
    rows += p.rows();
    needs = needs || g.needs_grad(p.id());
    ids.push_back(p.id());
  }
  MatrixX<Scalar> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return g.record(std::move(out), needs, [ids = std::move(ids)](Graph<Scalar>& g, std::size_t self) {
    const auto& G = g.grad(self);
    Index at = 0;
    for (std::size_t id : ids) {
      const Index r = g.value(id).rows();
      if (g.needs_grad(id)) g.grad(id) += G.middleRows(at, r);
      at += r;
    }
  });
}

/// Gathers a(rows[k], cols[k]) into a k x 1 column.
template <typename Scalar>
Var<Scalar> pick(const Var<Scalar>& a, std::vector<Index> rows, std::vector<Index> cols) {
  if (rows.size() != cols.size()) throw std::invalid_argument("pick: coordinate lists differ");
  const auto& v = a.value();
  MatrixX<Scalar> out(static_cast<Index>(rows.size()), 1);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= v.rows() || cols[k] < 0 || cols[k] >= v.cols()) {
      throw std::out_of_range("pick: coordinate out of range");
    }
    out(static_cast<Index>(k), 0) = v(rows[k], cols[k]);
  }
  Graph<Scalar>& g = a.graph();
  const std::size_t ia = a.id();
  return g.record(std::move(out), g.needs_grad(ia),
                  [ia, rows = std::move(rows), cols = std::move(cols)](Graph<Scalar>& g,
                                                                       std::size_t self) {
                    const auto& G = g.grad(self);
                    auto& ga = g.grad(ia);
                    for (std::size_t k = 0; k < rows.size(); ++k) {
                      ga(rows[k], cols[k]) += G(static_cast<Index>(k), 0);
                    }
                  });
}

// --------------------------------------------------------- normalizers

/// Per-row layer normalization with 1 x n gain and bias.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias,
                       Scalar eps = Scalar(1e-6)) {
  const auto& xv = x.value();
  const Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols");
  }
  MatrixX<Scalar> xhat(xv.rows(), n);
  MatrixX<Scalar> inv_std(xv.rows(), 1);
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mean).square().mean();
    inv_std(r, 0) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean).matrix() * inv_std(r, 0);
  }
  MatrixX<Scalar> out =
      (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  Graph<Scalar>& g = x.graph();
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  const bool needs = g.needs_grad(ix) || g.needs_grad(ig) || g.needs_grad(ib);
  return g.record(std::move(out), needs,
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                      Graph<Scalar>& g, std::size_t self) {
                    const auto& G = g.grad(self);
                    if (g.needs_grad(ig)) g.grad(ig) += G.cwiseProduct(xhat).colwise().sum();
                    if (g.needs_grad(ib)) g.grad(ib) += G.colwise().sum();
                    if (g.needs_grad(ix)) {
                      const auto gv = g.value(ig).row(0).array();
                      MatrixX<Scalar> dxhat = (G.array().rowwise() * gv).matrix();
                      auto& gx = g.grad(ix);
                      const Scalar n = static_cast<Scalar>(G.cols());
                      for (Index r = 0; r < G.rows(); ++r) {
                        const Scalar m1 = dxhat.row(r).sum() / n;
                        const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                        gx.row(r).array() += inv_std(r, 0) * (dxhat.row(r).array() - m1 -
                                                              xhat.row(r).array() * m2);
                      }
                    }
                  });
}

/// Inverted dropout; identity outside training mode or when rate is 0.
template <typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, Scalar rate) {
  Graph<Scalar>& g = x.graph();
  if (!g.training() || rate <= Scalar(0)) return x;
  if (rate >= Scalar(1)) throw std::invalid_argument("dropout: rate must be < 1");
  if (g.rng() == nullptr) throw std::logic_error("dropout: training graph has no random stream");
  g.mark_dropout();
  const Scalar keep_scale = Scalar(1) / (Scalar(1) - rate);
  MatrixX<Scalar> keep(x.rows(), x.cols());
  for (Index i = 0; i < keep.size(); ++i) {
    keep.data()[i] = uniform01(*g.rng()) < static_cast<double>(rate) ? Scalar(0) : keep_scale;
  }
  MatrixX<Scalar> out = x.value().cwiseProduct(keep);
  const std::size_t ix = x.id();
  return g.record(std::move(out), g.needs_grad(ix),
                  [ix, keep = std::move(keep)](Graph<Scalar>& g, std::size_t self) {
                    g.grad(ix) += g.grad(self).cwiseProduct(keep);
                  });
}

// --------------------------------------------------------- grad check

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences over every element of `params`.
///
/// `f` builds a scalar loss on the graph it is handed; it must be
/// deterministic, so a graph that draws dropout masks is rejected.
template <typename Scalar>
Scalar grad_check(const std::function<Var<Scalar>(Graph<Scalar>&)>& f,
                  std::span<Tensor<Scalar>* const> params, Scalar eps) {
  if (!(eps > Scalar(0))) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Graph<Scalar> g;
    auto loss = f(g);
    if (g.used_dropout()) throw std::invalid_argument("grad_check: function uses dropout");
    g.backward(loss);
  }
  auto evaluate = [&f]() {
    Graph<Scalar> g;
    g.set_recording(false);
    auto loss = f(g);
    if (g.used_dropout()) throw std::invalid_argument("grad_check: function uses dropout");
    return loss.item();
  };
  Scalar worst = 0;
  for (auto* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) {
      Scalar& x = p->value.data()[i];
      const Scalar saved = x;
      x = saved + eps;
      const Scalar up = evaluate();
      x = saved - eps;
      const Scalar down = evaluate();
      x = saved;
      const Scalar numeric = (up - down) / (Scalar(2) * eps);
      const Scalar analytic = p->grad.data()[i];
      const Scalar denom =
          std::max({std::abs(analytic), std::abs(numeric), static_cast<Scalar>(1e-8)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace refsum
