#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns every node created while evaluating an expression. Nodes are
// appended in evaluation order, so replaying them backwards is a valid
// topological order. Leaves either own their value (constant/variable) or
// reference external storage (parameter), which keeps large tables such as the
// item embedding out of the tape.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "dman/errors.hpp"
#include "dman/matrix.hpp"

namespace dman {

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

struct SparseRowGrad {
  Index row;
  RowVector grad;
};

class Tape {
 public:
  // Receives the node's accumulated output gradient.
  using BackwardFn = std::function<void(Tape&, const Matrix& out_grad)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value) { return make_leaf(std::move(value), nullptr, false, false); }

  Var variable(Matrix value) {
    return make_leaf(std::move(value), nullptr, grad_enabled_, false);
  }

  // Leaf bound to external storage; the matrix must outlive the tape. With
  // sparse_rows, row-gather gradients are recorded as (row, grad) pairs.
  Var parameter(const Matrix& source, bool sparse_rows = false) {
    return make_leaf(Matrix{}, &source, grad_enabled_, sparse_rows);
  }

  // Parameter leaves keep a pointer to their source, so temporaries are refused.
  Var parameter(Matrix&&, bool = false) = delete;

  // Parameter leaf that never receives gradient (frozen copies of trainable weights).
  Var frozen(const Matrix& source) { return make_leaf(Matrix{}, &source, false, false); }
  Var frozen(Matrix&&) = delete;

  const Matrix& value(Var v) const {
    const Node& n = nodes_[v.id_];
    return n.source != nullptr ? *n.source : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    return push_many(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                     std::move(fn));
  }

  Var push_many(Matrix value, std::span<const Var> parents, BackwardFn fn) {
    bool rg = false;
    for (const Var& p : parents) rg = rg || requires_grad(p);
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  template <class Expr>
  void accumulate(Var v, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      const Matrix& val = value(v);
      n.grad = Matrix::Zero(val.rows(), val.cols());
      n.has_grad = true;
    }
    n.grad += g;
  }

  template <class Expr>
  void accumulate_row(Var v, Index row, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[v.id_];
    if (!n.requires_grad) return;
    if (n.sparse_rows) {
      n.sparse.push_back({row, g});
      return;
    }
    if (!n.has_grad) {
      const Matrix& val = value(v);
      n.grad = Matrix::Zero(val.rows(), val.cols());
      n.has_grad = true;
    }
    n.grad.row(row) += g;
  }

  void backward(Var loss, double seed = 1.0) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw DimensionError("backward: loss must be 1x1, got " + shape_str(loss.value()));
    }
    if (!requires_grad(loss)) return;
    accumulate(loss, Matrix::Constant(1, 1, seed));
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  // Dense gradient of v; zeros when nothing flowed into it.
  Matrix gradient(Var v) const {
    const Node& n = nodes_[v.id_];
    const Matrix& val = value(v);
    Matrix g = n.has_grad ? n.grad : Matrix::Zero(val.rows(), val.cols());
    for (const auto& s : n.sparse) g.row(s.row) += s.grad;
    return g;
  }

  // sink += scale * grad(v), touching only rows that received gradient for sparse leaves.
  void add_gradient_to(Var v, Matrix& sink, double scale = 1.0) const {
    const Node& n = nodes_[v.id_];
    if (n.has_grad) {
      require_same_shape(sink, n.grad, "add_gradient_to");
      sink += scale * n.grad;
    }
    for (const auto& s : n.sparse) sink.row(s.row) += scale * s.grad;
  }

  // Leaf created by parameter(source) for this storage, if any.
  const Var* find_parameter(const Matrix* source) const {
    const Var* found = nullptr;
    for (const auto& [ptr, var] : param_index_) {
      if (ptr != source) continue;
      if (nodes_[var.id_].requires_grad) return &var;
      found = &var;
    }
    return found;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* source = nullptr;
    Matrix grad;
    std::vector<SparseRowGrad> sparse;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
    bool sparse_rows = false;
  };

  Var make_leaf(Matrix value, const Matrix* source, bool rg, bool sparse_rows) {
    // Binding the same source twice yields the same leaf, so gradients from
    // every use accumulate in one place.
    for (const auto& [ptr, var] : param_index_) {
      if (ptr == source && nodes_[var.id_].requires_grad == rg) return var;
    }
    Node n;
    n.value = std::move(value);
    n.source = source;
    n.requires_grad = rg;
    n.sparse_rows = sparse_rows;
    nodes_.push_back(std::move(n));
    Var v(this, static_cast<std::uint32_t>(nodes_.size() - 1));
    if (source != nullptr) param_index_.emplace_back(source, v);
    return v;
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;
  std::vector<std::pair<const Matrix*, Var>> param_index_;
};

inline const Matrix& Var::value() const { return tape_->value(*this); }

// ---------------------------------------------------------------------------
// Operations

namespace detail {
inline void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ValidationError("operands live on different tapes");
}
}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a.value()) + " * " + shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

// a * b^T, the row-vector projection form x W^T.
inline Var matmul_nt(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(a.value()) + " * (" +
                         shape_str(b.value()) + ")^T");
  }
  Matrix out = a.value() * b.value().transpose();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value());
    if (t.requires_grad(b)) t.accumulate(b, g.transpose() * a.value());
  });
}

inline Var transpose(Var a) {
  Matrix out = a.value().transpose();
  return a.tape().push(std::move(out), {a},
                       [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value() + b.value();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value() - b.value();
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var hadamard(Var a, Var b) {
  detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape().push(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

inline Var scale(Var a, double s) {
  Matrix out = s * a.value();
  return a.tape().push(std::move(out), {a},
                       [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

inline Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  });
  Tape& tape = a.tape();
  if (!tape.requires_grad(a)) return tape.push(std::move(out), {a}, nullptr);
  Matrix y = out;
  return tape.push(std::move(out), {a}, [a, y](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

// Vertical stacking: [a; b].
inline Var row_concat(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw DimensionError("row_concat: " + shape_str(a.value()) + " over " + shape_str(b.value()));
  }
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const Index ra = a.rows();
  const Index rb = b.rows();
  return a.tape().push(std::move(out), {a, b}, [a, b, ra, rb](Tape& t, const Matrix& g) {
    t.accumulate(a, g.topRows(ra));
    t.accumulate(b, g.bottomRows(rb));
  });
}

// Vertical stacking of any number of blocks with equal width.
inline Var row_concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("row_concat: no blocks");
  Index rows = 0;
  for (const Var& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.cols() != parts[0].cols()) {
      throw DimensionError("row_concat: width " + std::to_string(p.cols()) + " vs " +
                           std::to_string(parts[0].cols()));
    }
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  std::vector<Var> blocks(parts.begin(), parts.end());
  Index at = 0;
  for (const Var& p : blocks) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  Tape& tape = parts[0].tape();
  bool rg = false;
  for (const Var& p : blocks) rg = rg || tape.requires_grad(p);
  if (!rg) return tape.constant(std::move(out));
  return tape.push_many(std::move(out), blocks, [blocks](Tape& t, const Matrix& g) {
    Index at = 0;
    for (const Var& p : blocks) {
      t.accumulate(p, g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

inline Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") of " + shape_str(a.value()));
  }
  Matrix out = a.value().middleRows(start, count);
  return a.tape().push(std::move(out), {a}, [a, start, count](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

inline Var sum(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  const Index r = a.rows();
  const Index c = a.cols();
  return a.tape().push(std::move(out), {a}, [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

inline Var frobenius_sq(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().squaredNorm());
  return a.tape().push(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (2.0 * g(0, 0)) * a.value());
  });
}

inline Var frobenius_norm(Var a) {
  const double n = a.value().norm();
  Matrix out = Matrix::Constant(1, 1, n);
  return a.tape().push(std::move(out), {a}, [a, n](Tape& t, const Matrix& g) {
    if (n > 0) t.accumulate(a, (g(0, 0) / n) * a.value());
  });
}

// Value pass-through that blocks gradient flow into x and its ancestors.
inline Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

// Row-wise softmax with optional visibility mask (true = visible). Masked
// entries are exactly zero.
inline Var softmax_rows(Var logits, const BoolMatrix* mask = nullptr) {
  const Matrix& z = logits.value();
  if (mask != nullptr && (mask->rows() != z.rows() || mask->cols() != z.cols())) {
    throw DimensionError("softmax_rows: mask " + shape_str(*mask) + " vs logits " +
                         shape_str(z));
  }
  Matrix y = Matrix::Zero(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < z.cols(); ++c) {
      if (mask == nullptr || (*mask)(r, c)) mx = std::max(mx, z(r, c));
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw DegenerateMaskError("softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    double total = 0.0;
    for (Index c = 0; c < z.cols(); ++c) {
      if (mask == nullptr || (*mask)(r, c)) {
        y(r, c) = std::exp(z(r, c) - mx);
        total += y(r, c);
      }
    }
    y.row(r) /= total;
  }
  Tape& tape = logits.tape();
  if (!tape.requires_grad(logits)) return tape.push(std::move(y), {logits}, nullptr);
  Matrix yc = y;
  return tape.push(std::move(y), {logits}, [logits, yc](Tape& t, const Matrix& g) {
    const Vector dots = g.cwiseProduct(yc).rowwise().sum();
    t.accumulate(logits, yc.cwiseProduct((g.colwise() - dots)));
  });
}

// table[ids[k]] for each k. Gradient lands on the gathered rows only.
inline Var gather_rows(Var table, std::span<const ItemId> ids) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(ids.size()), tv.cols());
  std::vector<Index> rows(ids.begin(), ids.end());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (rows[k] < 0 || rows[k] >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(rows[k]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    }
    out.row(static_cast<Index>(k)) = tv.row(rows[k]);
  }
  return table.tape().push(std::move(out), {table},
                           [table, rows = std::move(rows)](Tape& t, const Matrix& g) {
                             for (std::size_t k = 0; k < rows.size(); ++k) {
                               t.accumulate_row(table, rows[k], g.row(static_cast<Index>(k)));
                             }
                           });
}

inline constexpr double kSquashEpsilon = 1e-9;

// Row-wise squash: (|s|^2 / (1 + |s|^2)) * s / (|s| + eps).
inline Var squash_rows(Var s) {
  const Matrix& sv = s.value();
  Matrix out(sv.rows(), sv.cols());
  for (Index r = 0; r < sv.rows(); ++r) {
    const double n2 = sv.row(r).squaredNorm();
    const double n = std::sqrt(n2);
    out.row(r) = (n2 / (1.0 + n2) / (n + kSquashEpsilon)) * sv.row(r);
  }
  return s.tape().push(std::move(out), {s}, [s](Tape& t, const Matrix& g) {
    const Matrix& sv = s.value();
    Matrix ds(sv.rows(), sv.cols());
    for (Index r = 0; r < sv.rows(); ++r) {
      const double n2 = sv.row(r).squaredNorm();
      const double n = std::sqrt(n2);
      const double den = (1.0 + n2) * (n + kSquashEpsilon);
      const double c = n2 / den;
      ds.row(r) = c * g.row(r);
      if (n > 0) {
        // d c / d n
        const double dden = 2.0 * n * (n + kSquashEpsilon) + (1.0 + n2);
        const double dc = (2.0 * n * den - n2 * dden) / (den * den);
        ds.row(r) += (dc * g.row(r).dot(sv.row(r)) / n) * sv.row(r);
      }
    }
    t.accumulate(s, ds);
  });
}

// Capsule aggregation. u stacks m blocks of P rows (block j holds the
// predictions W_j x_i for all primary capsules i). Returns m x D with
// out_j = sum_i alpha(i, j) * u[j*P + i].
inline Var capsule_sum(Var alpha, Var u) {
  detail::same_tape(alpha, u);
  const Index P = alpha.rows();
  const Index m = alpha.cols();
  if (u.rows() != P * m) {
    throw DimensionError("capsule_sum: alpha " + shape_str(alpha.value()) + " vs predictions " +
                         shape_str(u.value()));
  }
  const Matrix& a = alpha.value();
  const Matrix& uv = u.value();
  Matrix out(m, uv.cols());
  for (Index j = 0; j < m; ++j) {
    out.row(j) = a.col(j).transpose() * uv.middleRows(j * P, P);
  }
  return alpha.tape().push(std::move(out), {alpha, u}, [alpha, u, P, m](Tape& t, const Matrix& g) {
    const Matrix& a = alpha.value();
    const Matrix& uv = u.value();
    if (t.requires_grad(alpha)) {
      Matrix da(P, m);
      for (Index j = 0; j < m; ++j) da.col(j) = uv.middleRows(j * P, P) * g.row(j).transpose();
      t.accumulate(alpha, da);
    }
    if (t.requires_grad(u)) {
      Matrix du(P * m, uv.cols());
      for (Index j = 0; j < m; ++j) du.middleRows(j * P, P) = a.col(j) * g.row(j);
      t.accumulate(u, du);
    }
  });
}

// Routing agreement: out(i, j) = u[j*P + i] . xbar_j, shape P x m.
inline Var capsule_agreement(Var xbar, Var u) {
  detail::same_tape(xbar, u);
  const Index m = xbar.rows();
  if (m == 0 || u.rows() % m != 0 || u.cols() != xbar.cols()) {
    throw DimensionError("capsule_agreement: capsules " + shape_str(xbar.value()) +
                         " vs predictions " + shape_str(u.value()));
  }
  const Index P = u.rows() / m;
  const Matrix& xv = xbar.value();
  const Matrix& uv = u.value();
  Matrix out(P, m);
  for (Index j = 0; j < m; ++j) out.col(j) = uv.middleRows(j * P, P) * xv.row(j).transpose();
  return xbar.tape().push(std::move(out), {xbar, u}, [xbar, u, P, m](Tape& t, const Matrix& g) {
    const Matrix& xv = xbar.value();
    const Matrix& uv = u.value();
    if (t.requires_grad(xbar)) {
      Matrix dx(m, xv.cols());
      for (Index j = 0; j < m; ++j) dx.row(j) = g.col(j).transpose() * uv.middleRows(j * P, P);
      t.accumulate(xbar, dx);
    }
    if (t.requires_grad(u)) {
      Matrix du(P * m, uv.cols());
      for (Index j = 0; j < m; ++j) du.middleRows(j * P, P) = g.col(j) * xv.row(j);
      t.accumulate(u, du);
    }
  });
}

// Per-row candidate scores: out(t, c) = cand[t*group + c] . user[t].
inline Var grouped_row_scores(Var user, Var cand, Index group) {
  detail::same_tape(user, cand);
  const Index rows = user.rows();
  if (group < 1 || cand.rows() != rows * group || cand.cols() != user.cols()) {
    throw DimensionError("grouped_row_scores: user " + shape_str(user.value()) +
                         " vs candidates " + shape_str(cand.value()) + " in groups of " +
                         std::to_string(group));
  }
  const Matrix& uv = user.value();
  const Matrix& cv = cand.value();
  Matrix out(rows, group);
  for (Index r = 0; r < rows; ++r) {
    out.row(r) = (cv.middleRows(r * group, group) * uv.row(r).transpose()).transpose();
  }
  return user.tape().push(std::move(out), {user, cand},
                          [user, cand, rows, group](Tape& t, const Matrix& g) {
                            const Matrix& uv = user.value();
                            const Matrix& cv = cand.value();
                            if (t.requires_grad(user)) {
                              Matrix du(rows, uv.cols());
                              for (Index r = 0; r < rows; ++r) {
                                du.row(r) = g.row(r) * cv.middleRows(r * group, group);
                              }
                              t.accumulate(user, du);
                            }
                            if (t.requires_grad(cand)) {
                              Matrix dc(rows * group, cv.cols());
                              for (Index r = 0; r < rows; ++r) {
                                dc.middleRows(r * group, group) = g.row(r).transpose() * uv.row(r);
                              }
                              t.accumulate(cand, dc);
                            }
                          });
}

// sum_r weight[r] * (logsumexp(scores[r]) - scores[r][0]): cross-entropy with
// the positive candidate in column 0.
inline Var softmax_xent_rows(Var scores, const Vector& weights) {
  const Matrix& s = scores.value();
  if (weights.size() != s.rows() || s.cols() < 1) {
    throw DimensionError("softmax_xent_rows: scores " + shape_str(s) + " with " +
                         std::to_string(weights.size()) + " weights");
  }
  Matrix probs(s.rows(), s.cols());
  double total = 0.0;
  for (Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    probs.row(r) = (s.row(r).array() - mx).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    if (weights(r) != 0.0) total += weights(r) * (mx + std::log(z) - s(r, 0));
  }
  return scores.tape().push(Matrix::Constant(1, 1, total), {scores},
                            [scores, probs, weights](Tape& t, const Matrix& g) {
                              Matrix d = probs;
                              d.col(0).array() -= 1.0;
                              d = (weights * g(0, 0)).asDiagonal() * d;
                              t.accumulate(scores, d);
                            });
}

// Per-row weighted cross-entropy terms of softmax_xent_rows, as an R x 1 column.
inline Var softmax_xent_terms(Var scores, const Vector& weights) {
  const Matrix& s = scores.value();
  if (weights.size() != s.rows() || s.cols() < 1) {
    throw DimensionError("softmax_xent_terms: scores " + shape_str(s) + " with " +
                         std::to_string(weights.size()) + " weights");
  }
  Matrix probs(s.rows(), s.cols());
  Matrix terms = Matrix::Zero(s.rows(), 1);
  for (Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    probs.row(r) = (s.row(r).array() - mx).exp().matrix();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    if (weights(r) != 0.0) terms(r, 0) = weights(r) * (mx + std::log(z) - s(r, 0));
  }
  return scores.tape().push(std::move(terms), {scores},
                            [scores, probs, weights](Tape& t, const Matrix& g) {
                              Matrix d = probs;
                              d.col(0).array() -= 1.0;
                              d = (weights.cwiseProduct(g.col(0))).asDiagonal() * d;
                              t.accumulate(scores, d);
                            });
}

}  // namespace dman
