#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dman/autodiff.hpp"

namespace dman {

struct ParamRef {
  std::string name;
  Matrix* value;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  Index worst_row = 0;
  Index worst_col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double e = 0.0;
    for (const auto& x : entries) e = std::max(e, x.max_rel_error);
    return e;
  }
  bool passed(double tol) const { return max_rel_error() <= tol; }
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// Compares given analytic gradients against central differences of the sum
// of the terms returned by f, which must read the current contents of each
// params[k].value. Differencing term by term before summing keeps rounding
// in the large total out of the difference.
inline GradCheckReport compare_gradients(const std::function<Matrix()>& f,
                                         std::span<const ParamRef> params,
                                         std::span<const Matrix> analytic, double eps) {
  if (!(eps > 0)) throw ValidationError("grad_check: eps must be positive");
  if (analytic.size() != params.size()) {
    throw ValidationError("grad_check: one analytic gradient per parameter required");
  }
  auto eval = [&f]() {
    Matrix v = f();
    if (!v.allFinite()) throw RuntimeFailure("grad_check: objective is not finite");
    return v;
  };
  GradCheckReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k].value;
    require_same_shape(p, analytic[k], ("grad_check " + params[k].name).c_str());
    GradCheckEntry entry;
    entry.name = params[k].name;
    for (Index r = 0; r < p.rows(); ++r) {
      for (Index c = 0; c < p.cols(); ++c) {
        const double saved = p(r, c);
        p(r, c) = saved + eps;
        const Matrix up = eval();
        p(r, c) = saved - eps;
        const Matrix down = eval();
        p(r, c) = saved;
        const double numeric = (up - down).sum() / (2.0 * eps);
        const double err = relative_error(analytic[k](r, c), numeric);
        if (err > entry.max_rel_error || (r == 0 && c == 0)) {
          entry.max_rel_error = err;
          entry.worst_row = r;
          entry.worst_col = c;
          entry.analytic = analytic[k](r, c);
          entry.numeric = numeric;
        }
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

inline GradCheckReport compare_gradients(const std::function<double()>& f,
                                         std::span<const ParamRef> params,
                                         std::span<const Matrix> analytic, double eps) {
  return compare_gradients(std::function<Matrix()>([&f] { return Matrix::Constant(1, 1, f()); }),
                           params, analytic, eps);
}

// Tape gradients of the graph built by f versus central differences. The
// objective is the sum of the entries f returns. f must bind each checked
// matrix with tape.parameter(*ref.value).
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& f,
                                  std::span<const ParamRef> params, double eps) {
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Var terms = f(tape);
    if (!terms.value().allFinite()) {
      throw RuntimeFailure("grad_check: objective is not finite");
    }
    tape.backward(sum(terms));
    for (const auto& p : params) {
      const Var* leaf = tape.find_parameter(p.value);
      analytic.push_back(leaf != nullptr ? tape.gradient(*leaf)
                                         : Matrix::Zero(p.value->rows(), p.value->cols()));
    }
  }
  auto value_only = [&f]() {
    Tape tape(false);
    return Matrix(f(tape).value());
  };
  return compare_gradients(value_only, params, analytic, eps);
}

}  // namespace dman
