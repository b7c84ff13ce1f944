#pragma once

#include <functional>
#include <vector>

#include "dman/autodiff.hpp"
#include "dman/grad_check.hpp"
#include "dman/rng.hpp"

namespace dman::testing {

inline Matrix random_matrix(Rng& rng, Index r, Index c, double s = 1.0) {
  return rng.normal_matrix(r, c, s);
}

// sum(x .* weights): a scalar readout that does not cancel gradients.
inline Var weighted_sum(Var x, const Matrix& weights) {
  return sum(hadamard(x, x.tape().constant(weights)));
}

inline Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index r = 0;
  for (const auto& row : rows) {
    Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

}  // namespace dman::testing
