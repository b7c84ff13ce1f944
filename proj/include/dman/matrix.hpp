#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <sstream>
#include <string>

#include "dman/errors.hpp"

namespace dman {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ItemId = std::int64_t;
using UserId = std::int64_t;
inline constexpr ItemId kPaddingItem = 0;

inline std::string shape_str(Index rows, Index cols) {
  std::ostringstream os;
  os << rows << "x" << cols;
  return os.str();
}

template <class A>
std::string shape_str(const A& a) {
  return shape_str(a.rows(), a.cols());
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace dman
