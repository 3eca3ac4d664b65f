#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>

#include "lindit/errors.hpp"

namespace lindit {

// Every tensor in the toolkit is a row-major 2-D array. Token activations are
// (tokens x channels); a batch of grids is (batch x H*W*C); scalars are 1x1.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <typename Derived>
std::string shape_string(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << "[" << m.rows() << "x" << m.cols() << "]";
  return os.str();
}

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

// Debug-only finiteness assertion; compiled out unless LINDIT_CHECK_FINITE is defined.
template <typename Derived>
inline void debug_check_finite([[maybe_unused]] const Eigen::DenseBase<Derived>& m,
                               [[maybe_unused]] const char* where) {
#ifdef LINDIT_CHECK_FINITE
  if (!m.allFinite()) throw NumericError(std::string("non-finite values in ") + where);
#endif
}

template <typename To, typename From>
Matrix<To> cast(const Matrix<From>& m) {
  return m.template cast<To>();
}

}  // namespace lindit
