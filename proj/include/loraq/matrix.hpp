#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string>

#include "loraq/error.hpp"

namespace loraq {

// Row-major so that quantization blocks (which run along rows) are contiguous.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar> using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived> bool all_finite(const Eigen::MatrixBase<Derived> &a) {
  return a.derived().array().isFinite().all();
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived> &a, const char *what = "matrix") {
  if (!all_finite(a))
    fail(ErrorCode::Numeric, std::string(what) + " contains NaN or Inf");
}

/// Builds a matrix from row-major data, rejecting length mismatches and non-finite entries.
inline Matrix make_matrix(Eigen::Index rows, Eigen::Index cols, std::span<const double> data) {
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size())
    fail(ErrorCode::Shape, "data length " + std::to_string(data.size()) + " does not match " +
                               shape_str(rows, cols));
  Matrix m = Eigen::Map<const Matrix>(data.data(), rows, cols);
  require_finite(m);
  return m;
}

template <typename DerivedA, typename DerivedB>
MatrixX<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA> &a,
                                          const Eigen::MatrixBase<DerivedB> &b) {
  if (a.cols() != b.rows())
    fail(ErrorCode::Shape, "matmul: " + shape_str(a.rows(), a.cols()) + " x " +
                               shape_str(b.rows(), b.cols()));
  return a * b;
}

template <typename Derived>
typename Derived::Scalar frobenius_norm(const Eigen::MatrixBase<Derived> &a) {
  return a.norm();
}

template <typename Derived>
typename Derived::Scalar mean_square(const Eigen::MatrixBase<Derived> &a) {
  if (a.size() == 0)
    return 0;
  return a.squaredNorm() / static_cast<typename Derived::Scalar>(a.size());
}

template <typename DerivedA, typename DerivedB>
void require_same_shape(const Eigen::MatrixBase<DerivedA> &a, const Eigen::MatrixBase<DerivedB> &b,
                        const char *what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorCode::Shape, std::string(what) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
                               shape_str(b.rows(), b.cols()));
}

} // namespace loraq
