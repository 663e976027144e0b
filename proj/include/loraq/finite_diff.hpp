#pragma once

#include <functional>

#include "loraq/matrix.hpp"

namespace loraq {

/// Central-difference gradient of a scalar function of a matrix, entry by entry.
template <typename Scalar, typename F>
MatrixX<Scalar> finite_diff_grad(F &&f, const MatrixX<Scalar> &x, Scalar eps) {
  if (!(eps > 0))
    fail(ErrorCode::Parameter, "finite_diff_grad: eps must be positive");
  MatrixX<Scalar> grad(x.rows(), x.cols());
  MatrixX<Scalar> probe = x;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Scalar saved = probe(i, j);
      probe(i, j) = saved + eps;
      const Scalar up = f(probe);
      probe(i, j) = saved - eps;
      const Scalar down = f(probe);
      probe(i, j) = saved;
      grad(i, j) = (up - down) / (2 * eps);
    }
  }
  return grad;
}

} // namespace loraq
