#pragma once

#include "loraq/matrix.hpp"

namespace loraq {

template <typename Derived>
MatrixX<typename Derived::Scalar> skew_part(const Eigen::MatrixBase<Derived> &g) {
  return (g - g.transpose()) / typename Derived::Scalar(2);
}

/// Square skew-symmetric parameter. Every write is projected back onto the skew subspace.
template <typename Scalar> class SkewParam {
public:
  SkewParam() = default;
  explicit SkewParam(Eigen::Index dim) : a_(MatrixX<Scalar>::Zero(dim, dim)) {}
  explicit SkewParam(const MatrixX<Scalar> &a) { assign(a); }

  void assign(const MatrixX<Scalar> &a) {
    if (a.rows() != a.cols())
      fail(ErrorCode::Shape, "skew parameter must be square, got " + shape_str(a.rows(), a.cols()));
    a_ = skew_part(a);
  }

  const MatrixX<Scalar> &matrix() const { return a_; }
  Eigen::Index dim() const { return a_.rows(); }

private:
  MatrixX<Scalar> a_;
};

/// Omega = (I - A/2)^{-1} (I + A/2). Orthogonal with det +1 for skew A.
template <typename Scalar> MatrixX<Scalar> cayley_retract(const SkewParam<Scalar> &param) {
  const auto &a = param.matrix();
  const auto n = a.rows();
  const MatrixX<Scalar> id = MatrixX<Scalar>::Identity(n, n);
  Eigen::PartialPivLU<MatrixX<Scalar>> lu(id - a / Scalar(2));
  // I - A/2 has eigenvalues 1 - i*lambda/2, never zero for real skew A.
  return lu.solve(id + a / Scalar(2));
}

/// Gradient with respect to A of f(cayley(A)) given G = df/dOmega, projected to skew.
template <typename Scalar>
MatrixX<Scalar> cayley_pullback(const SkewParam<Scalar> &param, const MatrixX<Scalar> &omega,
                                const MatrixX<Scalar> &grad_omega) {
  const auto &a = param.matrix();
  const auto n = a.rows();
  const MatrixX<Scalar> id = MatrixX<Scalar>::Identity(n, n);
  // dOmega = 1/2 B^{-1} dA (I + Omega) with B = I - A/2.
  const MatrixX<Scalar> bt = (id - a / Scalar(2)).transpose();
  const MatrixX<Scalar> lhs = bt.partialPivLu().solve(grad_omega);
  return skew_part(Scalar(0.5) * lhs * (id + omega).transpose());
}

template <typename Derived>
typename Derived::Scalar orthogonality_defect(const Eigen::MatrixBase<Derived> &omega) {
  using M = MatrixX<typename Derived::Scalar>;
  return (omega.transpose() * omega - M::Identity(omega.cols(), omega.cols())).norm();
}

} // namespace loraq
