#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "loraq/matrix.hpp"

namespace loraq {

template <typename Scalar> struct SvdOptions {
  int max_sweeps = 60;
  // Pairs (i, j) are rotated while |<a_i, a_j>| > tol * |a_i| * |a_j|.
  Scalar tolerance = Scalar(1e-12);
};

/// Thin SVD A = U diag(sigma) V^T, singular values descending.
template <typename Scalar> struct Svd {
  MatrixX<Scalar> u;
  VectorX<Scalar> sigma;
  MatrixX<Scalar> v;
  int sweeps = 0;
};

namespace detail {

// One-sided (Hestenes) Jacobi on the columns of `a` (rows >= cols). On return the
// columns of `a` are mutually orthogonal and `v` holds the accumulated rotations.
template <typename Scalar>
int hestenes_jacobi(Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &a,
                    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> &v,
                    const SvdOptions<Scalar> &opt) {
  using std::abs;
  using std::sqrt;
  const Eigen::Index n = a.cols();
  v.setIdentity(n, n);
  Scalar worst = 0;
  for (int sweep = 1; sweep <= opt.max_sweeps; ++sweep) {
    worst = 0;
    bool rotated = false;
    for (Eigen::Index i = 0; i + 1 < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const Scalar alpha = a.col(i).squaredNorm();
        const Scalar beta = a.col(j).squaredNorm();
        const Scalar gamma = a.col(i).dot(a.col(j));
        if (alpha == 0 || beta == 0)
          continue;
        const Scalar off = abs(gamma) / sqrt(alpha * beta);
        worst = std::max(worst, off);
        if (off <= opt.tolerance)
          continue;
        rotated = true;
        const Scalar zeta = (beta - alpha) / (2 * gamma);
        const Scalar t = (zeta >= 0 ? Scalar(1) : Scalar(-1)) / (abs(zeta) + sqrt(1 + zeta * zeta));
        const Scalar c = 1 / sqrt(1 + t * t);
        const Scalar s = c * t;
        for (auto *m : {&a, &v}) {
          auto ci = m->col(i);
          auto cj = m->col(j);
          for (Eigen::Index k = 0; k < m->rows(); ++k) {
            const Scalar x = ci(k), y = cj(k);
            ci(k) = c * x - s * y;
            cj(k) = s * x + c * y;
          }
        }
      }
    }
    if (!rotated)
      return sweep;
  }
  throw ConvergenceError("one-sided Jacobi did not converge in " + std::to_string(opt.max_sweeps) +
                             " sweeps",
                         static_cast<double>(worst));
}

} // namespace detail

/// Full thin SVD by one-sided Jacobi. Each left singular vector is signed so that its
/// largest-magnitude entry is positive (first such entry on ties).
template <typename Derived>
Svd<typename Derived::Scalar> jacobi_svd(const Eigen::MatrixBase<Derived> &input,
                                         const SvdOptions<typename Derived::Scalar> &opt = {}) {
  using Scalar = typename Derived::Scalar;
  using Work = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  require_finite(input, "svd input");
  const bool transposed = input.rows() < input.cols();
  Work a = transposed ? Work(input.transpose()) : Work(input);
  Work v;
  const int sweeps = detail::hestenes_jacobi(a, v, opt);

  const Eigen::Index k = a.cols();
  VectorX<Scalar> norms(k);
  for (Eigen::Index i = 0; i < k; ++i)
    norms(i) = a.col(i).norm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return norms(x) > norms(y); });

  // Work-space factors: a = U_w S, input_w = U_w S V_w^T.
  Work uw(a.rows(), k), vw(v.rows(), k);
  VectorX<Scalar> sigma(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    const Eigen::Index src = order[static_cast<std::size_t>(c)];
    sigma(c) = norms(src);
    if (sigma(c) > 0)
      uw.col(c) = a.col(src) / sigma(c);
    else
      uw.col(c).setZero();
    vw.col(c) = v.col(src);
  }

  Svd<Scalar> out;
  out.sigma = sigma;
  out.sweeps = sweeps;
  out.u = transposed ? MatrixX<Scalar>(vw) : MatrixX<Scalar>(uw);
  out.v = transposed ? MatrixX<Scalar>(uw) : MatrixX<Scalar>(vw);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg = 0;
    out.u.col(c).cwiseAbs().maxCoeff(&arg);
    if (out.u(arg, c) < 0) {
      out.u.col(c) = -out.u.col(c);
      out.v.col(c) = -out.v.col(c);
    }
  }
  return out;
}

/// Best rank-`rank` approximation A ~ left * right with left = U_r S_r, right = V_r^T.
template <typename Scalar> struct TruncatedSvd {
  MatrixX<Scalar> left;
  MatrixX<Scalar> right;
  VectorX<Scalar> sigma; // full spectrum
};

template <typename Derived>
TruncatedSvd<typename Derived::Scalar>
truncated_svd(const Eigen::MatrixBase<Derived> &a, Eigen::Index rank,
              const SvdOptions<typename Derived::Scalar> &opt = {}) {
  if (rank < 1 || rank > std::min(a.rows(), a.cols()))
    fail(ErrorCode::Parameter, "truncated_svd: rank " + std::to_string(rank) +
                                   " out of range for " + shape_str(a.rows(), a.cols()));
  auto svd = jacobi_svd(a, opt);
  TruncatedSvd<typename Derived::Scalar> out;
  out.left = svd.u.leftCols(rank) * svd.sigma.head(rank).asDiagonal();
  out.right = svd.v.leftCols(rank).transpose();
  out.sigma = std::move(svd.sigma);
  return out;
}

} // namespace loraq
