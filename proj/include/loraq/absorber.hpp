#pragma once

#include <cstdint>
#include <vector>

#include "loraq/format.hpp"
#include "loraq/matrix.hpp"

namespace loraq {

/// Factors (L, R) of the error-shaping perturbation: the quantizer sees W + L R.
/// The additive inference branch is A = -L R.
struct LowRankFactors {
  Matrix left;  ///< d x rank
  Matrix right; ///< rank x n

  Eigen::Index rank() const { return left.cols(); }
  /// The branch added at inference time, -L R.
  Matrix branch() const { return -(left * right); }
};

struct AbsorbConfig {
  double learning_rate = 1e-4;
  int steps = 1000;
  FormatSpec quantizer;
  std::uint64_t seed = 0;
  bool keep_best = true;
};

struct AbsorbResult {
  LowRankFactors factors;
  std::vector<double> trace; ///< loss before each update, then the final iterate's loss;
                             ///< just the initial loss if that is already at rounding level
  double initial_loss = 0;
  double best_loss = 0;
  int best_step = 0;
};

/// (L, R) = (-U_r S_r, V_r^T), so W + L R is the optimal rank-r residual of W.
LowRankFactors init_factors(const Matrix &w, Eigen::Index rank);

/// Mean over entries of (Q(W + L R) - W - L R)^2.
double absorb_loss(const Matrix &w, const LowRankFactors &f, const FormatSpec &q);

struct FactorGradients {
  Matrix left;
  Matrix right;
};

/// Straight-through gradients of absorb_loss: with E = Q(W + L R) - W - L R,
/// dL = -2/(d n) E R^T and dR = -2/(d n) L^T E.
FactorGradients absorb_gradients(const Matrix &w, const LowRankFactors &f, const FormatSpec &q);

AbsorbResult optimize_factors(const Matrix &w, Eigen::Index rank, const AbsorbConfig &cfg);

} // namespace loraq
