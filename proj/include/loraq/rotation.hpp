#pragma once

#include <cstdint>
#include <vector>

#include "loraq/cayley.hpp"
#include "loraq/format.hpp"
#include "loraq/matrix.hpp"

namespace loraq {

struct RotationConfig {
  double learning_rate = 1e-1;
  int steps = 500;
  FormatSpec quantizer;
  std::uint64_t seed = 0;
  bool keep_best = true;
};

struct RotationResult {
  Matrix omega; ///< best accepted rotation, orthogonal
  std::vector<double> trace;
  double identity_loss = 0;
  double best_loss = 0;
  int best_step = 0;
};

/// MSE(Q(L Omega), L Omega) + MSE(Q(Omega^T R), Omega^T R), each a mean over its own entries.
/// Throws Precondition when Omega is not orthogonal to 1e-8.
double rotation_loss(const Matrix &left, const Matrix &right, const Matrix &omega,
                     const FormatSpec &q);

/// Skew-projected gradient of rotation_loss(L, R, cayley(A)) with the quantizer outputs frozen.
Matrix rotation_gradient(const Matrix &left, const Matrix &right, const SkewParam<double> &a,
                         const FormatSpec &q);

/// Adam over the skew parameter, starting at A = 0 (Omega = I).
RotationResult optimize_rotation(const Matrix &left, const Matrix &right, const RotationConfig &cfg);

struct FusedFactors {
  Matrix left;  ///< L Omega
  Matrix right; ///< Omega^T R
};

FusedFactors fuse_rotation(const Matrix &left, const Matrix &right, const Matrix &omega);

} // namespace loraq
