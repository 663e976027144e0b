#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "loraq/format.hpp"
#include "loraq/matrix.hpp"

namespace loraq {

/// Per-input-channel activation statistic max_j |X_{j,i}|.
struct ChannelStats {
  Vector act_max;
  std::uint64_t sample_count = 0;

  friend bool operator==(const ChannelStats &a, const ChannelStats &b) {
    return a.sample_count == b.sample_count && a.act_max.size() == b.act_max.size() &&
           a.act_max == b.act_max;
  }
};

using MigrationPair = std::pair<double, double>; // (alpha, beta_mig)

struct SmoothingResult {
  Vector gamma;
  double alpha_mig = 0;
  double beta_mig = 0;
  double search_score = 0;
  std::vector<double> grid_scores; ///< one per grid entry, in grid order
};

ChannelStats compute_channel_stats(const Matrix &x);

/// gamma_i = act_max_i^alpha / max_j |W_ij|^beta; channels with a zero statistic get 1.
Vector smoothing_vector(const ChannelStats &stats, const Matrix &w, double alpha_mig,
                        double beta_mig);

/// diag(gamma) W
Matrix apply_smoothing(const Matrix &w, const Vector &gamma);
/// X diag(gamma)^{-1}
Matrix smooth_activations(const Matrix &x, const Vector &gamma);
/// diag(gamma)^{-1} W, the inverse of apply_smoothing.
Matrix unsmooth_weight(const Matrix &w, const Vector &gamma);

/// {0, 0.1, ..., 1.0}^2 in row-major (alpha outer) order.
std::vector<MigrationPair> default_migration_grid();

/// Output MSE of one candidate: smooth, take the rank-`rank` SVD branch at full precision,
/// quantize the residual with `q1` (activations with `act_format` when given), and compare
/// X' W_hat' against X W.
double migration_score(const Matrix &x_cal, const Matrix &w, const Vector &gamma,
                       Eigen::Index rank, const FormatSpec &q1,
                       const std::optional<FormatSpec> &act_format = std::nullopt);

/// Scores every grid entry and returns the lowest (first on ties).
SmoothingResult grid_search_migration(const Matrix &x_cal, const Matrix &w,
                                      const std::vector<MigrationPair> &grid, Eigen::Index rank,
                                      const FormatSpec &q1,
                                      const std::optional<FormatSpec> &act_format = std::nullopt);

} // namespace loraq
