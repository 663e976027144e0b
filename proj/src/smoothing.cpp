#include "loraq/smoothing.hpp"

#include <cmath>
#include <limits>

#include "loraq/quantize.hpp"
#include "loraq/svd.hpp"

namespace loraq {
namespace {

void check_gamma(const Vector &gamma, Eigen::Index channels) {
  if (gamma.size() != channels)
    fail(ErrorCode::Shape, "smoothing vector has " + std::to_string(gamma.size()) +
                               " entries, expected " + std::to_string(channels));
  if (!((gamma.array() > 0).all() && gamma.array().isFinite().all()))
    fail(ErrorCode::Parameter, "smoothing vector entries must be positive and finite");
}

} // namespace

ChannelStats compute_channel_stats(const Matrix &x) {
  require_finite(x, "calibration activations");
  ChannelStats s;
  s.sample_count = static_cast<std::uint64_t>(x.rows());
  s.act_max = x.rows() == 0 ? Vector(Vector::Zero(x.cols()))
                            : Vector(x.cwiseAbs().colwise().maxCoeff().transpose());
  return s;
}

Vector smoothing_vector(const ChannelStats &stats, const Matrix &w, double alpha_mig,
                        double beta_mig) {
  if (!(alpha_mig >= 0 && alpha_mig <= 1 && beta_mig >= 0 && beta_mig <= 1))
    fail(ErrorCode::Parameter, "migration strengths must lie in [0, 1]");
  if (stats.act_max.size() != w.rows())
    fail(ErrorCode::Shape, "channel stats cover " + std::to_string(stats.act_max.size()) +
                               " channels, weight has " + std::to_string(w.rows()));
  if (!((stats.act_max.array() >= 0).all() && stats.act_max.array().isFinite().all()))
    fail(ErrorCode::Parameter, "channel stats must be finite and non-negative");
  Vector gamma(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double a = stats.act_max(i);
    const double wmax = w.row(i).cwiseAbs().maxCoeff();
    if (a == 0 || wmax == 0) {
      gamma(i) = 1.0;
      continue;
    }
    gamma(i) = std::pow(a, alpha_mig) / std::pow(wmax, beta_mig);
  }
  if (!gamma.array().isFinite().all() || !(gamma.array() > 0).all())
    fail(ErrorCode::Numeric, "smoothing vector overflowed");
  return gamma;
}

Matrix apply_smoothing(const Matrix &w, const Vector &gamma) {
  check_gamma(gamma, w.rows());
  return gamma.asDiagonal() * w;
}

Matrix smooth_activations(const Matrix &x, const Vector &gamma) {
  check_gamma(gamma, x.cols());
  return x * gamma.cwiseInverse().asDiagonal();
}

Matrix unsmooth_weight(const Matrix &w, const Vector &gamma) {
  check_gamma(gamma, w.rows());
  return gamma.cwiseInverse().asDiagonal() * w;
}

std::vector<MigrationPair> default_migration_grid() {
  std::vector<MigrationPair> grid;
  for (int a = 0; a <= 10; ++a)
    for (int b = 0; b <= 10; ++b)
      grid.emplace_back(a / 10.0, b / 10.0);
  return grid;
}

double migration_score(const Matrix &x_cal, const Matrix &w, const Vector &gamma,
                       Eigen::Index rank, const FormatSpec &q1,
                       const std::optional<FormatSpec> &act_format) {
  if (x_cal.cols() != w.rows())
    fail(ErrorCode::Shape, "calibration activations " + shape_str(x_cal.rows(), x_cal.cols()) +
                               " do not feed weight " + shape_str(w.rows(), w.cols()));
  const Matrix ws = apply_smoothing(w, gamma);
  const Matrix xs = smooth_activations(x_cal, gamma);
  const auto svd = truncated_svd(ws, rank);
  const Matrix branch = svd.left * svd.right;
  const Matrix w_hat = fake_quant(ws - branch, q1) + branch;
  const Matrix xq = act_format ? fake_quant(xs, *act_format) : xs;
  return mean_square(Matrix(xq * w_hat - x_cal * w));
}

SmoothingResult grid_search_migration(const Matrix &x_cal, const Matrix &w,
                                      const std::vector<MigrationPair> &grid, Eigen::Index rank,
                                      const FormatSpec &q1,
                                      const std::optional<FormatSpec> &act_format) {
  if (grid.empty())
    fail(ErrorCode::Parameter, "migration grid is empty");
  const ChannelStats stats = compute_channel_stats(x_cal);
  SmoothingResult best;
  best.search_score = std::numeric_limits<double>::infinity();
  best.grid_scores.reserve(grid.size());
  for (const auto &[alpha, beta] : grid) {
    Vector gamma = smoothing_vector(stats, w, alpha, beta);
    const double score = migration_score(x_cal, w, gamma, rank, q1, act_format);
    best.grid_scores.push_back(score);
    if (score < best.search_score) {
      best.search_score = score;
      best.alpha_mig = alpha;
      best.beta_mig = beta;
      best.gamma = std::move(gamma);
    }
  }
  if (!std::isfinite(best.search_score))
    fail(ErrorCode::Numeric, "every migration candidate produced a non-finite score");
  return best;
}

} // namespace loraq
