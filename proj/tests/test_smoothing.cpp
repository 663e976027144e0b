#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>

#include "loraq/quantize.hpp"
#include "loraq/smoothing.hpp"
#include "test_support.hpp"

using namespace loraq;
using namespace loraq::testing;

namespace {

// Activations with one channel 100x larger than the rest.
Matrix outlier_activations(Rng &rng, Eigen::Index rows, Eigen::Index channels, Eigen::Index hot) {
  Matrix x = gaussian(rng, rows, channels);
  x.col(hot) *= 100.0;
  return x;
}

// Independent re-evaluation of one grid candidate, with Eigen's SVD for the branch.
double score_oracle(const Matrix &x, const Matrix &w, double alpha, double beta, int rank,
                    const FormatSpec &q1) {
  Vector gamma(w.rows());
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double a = x.col(i).cwiseAbs().maxCoeff();
    const double b = w.row(i).cwiseAbs().maxCoeff();
    gamma(i) = (a == 0 || b == 0) ? 1.0 : std::pow(a, alpha) / std::pow(b, beta);
  }
  Matrix ws = w;
  Matrix xs = x;
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    ws.row(i) *= gamma(i);
    xs.col(i) /= gamma(i);
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(ws, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Matrix branch = svd.matrixU().leftCols(rank) *
                        svd.singularValues().head(rank).asDiagonal() *
                        svd.matrixV().leftCols(rank).transpose();
  const Matrix w_hat = fake_quant(Matrix(ws - branch), q1) + branch;
  return mean_square(Matrix(xs * w_hat - x * w));
}

} // namespace

TEST_CASE("compute_channel_stats") {
  auto id = compute_channel_stats(Matrix::Identity(3, 3));
  CHECK(id.act_max == Vector::Ones(3));
  CHECK(id.sample_count == 3);
  Matrix x(2, 2);
  x << 1, -5, 2, 3;
  auto s = compute_channel_stats(x);
  CHECK(s.act_max(0) == 2);
  CHECK(s.act_max(1) == 5);
  Rng rng(1);
  Matrix r = gaussian(rng, 100, 16);
  auto rs = compute_channel_stats(r);
  for (Eigen::Index c = 0; c < 16; ++c) {
    double m = 0;
    for (Eigen::Index i = 0; i < 100; ++i)
      m = std::max(m, std::abs(r(i, c)));
    CHECK(rs.act_max(c) == m);
  }
}

TEST_CASE("smoothing_vector examples") {
  Rng rng(2);
  Matrix w = gaussian(rng, 4, 6);
  ChannelStats s{Vector::Constant(4, 4.0), 10};
  CHECK(smoothing_vector(s, w, 0, 0) == Vector::Ones(4));
  Matrix unit = Matrix::Zero(4, 6);
  unit.col(2).setConstant(-1.0);
  CHECK(smoothing_vector(s, unit, 0.5, 0.5) == Vector::Constant(4, 2.0));
  ChannelStats dead{Vector::Zero(4), 10};
  CHECK(smoothing_vector(dead, w, 0.7, 0.2) == Vector::Ones(4));
  Matrix zero_row = w;
  zero_row.row(1).setZero();
  CHECK(smoothing_vector(s, zero_row, 0.5, 0.5)(1) == 1.0);
  CHECK_THROWS_AS(smoothing_vector(s, w, 1.5, 0.5), Error);
  CHECK_THROWS_AS(smoothing_vector(s, w, 0.5, -0.1), Error);
  CHECK_THROWS_AS(smoothing_vector(ChannelStats{Vector::Ones(3), 1}, w, 0.5, 0.5), Error);
}

TEST_CASE("apply_smoothing and product invariance") {
  Matrix w(2, 2);
  w << 1, 2, 3, 4;
  CHECK(apply_smoothing(w, Vector::Ones(2)) == w);
  Vector g(2);
  g << 2, 0.5;
  Matrix ws = apply_smoothing(w, g);
  Matrix expect(2, 2);
  expect << 2, 4, 1.5, 2;
  CHECK(ws == expect);
  Matrix x(3, 2);
  x << 1, 2, -3, 4, 0.5, 7;
  CHECK(rel_diff(Matrix(smooth_activations(x, g) * ws), Matrix(x * w)) < 1e-12);
  CHECK(rel_diff(unsmooth_weight(ws, g), w) == 0);

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    Matrix xr = gaussian(rng, 9, 12), wr = gaussian(rng, 12, 7);
    Vector gr = uniform(rng, 12, 1, 0.01, 50.0);
    CHECK(rel_diff(Matrix(smooth_activations(xr, gr) * apply_smoothing(wr, gr)),
                   Matrix(xr * wr)) <= 1e-10);
  }
  Vector bad(2);
  bad << 1, 0;
  CHECK_THROWS_AS(apply_smoothing(w, bad), Error);
  CHECK_THROWS_AS(smooth_activations(x, Vector::Ones(3)), Error);
}

TEST_CASE("scaling activations scales stats by c and gamma by c^alpha") {
  Rng rng(4);
  Matrix x = gaussian(rng, 30, 8), w = gaussian(rng, 8, 5);
  const double c = 3.7, alpha = 0.6, beta = 0.3;
  auto s1 = compute_channel_stats(x), s2 = compute_channel_stats(Matrix(c * x));
  CHECK((s2.act_max - c * s1.act_max).norm() <= 1e-12 * s2.act_max.norm());
  Vector g1 = smoothing_vector(s1, w, alpha, beta), g2 = smoothing_vector(s2, w, alpha, beta);
  CHECK((g2 - std::pow(c, alpha) * g1).norm() <= 1e-12 * g2.norm());
}

TEST_CASE("default grid") {
  auto grid = default_migration_grid();
  CHECK(grid.size() == 121);
  CHECK(grid.front() == MigrationPair{0.0, 0.0});
  CHECK(grid[1] == MigrationPair{0.0, 0.1});
  CHECK(grid.back() == MigrationPair{1.0, 1.0});
}

TEST_CASE("grid search: singleton and empty grids") {
  Rng rng(5);
  Matrix x = gaussian(rng, 20, 16), w = gaussian(rng, 16, 12);
  auto r = grid_search_migration(x, w, {{0.0, 0.0}}, 4, make_format("MXINT4"));
  CHECK(r.alpha_mig == 0);
  CHECK(r.beta_mig == 0);
  CHECK(r.gamma == Vector::Ones(16));
  CHECK(r.grid_scores.size() == 1);
  CHECK_THROWS_AS(grid_search_migration(x, w, {}, 4, make_format("MXINT4")), Error);
}

TEST_CASE("grid search: ties resolve to the first entry and the optimum is minimal") {
  Rng rng(6);
  Matrix x = gaussian(rng, 20, 16), w = gaussian(rng, 16, 12);
  auto r = grid_search_migration(x, w, {{0.0, 0.0}, {0.0, 0.0}, {0.3, 0.3}}, 4,
                                 make_format("MXINT4"));
  CHECK(r.grid_scores[0] == r.grid_scores[1]);
  for (double s : r.grid_scores)
    CHECK(r.search_score <= s);
  auto full = grid_search_migration(x, w, default_migration_grid(), 4, make_format("MXINT4"));
  CHECK(full.search_score == *std::min_element(full.grid_scores.begin(), full.grid_scores.end()));
}

TEST_CASE("grid search: outlier channel selects a non-trivial migration") {
  Rng rng(7);
  const auto q1 = make_format("MXINT4");
  Matrix x = outlier_activations(rng, 64, 32, 5);
  Matrix w = gaussian(rng, 32, 48, 0.05);
  auto r = grid_search_migration(x, w, default_migration_grid(), 8, q1);
  CHECK(!(r.alpha_mig == 0 && r.beta_mig == 0));
  CHECK(r.search_score < r.grid_scores.front());
  // with activation quantization the benefit is larger still
  auto ra = grid_search_migration(x, w, default_migration_grid(), 8, q1, make_format("MXINT8"));
  CHECK(ra.alpha_mig > 0);
  CHECK(ra.search_score < ra.grid_scores.front());
}

TEST_CASE("grid scores match an independent re-evaluation") {
  Rng rng(8);
  const auto q1 = make_format("MXFP4e2");
  for (int t = 0; t < 3; ++t) {
    Matrix x = outlier_activations(rng, 24, 20, t), w = gaussian(rng, 20, 40);
    std::vector<MigrationPair> grid;
    for (int k = 0; k < 4; ++k)
      grid.emplace_back(uniform(rng, 1, 1, 0, 1)(0, 0), uniform(rng, 1, 1, 0, 1)(0, 0));
    auto r = grid_search_migration(x, w, grid, 6, q1);
    for (std::size_t k = 0; k < grid.size(); ++k)
      CHECK(r.grid_scores[k] ==
            doctest::Approx(score_oracle(x, w, grid[k].first, grid[k].second, 6, q1))
                .epsilon(1e-6));
  }
}
