#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>

#include "loraq/adam.hpp"
#include "loraq/cayley.hpp"
#include "loraq/finite_diff.hpp"
#include "loraq/svd.hpp"
#include "test_support.hpp"

using namespace loraq;
using namespace loraq::testing;

TEST_CASE("make_matrix validates length and finiteness") {
  const double data[] = {1, 2, 3, 4, 5, 6};
  Matrix m = make_matrix(2, 3, data);
  CHECK(m(1, 0) == 4);
  CHECK_THROWS_AS(make_matrix(2, 2, data), Error);
  const double bad[] = {1, std::nan("")};
  try {
    make_matrix(1, 2, bad);
    FAIL("expected throw");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::Numeric);
  }
}

TEST_CASE("matmul checks shapes and is associative") {
  Rng rng(7);
  Matrix a = gaussian(rng, 2, 3);
  CHECK_THROWS_AS(matmul(a, a), Error);
  for (int t = 0; t < 20; ++t) {
    Matrix x = gaussian(rng, 5, 7), y = gaussian(rng, 7, 4), z = gaussian(rng, 4, 6);
    CHECK(rel_diff(matmul(matmul(x, y), z), matmul(x, matmul(y, z))) < 1e-9);
  }
}

TEST_CASE("frobenius_norm and mean_square") {
  Matrix m(2, 2);
  m << 3, 0, 0, 4;
  CHECK(frobenius_norm(m) == doctest::Approx(5));
  CHECK(mean_square(m) == doctest::Approx(25.0 / 4));
  CHECK(mean_square(Matrix(0, 3)) == 0);
}

TEST_CASE("svd: diagonal matrix") {
  Matrix w = Matrix::Zero(3, 3);
  w.diagonal() << 1, 5, 3;
  auto svd = jacobi_svd(w);
  CHECK(svd.sigma(0) == doctest::Approx(5));
  CHECK(svd.sigma(1) == doctest::Approx(3));
  CHECK(svd.sigma(2) == doctest::Approx(1));
  // sign convention: largest-magnitude entry of each left vector is positive
  for (int c = 0; c < 3; ++c) {
    Eigen::Index idx;
    svd.u.col(c).cwiseAbs().maxCoeff(&idx);
    CHECK(svd.u(idx, c) > 0);
  }
}

TEST_CASE("svd: matches Eigen's BDCSVD spectrum and reconstructs") {
  Rng rng(11);
  for (auto [r, c] : {std::pair{12, 7}, {7, 12}, {30, 30}, {1, 5}, {64, 48}}) {
    Matrix a = gaussian(rng, r, c);
    auto svd = jacobi_svd(a);
    Eigen::BDCSVD<Eigen::MatrixXd> ref(a);
    CHECK((svd.sigma - ref.singularValues()).norm() <= 1e-10 * ref.singularValues()(0));
    Matrix back = svd.u * svd.sigma.asDiagonal() * svd.v.transpose();
    CHECK(rel_diff(back, a) < 1e-12);
    const auto k = svd.sigma.size();
    CHECK((svd.u.transpose() * svd.u - Matrix::Identity(k, k)).norm() < 1e-10);
    CHECK((svd.v.transpose() * svd.v - Matrix::Identity(k, k)).norm() < 1e-10);
  }
}

TEST_CASE("svd: deterministic output") {
  Rng rng(3);
  Matrix a = gaussian(rng, 20, 15);
  auto s1 = jacobi_svd(a), s2 = jacobi_svd(a);
  CHECK(bit_equal(s1.u, s2.u));
  CHECK(bit_equal(s1.v, s2.v));
}

TEST_CASE("svd: sweep cap reports non-convergence with the residual") {
  Rng rng(5);
  Matrix a = gaussian(rng, 20, 20);
  SvdOptions<double> opt;
  opt.max_sweeps = 1;
  try {
    jacobi_svd(a, opt);
    FAIL("expected ConvergenceError");
  } catch (const ConvergenceError &e) {
    CHECK(e.code() == ErrorCode::Convergence);
    CHECK(e.residual() > 0);
  }
}

TEST_CASE("svd: single-precision instantiation") {
  Rng rng(9);
  MatrixX<float> a = gaussian(rng, 10, 6).cast<float>();
  SvdOptions<float> opt;
  opt.tolerance = 1e-6f;
  auto svd = jacobi_svd(a, opt);
  MatrixX<float> back = svd.u * svd.sigma.asDiagonal() * svd.v.transpose();
  CHECK((back - a).norm() < 1e-4f * a.norm());
}

TEST_CASE("truncated_svd: residual equals tail energy") {
  Rng rng(21);
  Matrix w = gaussian(rng, 48, 32);
  auto t = truncated_svd(w, 8);
  const double tail = std::sqrt(t.sigma.tail(24).squaredNorm());
  CHECK(frobenius_norm(Matrix(w - t.left * t.right)) == doctest::Approx(tail).epsilon(1e-8));
  CHECK_THROWS_AS(truncated_svd(w, 0), Error);
  CHECK_THROWS_AS(truncated_svd(w, 33), Error);
}

TEST_CASE("truncated_svd: full rank recovers the input") {
  Rng rng(22);
  Matrix w = gaussian(rng, 16, 10);
  auto t = truncated_svd(w, 10);
  CHECK(rel_diff(Matrix(t.left * t.right), w) < 1e-12);
}

TEST_CASE("truncated_svd beats random same-rank competitors") {
  Rng rng(23);
  Matrix w = gaussian(rng, 20, 14);
  auto t = truncated_svd(w, 3);
  const double best = frobenius_norm(Matrix(w - t.left * t.right));
  for (int k = 0; k < 200; ++k) {
    // least-squares fit onto a random rank-3 column space is a strong competitor
    Matrix basis = gaussian(rng, 20, 3);
    Eigen::HouseholderQR<Matrix> qr(basis);
    Matrix q = qr.householderQ() * Matrix::Identity(20, 3);
    CHECK(best <= frobenius_norm(Matrix(w - q * (q.transpose() * w))) + 1e-12);
  }
}

TEST_CASE("adam: minimizes a quadratic") {
  AdamState<double> st(1, 1);
  Matrix x(1, 1);
  x << 1.0;
  for (int i = 0; i < 1000; ++i) {
    Matrix g = 2 * x;
    adam_step(st, x, g, 1e-2);
  }
  CHECK(std::abs(x(0, 0)) < 1e-2);
  CHECK(st.step == 1000);
}

TEST_CASE("adam: first step moves by lr against the gradient sign") {
  AdamState<double> st;
  Matrix x = Matrix::Zero(1, 2);
  Matrix g(1, 2);
  g << 3.0, -0.5;
  adam_step(st, x, g, 0.1);
  CHECK(x(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(x(0, 1) == doctest::Approx(0.1).epsilon(1e-6));
}

TEST_CASE("adam: zero gradient is a no-op on params from any state") {
  Rng rng(4);
  AdamState<double> st(3, 3);
  Matrix x = gaussian(rng, 3, 3);
  const Matrix before = x;
  adam_step(st, x, Matrix(Matrix::Zero(3, 3)), 0.5);
  CHECK(bit_equal(x, before));
}

TEST_CASE("adam: rejects bad inputs without touching state") {
  AdamState<double> st(2, 2);
  Matrix x = Matrix::Ones(2, 2);
  Matrix g = Matrix::Ones(2, 2);
  g(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_step(st, x, g, 0.1), Error);
  CHECK(st.step == 0);
  CHECK(x == Matrix::Ones(2, 2));
  CHECK_THROWS_AS(adam_step(st, x, Matrix(Matrix::Ones(2, 2)), 0.0), Error);
  CHECK_THROWS_AS(adam_step(st, x, Matrix(Matrix::Ones(3, 2)), 0.1), Error);
}

TEST_CASE("cayley: orthogonal for random skew parameters") {
  Rng rng(31);
  for (int t = 0; t < 50; ++t) {
    const auto n = uniform_int(rng, 1, 12);
    SkewParam<double> a(Matrix(gaussian(rng, n, n, 3.0)));
    CHECK((a.matrix() + a.matrix().transpose()).norm() == 0);
    Matrix omega = cayley_retract(a);
    CHECK(orthogonality_defect(omega) <= 1e-10);
    Matrix l = gaussian(rng, 9, n), r = gaussian(rng, n, 7);
    CHECK(rel_diff(Matrix((l * omega) * (omega.transpose() * r)), Matrix(l * r)) <= 1e-9);
  }
}

TEST_CASE("cayley: zero parameter gives the identity") {
  SkewParam<double> a(4);
  CHECK(cayley_retract(a) == Matrix::Identity(4, 4));
  CHECK_THROWS_AS(SkewParam<double>(Matrix(Matrix::Zero(2, 3))), Error);
}

TEST_CASE("skew projection is idempotent") {
  Rng rng(32);
  Matrix g = gaussian(rng, 6, 6);
  Matrix p = skew_part(g);
  CHECK(bit_equal(skew_part(p), p));
}

TEST_CASE("cayley pullback matches finite differences") {
  Rng rng(33);
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index n = 5;
    Matrix target = gaussian(rng, n, n);
    SkewParam<double> a(Matrix(gaussian(rng, n, n, 0.5)));
    // f(Omega) = <target, Omega>, so dF/dOmega = target
    auto f = [&](const Matrix &x) {
      return (target.array() * cayley_retract(SkewParam<double>(x)).array()).sum();
    };
    Matrix omega = cayley_retract(a);
    Matrix analytic = cayley_pullback(a, omega, target);
    // SkewParam projects its input, so FD over an unconstrained matrix yields the projected gradient
    Matrix fd = finite_diff_grad<double>(f, a.matrix(), 1e-6);
    CHECK(rel_diff(analytic, fd) < 1e-7);
  }
}

TEST_CASE("finite_diff_grad: quadratic and trace") {
  Rng rng(41);
  Matrix x = gaussian(rng, 3, 4);
  auto sq = [](const Matrix &m) { return m.squaredNorm(); };
  CHECK(rel_diff(finite_diff_grad<double>(sq, x, 1e-5), Matrix(2 * x)) < 1e-9);
  Matrix s = gaussian(rng, 3, 3);
  auto tr = [](const Matrix &m) { return m.trace(); };
  CHECK(rel_diff(finite_diff_grad<double>(tr, s, 1e-5), Matrix(Matrix::Identity(3, 3))) < 1e-9);
  CHECK_THROWS_AS(finite_diff_grad<double>(sq, x, 0.0), Error);
}
