#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <vector>

#include "loraq/matrix.hpp"

namespace loraq::testing {

using Rng = std::mt19937_64;

inline Matrix gaussian(Rng &rng, Eigen::Index rows, Eigen::Index cols, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = n(rng);
  return m;
}

inline Matrix uniform(Rng &rng, Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = u(rng);
  return m;
}

/// Student-t(3) entries times `scale`.
inline Matrix heavy_tailed(Rng &rng, Eigen::Index rows, Eigen::Index cols, double scale = 0.02) {
  std::student_t_distribution<double> t(3.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = scale * t(rng);
  return m;
}

/// Entries spanning many binades, with exact zeros and sign changes mixed in.
inline Matrix wide_range(Rng &rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> e(-20, 12);
  std::uniform_int_distribution<int> zero(0, 15);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = zero(rng) == 0 ? 0.0 : std::ldexp(n(rng), e(rng));
  return m;
}

inline Eigen::Index uniform_int(Rng &rng, Eigen::Index lo, Eigen::Index hi) {
  return std::uniform_int_distribution<Eigen::Index>(lo, hi)(rng);
}

/// The frozen regression corpus: 20 seeded 96x96 heavy-tailed matrices.
inline std::vector<Matrix> frozen_corpus() {
  std::vector<Matrix> out;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(0xC0FFEE00 + seed);
    out.push_back(heavy_tailed(rng, 96, 96));
  }
  return out;
}

inline double rel_diff(const Matrix &a, const Matrix &b) {
  const double denom = std::max(frobenius_norm(a), frobenius_norm(b));
  return denom > 0 ? frobenius_norm(Matrix(a - b)) / denom : 0.0;
}

/// Bitwise equality, so -0.0 and 0.0 differ and NaNs compare by payload.
inline bool bit_equal(const Matrix &a, const Matrix &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    return false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    std::uint64_t x, y;
    std::memcpy(&x, a.data() + i, 8);
    std::memcpy(&y, b.data() + i, 8);
    if (x != y)
      return false;
  }
  return true;
}

/// Independent fake quantizer for symmetric k-bit integers with a power-of-two block
/// scale: smallest 2^e with qmax * 2^e >= block max, then round half to even and clamp.
inline Matrix naive_int_fake_quant(const Matrix &m, int bits, int block) {
  const double qmax = std::ldexp(1.0, bits - 1) - 1;
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c0 = 0; c0 < m.cols(); c0 += block) {
      const Eigen::Index len = std::min<Eigen::Index>(block, m.cols() - c0);
      double amax = 0;
      for (Eigen::Index c = c0; c < c0 + len; ++c)
        amax = std::max(amax, std::abs(m(r, c)));
      int e = -127;
      while (e < 127 && qmax * std::ldexp(1.0, e) < amax)
        ++e;
      const double scale = std::ldexp(1.0, e);
      for (Eigen::Index c = c0; c < c0 + len; ++c) {
        double q = m(r, c) / scale;
        const double fl = std::floor(q);
        const double frac = q - fl;
        q = frac > 0.5 ? fl + 1 : frac < 0.5 ? fl : (std::fmod(fl, 2.0) == 0 ? fl : fl + 1);
        out(r, c) = std::clamp(q, -qmax, qmax) * scale;
      }
    }
  }
  return out;
}

} // namespace loraq::testing
