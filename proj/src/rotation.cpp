#include "loraq/rotation.hpp"

#include <cmath>
#include <limits>

#include "loraq/adam.hpp"
#include "loraq/quantize.hpp"

namespace loraq {
namespace {

constexpr double kOrthogonalityTolerance = 1e-8;

void check_factor_shapes(const Matrix &left, const Matrix &right, const Matrix &omega) {
  if (left.cols() != right.rows())
    fail(ErrorCode::Shape, "rotation: L is " + shape_str(left.rows(), left.cols()) + " but R is " +
                               shape_str(right.rows(), right.cols()));
  if (omega.rows() != omega.cols() || omega.rows() != left.cols())
    fail(ErrorCode::Shape, "rotation matrix " + shape_str(omega.rows(), omega.cols()) +
                               " does not match rank " + std::to_string(left.cols()));
}

struct Evaluation {
  Matrix rotated_left;  // L Omega
  Matrix rotated_right; // Omega^T R
  Matrix err_left;      // Q(L Omega) - L Omega
  Matrix err_right;     // Q(Omega^T R) - Omega^T R
  double loss = 0;
};

Evaluation evaluate(const Matrix &left, const Matrix &right, const Matrix &omega,
                    const FormatSpec &q) {
  Evaluation ev;
  ev.rotated_left = left * omega;
  ev.rotated_right = omega.transpose() * right;
  ev.err_left = fake_quant(ev.rotated_left, q) - ev.rotated_left;
  ev.err_right = fake_quant(ev.rotated_right, q) - ev.rotated_right;
  ev.loss = mean_square(ev.err_left) + mean_square(ev.err_right);
  return ev;
}

// d loss / d Omega with the quantizer outputs held fixed.
Matrix omega_gradient(const Matrix &left, const Matrix &right, const Evaluation &ev) {
  const double kl = -2.0 / static_cast<double>(ev.err_left.size());
  const double kr = -2.0 / static_cast<double>(ev.err_right.size());
  return kl * left.transpose() * ev.err_left + kr * right * ev.err_right.transpose();
}

} // namespace

double rotation_loss(const Matrix &left, const Matrix &right, const Matrix &omega,
                     const FormatSpec &q) {
  check_factor_shapes(left, right, omega);
  if (orthogonality_defect(omega) > kOrthogonalityTolerance)
    fail(ErrorCode::Precondition, "rotation_loss: Omega is not orthogonal");
  return evaluate(left, right, omega, q).loss;
}

Matrix rotation_gradient(const Matrix &left, const Matrix &right, const SkewParam<double> &a,
                         const FormatSpec &q) {
  const Matrix omega = cayley_retract(a);
  check_factor_shapes(left, right, omega);
  const Evaluation ev = evaluate(left, right, omega, q);
  return cayley_pullback(a, omega, omega_gradient(left, right, ev));
}

RotationResult optimize_rotation(const Matrix &left, const Matrix &right,
                                 const RotationConfig &cfg) {
  if (cfg.steps < 0 || !(cfg.learning_rate > 0))
    fail(ErrorCode::Parameter, "rotation config needs steps >= 0 and a positive learning rate");
  if (left.cols() != right.rows())
    fail(ErrorCode::Shape, "rotation: L.cols != R.rows");
  const Eigen::Index rank = left.cols();

  SkewParam<double> a(rank);
  Matrix params = a.matrix();
  AdamState<double> adam(rank, rank);
  RotationResult out;
  out.omega = Matrix::Identity(rank, rank);
  double best = std::numeric_limits<double>::infinity();
  Matrix last_omega = out.omega;

  for (int step = 0;; ++step) {
    const Matrix omega = cayley_retract(a);
    const Evaluation ev = evaluate(left, right, omega, cfg.quantizer);
    if (!std::isfinite(ev.loss))
      fail(ErrorCode::Numeric, "rotation loss became non-finite at step " + std::to_string(step));
    out.trace.push_back(ev.loss);
    last_omega = omega;
    if (ev.loss < best && orthogonality_defect(omega) <= 1e-10) {
      best = ev.loss;
      out.omega = omega;
      out.best_step = step;
    }
    if (step == cfg.steps)
      break;
    const Matrix grad = cayley_pullback(a, omega, omega_gradient(left, right, ev));
    adam_step(adam, params, grad, cfg.learning_rate);
    a.assign(params);
    params = a.matrix();
  }
  out.identity_loss = out.trace.front();
  if (cfg.keep_best) {
    out.best_loss = best;
  } else {
    out.omega = last_omega;
    out.best_loss = out.trace.back();
    out.best_step = cfg.steps;
  }
  return out;
}

FusedFactors fuse_rotation(const Matrix &left, const Matrix &right, const Matrix &omega) {
  check_factor_shapes(left, right, omega);
  return {left * omega, omega.transpose() * right};
}

} // namespace loraq
