#pragma once

#include <cmath>
#include <cstdint>

#include "loraq/matrix.hpp"

namespace loraq {

/// Moment estimates for one parameter matrix.
template <typename Scalar> struct AdamState {
  MatrixX<Scalar> first_moment;
  MatrixX<Scalar> second_moment;
  std::int64_t step = 0;
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);

  AdamState() = default;
  AdamState(Eigen::Index rows, Eigen::Index cols)
      : first_moment(MatrixX<Scalar>::Zero(rows, cols)),
        second_moment(MatrixX<Scalar>::Zero(rows, cols)) {}
};

/// One bias-corrected Adam update of `params` in place. A non-finite gradient leaves
/// both `state` and `params` untouched and throws.
template <typename Scalar>
void adam_step(AdamState<Scalar> &state, MatrixX<Scalar> &params, const MatrixX<Scalar> &grad,
               Scalar lr) {
  require_same_shape(params, grad, "adam_step");
  if (state.first_moment.size() == 0) {
    state.first_moment = MatrixX<Scalar>::Zero(params.rows(), params.cols());
    state.second_moment = MatrixX<Scalar>::Zero(params.rows(), params.cols());
  }
  require_same_shape(params, state.first_moment, "adam_step state");
  if (!(lr > 0))
    fail(ErrorCode::Parameter, "adam_step: learning rate must be positive");
  if (!all_finite(grad))
    fail(ErrorCode::Numeric, "adam_step: gradient contains NaN or Inf");

  state.step += 1;
  const Scalar b1 = state.beta1, b2 = state.beta2;
  state.first_moment = b1 * state.first_moment + (1 - b1) * grad;
  state.second_moment = b2 * state.second_moment + (1 - b2) * grad.cwiseProduct(grad);
  const auto t = static_cast<Scalar>(state.step);
  const Scalar c1 = 1 - std::pow(b1, t);
  const Scalar c2 = 1 - std::pow(b2, t);
  params.array() -= lr * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

} // namespace loraq
