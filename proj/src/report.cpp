#include <cmath>
#include <limits>
#include <sstream>

#include "loraq/pipeline.hpp"

namespace loraq {

ErrorReport error_report(const Matrix &w, const Matrix &x, const LayerBundle &b,
                         const std::optional<FormatSpec> &act_format,
                         const std::optional<FormatSpec> &lowrank_act_format) {
  validate_bundle(b);
  if (w.rows() != b.meta.rows || w.cols() != b.meta.cols)
    fail(ErrorCode::Shape, "weight " + shape_str(w.rows(), w.cols()) + " does not match bundle " +
                               shape_str(b.meta.rows, b.meta.cols));
  if (x.cols() != w.rows())
    fail(ErrorCode::Shape, "activations " + shape_str(x.rows(), x.cols()) + " do not feed weight " +
                               shape_str(w.rows(), w.cols()));
  require_finite(w, "weight");
  require_finite(x, "activations");

  const Matrix a_q = lowrank_branch(b);
  const Matrix w_hat_s = dequantize(b.residual) + a_q;
  const Matrix w_s = b.gamma ? apply_smoothing(w, *b.gamma) : w;
  const Matrix x_s = b.gamma ? smooth_activations(x, *b.gamma) : x;
  const Matrix w_hat = b.gamma ? unsmooth_weight(w_hat_s, *b.gamma) : w_hat_s;

  const Matrix x_res = act_format ? fake_quant(x_s, *act_format) : x_s;
  const Matrix x_lr = lowrank_act_format ? fake_quant(x_s, *lowrank_act_format) : x_res;

  ErrorReport r;
  const double w_norm = frobenius_norm(w);
  r.weight_err = frobenius_norm(Matrix(w - w_hat));
  r.weight_rel_err = w_norm > 0 ? r.weight_err / w_norm : 0.0;
  r.weight_err_smoothed = frobenius_norm(Matrix(w_s - w_hat_s));

  const Matrix exact = x * w;
  const Matrix y = forward(b, x, act_format, lowrank_act_format);
  r.matmul_err = frobenius_norm(Matrix(exact - y));
  const double y_norm = frobenius_norm(exact);
  r.matmul_rel_err = y_norm > 0 ? r.matmul_err / y_norm : 0.0;

  r.act_quant_err = frobenius_norm(Matrix(x_s - x_res));
  r.act_quant_norm = frobenius_norm(x_res);
  r.weight_norm = frobenius_norm(w_s);
  r.mixed_act_term = frobenius_norm(Matrix(x_res - x_lr)) * frobenius_norm(a_q);
  r.bound_rhs =
      r.act_quant_err * r.weight_norm + r.act_quant_norm * r.weight_err_smoothed + r.mixed_act_term;

  r.residual_mse = mean_square(Matrix(w_hat_s - w_s));
  r.lowrank_mse = b.meta.rotation_best_loss;

  // Both sides carry floating-point rounding from the products above.
  const double slack = 1e-12 * (frobenius_norm(x) * w_norm + frobenius_norm(x_s) * r.weight_norm);
  if (!(r.matmul_err <= r.bound_rhs + slack)) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "matmul error " << r.matmul_err << " exceeds its upper bound " << r.bound_rhs;
    fail(ErrorCode::Numeric, msg.str());
  }
  return r;
}

} // namespace loraq
