#include "loraq/absorber.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "loraq/adam.hpp"
#include "loraq/quantize.hpp"
#include "loraq/svd.hpp"

namespace loraq {
namespace {

void check_shapes(const Matrix &w, const LowRankFactors &f) {
  if (f.left.rows() != w.rows() || f.right.cols() != w.cols() || f.left.cols() != f.right.rows())
    fail(ErrorCode::Shape, "factors " + shape_str(f.left.rows(), f.left.cols()) + " x " +
                               shape_str(f.right.rows(), f.right.cols()) + " do not fit " +
                               shape_str(w.rows(), w.cols()));
}

// E = Q(W + L R) - (W + L R)
Matrix shaped_error(const Matrix &w, const LowRankFactors &f, const FormatSpec &q) {
  check_shapes(w, f);
  const Matrix point = w + f.left * f.right;
  return fake_quant(point, q) - point;
}

} // namespace

LowRankFactors init_factors(const Matrix &w, Eigen::Index rank) {
  auto svd = truncated_svd(w, rank);
  return {-svd.left, std::move(svd.right)};
}

double absorb_loss(const Matrix &w, const LowRankFactors &f, const FormatSpec &q) {
  return mean_square(shaped_error(w, f, q));
}

FactorGradients absorb_gradients(const Matrix &w, const LowRankFactors &f, const FormatSpec &q) {
  const Matrix e = shaped_error(w, f, q);
  const double k = -2.0 / static_cast<double>(e.size());
  return {k * e * f.right.transpose(), k * f.left.transpose() * e};
}

AbsorbResult optimize_factors(const Matrix &w, Eigen::Index rank, const AbsorbConfig &cfg) {
  if (cfg.steps < 0 || !(cfg.learning_rate > 0))
    fail(ErrorCode::Parameter, "absorb config needs steps >= 0 and a positive learning rate");
  require_finite(w, "weight");

  AbsorbResult out;
  LowRankFactors cur = init_factors(w, rank);
  LowRankFactors best = cur;
  AdamState<double> adam_l(cur.left.rows(), cur.left.cols());
  AdamState<double> adam_r(cur.right.rows(), cur.right.cols());
  const double k = -2.0 / static_cast<double>(w.size());

  // Below this the shaped error is rounding noise of W itself (full rank, or W exactly
  // low rank); iterating would only trade factor balance for noise.
  const double noise = 64 * std::numeric_limits<double>::epsilon() * w.cwiseAbs().maxCoeff();
  const double noise_floor = noise * noise;

  double best_loss = std::numeric_limits<double>::infinity();
  for (int step = 0;; ++step) {
    const Matrix point = w + cur.left * cur.right;
    const Matrix e = fake_quant(point, cfg.quantizer) - point;
    const double loss = mean_square(e);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "absorb loss became non-finite at step " << step;
      if (!out.trace.empty())
        msg << "; last finite iterate had loss " << out.trace.back();
      fail(ErrorCode::Numeric, msg.str());
    }
    out.trace.push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best = cur;
      out.best_step = step;
    }
    if (step == cfg.steps || (step == 0 && loss <= noise_floor))
      break;
    Matrix grad_l = k * e * cur.right.transpose();
    Matrix grad_r = k * cur.left.transpose() * e;
    adam_step(adam_l, cur.left, grad_l, cfg.learning_rate);
    adam_step(adam_r, cur.right, grad_r, cfg.learning_rate);
  }

  out.initial_loss = out.trace.front();
  if (cfg.keep_best) {
    out.factors = std::move(best);
    out.best_loss = best_loss;
  } else {
    out.factors = std::move(cur);
    out.best_loss = out.trace.back();
    out.best_step = static_cast<int>(out.trace.size()) - 1;
  }
  return out;
}

} // namespace loraq
