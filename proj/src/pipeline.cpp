#include "loraq/pipeline.hpp"

#include <algorithm>

#include "loraq/svd.hpp"

namespace loraq {

Eigen::Index rank_for_budget(const BudgetPolicy &policy) {
  if (policy.lowrank_bits <= 0 || policy.budget_bits_per_channel <= 0)
    fail(ErrorCode::Budget, "budget and bits per value must be positive");
  const Eigen::Index rank = policy.budget_bits_per_channel / policy.lowrank_bits;
  if (rank < 1)
    fail(ErrorCode::Budget, "budget of " + std::to_string(policy.budget_bits_per_channel) +
                                " bits/channel cannot hold one " +
                                std::to_string(policy.lowrank_bits) + "-bit value");
  return rank;
}

AbsorbConfig default_absorb_config(const FormatSpec &q1) {
  AbsorbConfig cfg;
  cfg.quantizer = q1;
  cfg.steps = 1000;
  cfg.learning_rate = (q1.scale_kind == ScaleKind::E8m0 && q1.is_float()) ? 1e-3 : 1e-4;
  return cfg;
}

RotationConfig default_rotation_config(const FormatSpec &q2) {
  RotationConfig cfg;
  cfg.quantizer = q2;
  cfg.steps = 500;
  cfg.learning_rate = q2.scale_kind == ScaleKind::Fp16 ? 5e-1 : 1e-1;
  return cfg;
}

AssembleResult assemble_layer(const Matrix &w_in, const FormatSpec &q1, const FormatSpec &q2,
                              const BudgetPolicy &policy, const LayerOptions &opts) {
  require_finite(w_in, "weight");
  if (w_in.size() == 0)
    fail(ErrorCode::Shape, "weight matrix is empty");
  AssembleResult out;
  BundleMeta &meta = out.bundle.meta;
  meta.rows = w_in.rows();
  meta.cols = w_in.cols();
  meta.budget_bits_per_channel = policy.budget_bits_per_channel;
  meta.lowrank_bits = q2.bits_per_value;
  meta.optimized_lr = opts.optimized_lr;
  meta.rotations = opts.rotations;

  // Rank: explicit override or floor(budget / bits), capped at min(d, n).
  Eigen::Index rank;
  if (opts.rank_override) {
    rank = *opts.rank_override;
    meta.rank_overridden = true;
    if (rank < 1)
      fail(ErrorCode::Parameter, "rank override must be at least 1");
  } else {
    rank = rank_for_budget({policy.budget_bits_per_channel, q2.bits_per_value});
  }
  meta.requested_rank = rank;
  const Eigen::Index max_rank = std::min(w_in.rows(), w_in.cols());
  if (rank > max_rank) {
    out.warnings.push_back("rank " + std::to_string(rank) + " exceeds min(d, n) = " +
                           std::to_string(max_rank) + "; capped");
    rank = max_rank;
    meta.rank_capped = true;
  }
  meta.rank = rank;

  // (1) smoothing
  Matrix w = w_in;
  if (opts.smoothing) {
    const SmoothingOptions &sm = *opts.smoothing;
    if (sm.calibration) {
      const Eigen::Index srank = std::min(sm.rank.value_or(rank), max_rank);
      auto found = grid_search_migration(*sm.calibration, w_in, sm.grid, srank, q1, sm.act_format);
      meta.smoothing_source = "calibration";
      meta.alpha_mig = found.alpha_mig;
      meta.beta_mig = found.beta_mig;
      meta.smoothing_score = found.search_score;
      meta.smoothing_rank = srank;
      out.bundle.gamma = std::move(found.gamma);
    } else if (sm.stats) {
      meta.smoothing_source = "stats";
      meta.alpha_mig = sm.alpha;
      meta.beta_mig = sm.beta;
      out.bundle.gamma = smoothing_vector(*sm.stats, w_in, sm.alpha, sm.beta);
    }
    if (out.bundle.gamma) {
      meta.smoothed = true;
      w = apply_smoothing(w_in, *out.bundle.gamma);
    }
  }

  // (2)-(3) SVD init, optionally refined against Q1
  AbsorbConfig acfg = opts.absorb.value_or(default_absorb_config(q1));
  acfg.quantizer = q1;
  meta.absorb_learning_rate = acfg.learning_rate;
  meta.absorb_steps = acfg.steps;
  meta.absorb_seed = acfg.seed;
  meta.absorb_keep_best = acfg.keep_best;
  LowRankFactors factors;
  if (opts.optimized_lr) {
    AbsorbResult res = optimize_factors(w, rank, acfg);
    factors = std::move(res.factors);
    meta.absorb_initial_loss = res.initial_loss;
    meta.absorb_best_loss = res.best_loss;
    meta.absorb_best_step = res.best_step;
    out.absorb_trace = std::move(res.trace);
  } else {
    factors = init_factors(w, rank);
    meta.absorb_initial_loss = meta.absorb_best_loss = absorb_loss(w, factors, q1);
    out.absorb_trace = {meta.absorb_initial_loss};
  }

  // (4) additive branch A = L_b R_b with L_b = -L
  Matrix branch_left = -factors.left;
  Matrix branch_right = std::move(factors.right);

  // (5) rotation against Q2, fused into the factors
  RotationConfig rcfg = opts.rotation.value_or(default_rotation_config(q2));
  rcfg.quantizer = q2;
  meta.rotation_learning_rate = rcfg.learning_rate;
  meta.rotation_steps = rcfg.steps;
  meta.rotation_seed = rcfg.seed;
  meta.rotation_keep_best = rcfg.keep_best;
  if (opts.rotations) {
    RotationResult rot = optimize_rotation(branch_left, branch_right, rcfg);
    auto fused = fuse_rotation(branch_left, branch_right, rot.omega);
    branch_left = std::move(fused.left);
    branch_right = std::move(fused.right);
    meta.rotation_identity_loss = rot.identity_loss;
    meta.rotation_best_loss = rot.best_loss;
    meta.rotation_best_step = rot.best_step;
    out.rotation_trace = std::move(rot.trace);
  } else {
    const Matrix id = Matrix::Identity(rank, rank);
    meta.rotation_identity_loss = meta.rotation_best_loss =
        rotation_loss(branch_left, branch_right, id, q2);
    out.rotation_trace = {meta.rotation_identity_loss};
  }

  // (6)-(7) quantize the branch, then the residual it leaves behind
  out.bundle.lowrank_left = quantize_blockwise(branch_left, q2);
  out.bundle.lowrank_right = quantize_blockwise(branch_right, q2);
  const Matrix a_q = dequantize(out.bundle.lowrank_left) * dequantize(out.bundle.lowrank_right);
  out.bundle.residual = quantize_blockwise(w - a_q, q1);
  return out;
}

void validate_bundle(const LayerBundle &b) {
  const auto &m = b.meta;
  if (b.residual.rows != m.rows || b.residual.cols != m.cols)
    fail(ErrorCode::Format, "residual shape does not match metadata");
  if (b.lowrank_left.rows != m.rows || b.lowrank_left.cols != m.rank)
    fail(ErrorCode::Format, "low-rank left factor shape does not match metadata");
  if (b.lowrank_right.rows != m.rank || b.lowrank_right.cols != m.cols)
    fail(ErrorCode::Format, "low-rank right factor shape does not match metadata");
  if (!(b.lowrank_left.format == b.lowrank_right.format))
    fail(ErrorCode::Format, "low-rank factors use different formats");
  if (b.gamma && b.gamma->size() != m.rows)
    fail(ErrorCode::Format, "smoothing vector length does not match metadata");
  if (b.gamma && !((b.gamma->array() > 0).all() && b.gamma->array().isFinite().all()))
    fail(ErrorCode::Format, "smoothing vector must be positive and finite");
}

Matrix lowrank_branch(const LayerBundle &b) {
  validate_bundle(b);
  return dequantize(b.lowrank_left) * dequantize(b.lowrank_right);
}

Matrix reconstruct_weight(const LayerBundle &b) {
  validate_bundle(b);
  return dequantize(b.residual) + lowrank_branch(b);
}

Matrix desmoothed_weight(const LayerBundle &b) {
  Matrix w_hat = reconstruct_weight(b);
  return b.gamma ? unsmooth_weight(w_hat, *b.gamma) : w_hat;
}

namespace {

Matrix smoothed_input(const LayerBundle &b, const Matrix &x) {
  if (x.cols() != b.meta.rows)
    fail(ErrorCode::Shape, "activations " + shape_str(x.rows(), x.cols()) + " do not feed a " +
                               shape_str(b.meta.rows, b.meta.cols) + " layer");
  require_finite(x, "activations");
  return b.gamma ? smooth_activations(x, *b.gamma) : x;
}

} // namespace

Matrix forward(const LayerBundle &b, const Matrix &x, const std::optional<FormatSpec> &act_format,
               const std::optional<FormatSpec> &lowrank_act_format) {
  validate_bundle(b);
  const Matrix xs = smoothed_input(b, x);
  const Matrix x_res = act_format ? fake_quant(xs, *act_format) : xs;
  const Matrix x_lr = lowrank_act_format ? fake_quant(xs, *lowrank_act_format) : x_res;
  return x_res * dequantize(b.residual) +
         (x_lr * dequantize(b.lowrank_left)) * dequantize(b.lowrank_right);
}

BudgetAccounting budget_accounting(const LayerBundle &b) {
  BudgetAccounting acc;
  acc.rank = b.meta.rank;
  acc.bits_per_value = b.lowrank_left.format.bits_per_value;
  acc.payload_bits_per_channel = acc.rank * acc.bits_per_value;
  const int scale_bits = b.lowrank_left.format.scale_kind == ScaleKind::E8m0   ? 8
                         : b.lowrank_left.format.scale_kind == ScaleKind::Fp16 ? 16
                                                                               : 0;
  acc.scale_bits_total = static_cast<std::int64_t>(b.lowrank_left.expected_scale_count() +
                                                   b.lowrank_right.expected_scale_count()) *
                         scale_bits;
  acc.budget_bits_per_channel = b.meta.budget_bits_per_channel;
  return acc;
}

} // namespace loraq
