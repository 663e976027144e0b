#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "loraq/absorber.hpp"
#include "loraq/quantize.hpp"
#include "loraq/rotation.hpp"
#include "loraq/smoothing.hpp"

namespace loraq {

/// Bits per input channel allotted to the low-rank branch, and the branch's bits per value.
struct BudgetPolicy {
  int budget_bits_per_channel = 512;
  int lowrank_bits = 16;
};

/// floor(budget / bits); throws Budget when that is below one.
Eigen::Index rank_for_budget(const BudgetPolicy &policy);

/// Factor optimizer defaults for a residual quantizer: 1e-3 for minifloat MX formats,
/// 1e-4 otherwise, 1000 steps.
AbsorbConfig default_absorb_config(const FormatSpec &q1);
/// Rotation defaults for a branch quantizer: 5e-1 for SINT4, 1e-1 otherwise, 500 steps.
RotationConfig default_rotation_config(const FormatSpec &q2);

struct SmoothingOptions {
  /// Raw calibration activations: migration strengths are grid-searched.
  std::optional<Matrix> calibration;
  /// Precomputed statistics only: gamma is built from `alpha`/`beta` directly.
  std::optional<ChannelStats> stats;
  std::vector<MigrationPair> grid = default_migration_grid();
  double alpha = 0.5;
  double beta = 0.5;
  /// SVD rank used while scoring; defaults to the layer rank.
  std::optional<Eigen::Index> rank;
  std::optional<FormatSpec> act_format;
};

struct LayerOptions {
  bool optimized_lr = true;
  bool rotations = true;
  std::optional<Eigen::Index> rank_override;
  std::optional<AbsorbConfig> absorb;      ///< quantizer field is always forced to Q1
  std::optional<RotationConfig> rotation;  ///< quantizer field is always forced to Q2
  std::optional<SmoothingOptions> smoothing;
};

/// Everything needed to reproduce a bundle, plus the losses observed while building it.
struct BundleMeta {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t rank = 0;
  std::int64_t requested_rank = 0;
  bool rank_capped = false;
  bool rank_overridden = false;
  int budget_bits_per_channel = 0;
  int lowrank_bits = 0;

  bool optimized_lr = false;
  bool rotations = false;

  double absorb_learning_rate = 0;
  int absorb_steps = 0;
  std::uint64_t absorb_seed = 0;
  bool absorb_keep_best = true;
  double absorb_initial_loss = 0;
  double absorb_best_loss = 0;
  int absorb_best_step = 0;

  double rotation_learning_rate = 0;
  int rotation_steps = 0;
  std::uint64_t rotation_seed = 0;
  bool rotation_keep_best = true;
  double rotation_identity_loss = 0;
  double rotation_best_loss = 0;
  int rotation_best_step = 0;

  bool smoothed = false;
  std::string smoothing_source; ///< "", "calibration" or "stats"
  double alpha_mig = 0;
  double beta_mig = 0;
  double smoothing_score = 0;
  std::int64_t smoothing_rank = 0;

  friend bool operator==(const BundleMeta &, const BundleMeta &) = default;
};

/// A quantized linear layer: W' ~ dequant(residual) + dequant(L) dequant(R), where
/// W' = diag(gamma) W when smoothing was applied.
struct LayerBundle {
  QuantizedTensor residual;      ///< Q1 codes of P = W' - A_q, d x n
  QuantizedTensor lowrank_left;  ///< Q2 codes of the fused left factor, d x rank
  QuantizedTensor lowrank_right; ///< Q2 codes of the fused right factor, rank x n
  std::optional<Vector> gamma;   ///< absent means identity smoothing
  BundleMeta meta;

  friend bool operator==(const LayerBundle &a, const LayerBundle &b) {
    return a.residual == b.residual && a.lowrank_left == b.lowrank_left &&
           a.lowrank_right == b.lowrank_right && a.gamma.has_value() == b.gamma.has_value() &&
           (!a.gamma || (a.gamma->size() == b.gamma->size() && *a.gamma == *b.gamma)) &&
           a.meta == b.meta;
  }
};

struct AssembleResult {
  LayerBundle bundle;
  std::vector<double> absorb_trace;
  std::vector<double> rotation_trace;
  std::vector<std::string> warnings;
};

AssembleResult assemble_layer(const Matrix &w, const FormatSpec &q1, const FormatSpec &q2,
                              const BudgetPolicy &policy, const LayerOptions &opts = {});

/// Validates tensor shapes and formats against each other and the metadata.
void validate_bundle(const LayerBundle &b);

/// Dequantized low-rank product A_q.
Matrix lowrank_branch(const LayerBundle &b);
/// W_hat' in the (possibly smoothed) coordinates the bundle was built in.
Matrix reconstruct_weight(const LayerBundle &b);
/// diag(gamma)^{-1} W_hat', comparable with the original weight.
Matrix desmoothed_weight(const LayerBundle &b);

/// Y = Q_res(X') dequant(residual) + Q_lr(X') A_q with X' = X diag(gamma)^{-1}.
/// The low-rank branch uses `act_format` unless `lowrank_act_format` is given.
Matrix forward(const LayerBundle &b, const Matrix &x,
               const std::optional<FormatSpec> &act_format = std::nullopt,
               const std::optional<FormatSpec> &lowrank_act_format = std::nullopt);

/// Payload bits per input channel of the low-rank branch (rank x bits), and the
/// per-block scale bits reported separately.
struct BudgetAccounting {
  std::int64_t rank = 0;
  int bits_per_value = 0;
  std::int64_t payload_bits_per_channel = 0;
  std::int64_t scale_bits_total = 0;
  std::int64_t budget_bits_per_channel = 0;
};
BudgetAccounting budget_accounting(const LayerBundle &b);

struct ErrorReport {
  double weight_err = 0;          ///< ||W - W_hat||_F, original coordinates
  double weight_rel_err = 0;
  double weight_err_smoothed = 0; ///< ||W' - W_hat'||_F
  double matmul_err = 0;          ///< ||X W - Y||_F
  double matmul_rel_err = 0;
  double bound_rhs = 0;
  double act_quant_err = 0;  ///< ||X' - Q(X')||_F
  double act_quant_norm = 0; ///< ||Q(X')||_F
  double weight_norm = 0;    ///< ||W'||_F
  double mixed_act_term = 0; ///< ||Q_res(X') - Q_lr(X')||_F ||A_q||_F
  double residual_mse = 0;   ///< mean (Q1(P) - P)^2 with P = W' - A_q
  double lowrank_mse = 0;    ///< rotation-stage quantization MSE of the stored factors
};

/// Matmul error of the bundle against X W and its upper bound
/// ||X' - Q(X')|| ||W'|| + ||Q(X')|| ||W' - W_hat'|| (+ the mixed-format term).
/// Throws Numeric if the bound is violated beyond rounding slack.
ErrorReport error_report(const Matrix &w, const Matrix &x, const LayerBundle &b,
                         const std::optional<FormatSpec> &act_format = std::nullopt,
                         const std::optional<FormatSpec> &lowrank_act_format = std::nullopt);

} // namespace loraq
