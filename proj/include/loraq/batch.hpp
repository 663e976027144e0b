#pragma once

#include <string>
#include <vector>

#include "loraq/pipeline.hpp"

namespace loraq {

struct NamedWeight {
  std::string name;
  Matrix weight;
  /// Activations for the matmul report; the identity is used when absent.
  std::optional<Matrix> activations;
};

struct BatchConfig {
  FormatSpec q1 = make_format("SINT4");
  FormatSpec q2 = make_format("SINT4");
  BudgetPolicy policy{512, 4};
  LayerOptions options;
  std::optional<FormatSpec> act_format;
  std::optional<FormatSpec> lowrank_act_format;
};

struct BatchItem {
  std::string name;
  AssembleResult result;
  ErrorReport report;
};

/// Worker cap: LORAQ_THREADS if set to a positive integer, else the hardware count.
unsigned thread_limit();

/// Assembles and reports every weight. Output order is input order; the first error
/// in input order is rethrown after all workers finish.
std::vector<BatchItem> run_batch(const std::vector<NamedWeight> &weights, const BatchConfig &cfg,
                                 unsigned threads = 0);

struct AblationCell {
  bool optimized_lr = false;
  bool rotations = false;
  std::vector<double> weight_err; ///< per input weight, ||W - W_hat||_F
  double mean_weight_err = 0;
  double mean_weight_rel_err = 0;
};

/// The 2x2 toggle grid, cells ordered (off,off), (on,off), (off,on), (on,on) as
/// (optimized_lr, rotations). The toggles in cfg.options are overridden per cell.
std::vector<AblationCell> run_ablation(const std::vector<NamedWeight> &weights,
                                       const BatchConfig &cfg, unsigned threads = 0);

} // namespace loraq
