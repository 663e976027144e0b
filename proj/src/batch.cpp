#include "loraq/batch.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>

namespace loraq {
namespace {

// Runs job(i) for i in [0, n) on up to `threads` workers.
template <typename Job> void parallel_for(std::size_t n, unsigned threads, Job &&job) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned count = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < count; ++t)
      pool.emplace_back(worker);
  }
  for (auto &e : errors)
    if (e)
      std::rethrow_exception(e);
}

} // namespace

unsigned thread_limit() {
  if (const char *env = std::getenv("LORAQ_THREADS")) {
    char *end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0)
      return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<BatchItem> run_batch(const std::vector<NamedWeight> &weights, const BatchConfig &cfg,
                                 unsigned threads) {
  std::vector<BatchItem> out(weights.size());
  parallel_for(weights.size(), threads ? threads : thread_limit(), [&](std::size_t i) {
    const NamedWeight &nw = weights[i];
    BatchItem &item = out[i];
    item.name = nw.name;
    item.result = assemble_layer(nw.weight, cfg.q1, cfg.q2, cfg.policy, cfg.options);
    const Matrix x = nw.activations ? *nw.activations
                                    : Matrix(Matrix::Identity(nw.weight.rows(), nw.weight.rows()));
    item.report =
        error_report(nw.weight, x, item.result.bundle, cfg.act_format, cfg.lowrank_act_format);
  });
  return out;
}

std::vector<AblationCell> run_ablation(const std::vector<NamedWeight> &weights,
                                       const BatchConfig &cfg, unsigned threads) {
  std::vector<AblationCell> cells(4);
  for (int c = 0; c < 4; ++c) {
    cells[c].optimized_lr = (c & 1) != 0;
    cells[c].rotations = (c & 2) != 0;
    cells[c].weight_err.resize(weights.size());
  }
  std::vector<double> rel(4 * weights.size());
  parallel_for(4 * weights.size(), threads ? threads : thread_limit(), [&](std::size_t job) {
    const std::size_t c = job % 4, i = job / 4;
    LayerOptions opts = cfg.options;
    opts.optimized_lr = cells[c].optimized_lr;
    opts.rotations = cells[c].rotations;
    const auto res = assemble_layer(weights[i].weight, cfg.q1, cfg.q2, cfg.policy, opts);
    const Matrix w_hat = desmoothed_weight(res.bundle);
    const double err = frobenius_norm(Matrix(weights[i].weight - w_hat));
    const double norm = frobenius_norm(weights[i].weight);
    cells[c].weight_err[i] = err;
    rel[job] = norm > 0 ? err / norm : 0.0;
  });
  for (std::size_t c = 0; c < 4; ++c) {
    double sum = 0, sum_rel = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      sum += cells[c].weight_err[i];
      sum_rel += rel[4 * i + c];
    }
    if (!weights.empty()) {
      cells[c].mean_weight_err = sum / static_cast<double>(weights.size());
      cells[c].mean_weight_rel_err = sum_rel / static_cast<double>(weights.size());
    }
  }
  return cells;
}

} // namespace loraq
