#include "loraq/cli.hpp"

#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "loraq/batch.hpp"
#include "loraq/bundle_io.hpp"

namespace loraq {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Settings shared by quantize and ablate. A JSON config file supplies the same keys;
// explicit flags win over the file.
struct RunConfig {
  std::string q1 = "SINT4";
  std::string q2 = "SINT4";
  int budget = 512;
  std::optional<long> rank;
  std::optional<std::string> act_format;
  std::optional<std::string> lr_act_format;
  bool optimize = true;
  bool rotate = true;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<int> rot_steps;
  std::optional<double> rot_lr;
  std::uint64_t seed = 0;
  std::optional<std::string> stats;
  std::optional<std::string> out;
};

template <typename T> void read_key(const json &j, const char *key, T &dst) {
  if (j.contains(key))
    dst = j.at(key).get<T>();
}
template <typename T> void read_key(const json &j, const char *key, std::optional<T> &dst) {
  if (j.contains(key))
    dst = j.at(key).get<T>();
}

RunConfig load_config(const std::string &path) {
  static const std::vector<std::string> keys = {
      "q1",    "q2",       "budget", "rank",    "act_format", "lr_act_format",
      "optimize", "rotate", "steps", "lr",      "rot_steps",  "rot_lr",
      "seed",  "stats",    "out"};
  const Bytes bytes = read_file(path);
  RunConfig c;
  try {
    const json j = json::parse(bytes.begin(), bytes.end());
    if (!j.is_object())
      fail(ErrorCode::Parameter, "config file must hold a JSON object");
    for (const auto &item : j.items())
      if (std::find(keys.begin(), keys.end(), item.key()) == keys.end())
        fail(ErrorCode::Parameter, "unknown config key '" + item.key() + "'");
    read_key(j, "q1", c.q1);
    read_key(j, "q2", c.q2);
    read_key(j, "budget", c.budget);
    read_key(j, "rank", c.rank);
    read_key(j, "act_format", c.act_format);
    read_key(j, "lr_act_format", c.lr_act_format);
    read_key(j, "optimize", c.optimize);
    read_key(j, "rotate", c.rotate);
    read_key(j, "steps", c.steps);
    read_key(j, "lr", c.lr);
    read_key(j, "rot_steps", c.rot_steps);
    read_key(j, "rot_lr", c.rot_lr);
    read_key(j, "seed", c.seed);
    read_key(j, "stats", c.stats);
    read_key(j, "out", c.out);
  } catch (const json::exception &e) {
    fail(ErrorCode::Parameter, "config file " + path + ": " + e.what());
  }
  return c;
}

// Raw flag values; an option counts only if it appeared on the command line.
struct RunFlags {
  std::string config;
  std::string q1, q2, act_format, lr_act_format, stats, out;
  int budget = 0, steps = 0, rot_steps = 0;
  long rank = 0;
  double lr = 0, rot_lr = 0;
  std::uint64_t seed = 0;
  std::map<std::string, CLI::Option *> opts;

  bool given(const std::string &name) const { return opts.at(name)->count() > 0; }
};

void add_run_flags(CLI::App *cmd, RunFlags &f) {
  f.opts["config"] = cmd->add_option("--config", f.config, "JSON config file");
  f.opts["q1"] = cmd->add_option("--q1", f.q1, "residual format (default SINT4)");
  f.opts["q2"] = cmd->add_option("--q2", f.q2, "low-rank format (default SINT4)");
  f.opts["budget"] = cmd->add_option("--budget", f.budget, "low-rank bits per channel (default 512)");
  f.opts["rank"] = cmd->add_option("--rank", f.rank, "explicit rank, replaces the budget rule");
  f.opts["act-format"] = cmd->add_option("--act-format", f.act_format, "activation format");
  f.opts["lr-act-format"] =
      cmd->add_option("--lr-act-format", f.lr_act_format, "low-rank branch activation format");
  f.opts["no-optimize"] = cmd->add_flag("--no-optimize", "skip low-rank factor optimization");
  f.opts["no-rotate"] = cmd->add_flag("--no-rotate", "skip the rotation stage");
  f.opts["steps"] = cmd->add_option("--steps", f.steps, "factor optimization steps");
  f.opts["lr"] = cmd->add_option("--lr", f.lr, "factor optimization learning rate");
  f.opts["rot-steps"] = cmd->add_option("--rot-steps", f.rot_steps, "rotation steps");
  f.opts["rot-lr"] = cmd->add_option("--rot-lr", f.rot_lr, "rotation learning rate");
  f.opts["seed"] = cmd->add_option("--seed", f.seed, "seed recorded in the bundle");
  f.opts["stats"] = cmd->add_option("--stats", f.stats,
                                    "LQS1 channel stats or LQT1 calibration activations");
  f.opts["out"] = cmd->add_option("--out", f.out, "output bundle (or directory for several)");
}

RunConfig resolve_config(const RunFlags &f) {
  RunConfig c = f.given("config") ? load_config(f.config) : RunConfig{};
  if (f.given("rank") && f.given("budget"))
    fail(ErrorCode::Parameter, "--rank and --budget are mutually exclusive");
  if (f.given("q1")) c.q1 = f.q1;
  if (f.given("q2")) c.q2 = f.q2;
  if (f.given("budget")) {
    c.budget = f.budget;
    c.rank.reset();
  }
  if (f.given("rank")) c.rank = f.rank;
  if (f.given("act-format")) c.act_format = f.act_format;
  if (f.given("lr-act-format")) c.lr_act_format = f.lr_act_format;
  if (f.given("no-optimize")) c.optimize = false;
  if (f.given("no-rotate")) c.rotate = false;
  if (f.given("steps")) c.steps = f.steps;
  if (f.given("lr")) c.lr = f.lr;
  if (f.given("rot-steps")) c.rot_steps = f.rot_steps;
  if (f.given("rot-lr")) c.rot_lr = f.rot_lr;
  if (f.given("seed")) c.seed = f.seed;
  if (f.given("stats")) c.stats = f.stats;
  if (f.given("out")) c.out = f.out;
  return c;
}

BatchConfig batch_config(const RunConfig &c) {
  BatchConfig b;
  b.q1 = make_format(c.q1);
  b.q2 = make_format(c.q2);
  b.policy = {c.budget, b.q2.bits_per_value};
  b.options.optimized_lr = c.optimize;
  b.options.rotations = c.rotate;
  if (c.rank)
    b.options.rank_override = *c.rank;

  AbsorbConfig a = default_absorb_config(b.q1);
  if (c.steps) a.steps = *c.steps;
  if (c.lr) a.learning_rate = *c.lr;
  a.seed = c.seed;
  b.options.absorb = a;
  RotationConfig r = default_rotation_config(b.q2);
  if (c.rot_steps) r.steps = *c.rot_steps;
  if (c.rot_lr) r.learning_rate = *c.rot_lr;
  r.seed = c.seed;
  b.options.rotation = r;

  if (c.act_format)
    b.act_format = make_format(*c.act_format);
  if (c.lr_act_format)
    b.lowrank_act_format = make_format(*c.lr_act_format);

  if (c.stats) {
    SmoothingOptions sm;
    sm.act_format = b.act_format;
    const std::string magic = file_magic(*c.stats);
    if (magic == "LQS1")
      sm.stats = load_stats(*c.stats);
    else if (magic == "LQT1")
      sm.calibration = load_tensor(*c.stats);
    else if (magic.empty() && !fs::exists(*c.stats))
      fail(ErrorCode::Io, "cannot open " + *c.stats);
    else
      fail(ErrorCode::Format, *c.stats + " is neither an LQS1 nor an LQT1 file");
    b.options.smoothing = std::move(sm);
  }
  return b;
}

std::vector<NamedWeight> load_weights(const std::vector<std::string> &paths) {
  std::vector<NamedWeight> out;
  for (const auto &p : paths)
    out.push_back({p, load_tensor(p), std::nullopt});
  return out;
}

std::string num(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

json report_json(const ErrorReport &r) {
  return {{"weight_err", r.weight_err},
          {"weight_rel_err", r.weight_rel_err},
          {"weight_err_smoothed", r.weight_err_smoothed},
          {"matmul_err", r.matmul_err},
          {"matmul_rel_err", r.matmul_rel_err},
          {"bound_rhs", r.bound_rhs},
          {"act_quant_err", r.act_quant_err},
          {"act_quant_norm", r.act_quant_norm},
          {"weight_norm", r.weight_norm},
          {"mixed_act_term", r.mixed_act_term},
          {"residual_mse", r.residual_mse},
          {"lowrank_mse", r.lowrank_mse}};
}

json budget_json(const BudgetAccounting &b) {
  return {{"rank", b.rank},
          {"bits_per_value", b.bits_per_value},
          {"payload_bits_per_channel", b.payload_bits_per_channel},
          {"budget_bits_per_channel", b.budget_bits_per_channel},
          {"scale_bits_total", b.scale_bits_total}};
}

void print_report(std::ostream &out, const ErrorReport &r) {
  const json fields = report_json(r);
  for (const auto &[key, value] : fields.items())
    out << "  " << std::left << std::setw(20) << key << num(value.get<double>()) << "\n";
}

void print_budget(std::ostream &out, const BudgetAccounting &b) {
  out << "  budget              rank " << b.rank << " x " << b.bits_per_value
      << " bits = " << b.payload_bits_per_channel << " bits/channel (of "
      << b.budget_bits_per_channel << "), scale bits " << b.scale_bits_total << "\n";
}

fs::path bundle_path(const std::string &input, const RunConfig &c, std::size_t count) {
  if (count == 1 && c.out)
    return *c.out;
  fs::path name = fs::path(input).filename().replace_extension(".lrqb");
  if (c.out) {
    fs::create_directories(*c.out);
    return fs::path(*c.out) / name;
  }
  return fs::path(input).replace_extension(".lrqb");
}

int cmd_quantize(const std::vector<std::string> &inputs, const RunFlags &flags, bool machine,
                 std::ostream &out, std::ostream &err) {
  const RunConfig c = resolve_config(flags);
  const BatchConfig cfg = batch_config(c);
  const auto weights = load_weights(inputs);
  const auto items = run_batch(weights, cfg);
  json results = json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto &it = items[i];
    const auto &m = it.result.bundle.meta;
    const fs::path path = bundle_path(inputs[i], c, inputs.size());
    save_bundle(path, it.result.bundle);
    for (const auto &w : it.result.warnings)
      err << "warning: " << it.name << ": " << w << "\n";
    const BudgetAccounting acc = budget_accounting(it.result.bundle);
    if (machine) {
      results.push_back({{"name", it.name},
                         {"bundle", path.string()},
                         {"rows", m.rows},
                         {"cols", m.cols},
                         {"rank", m.rank},
                         {"requested_rank", m.requested_rank},
                         {"rank_capped", m.rank_capped},
                         {"absorb_initial_loss", m.absorb_initial_loss},
                         {"absorb_best_loss", m.absorb_best_loss},
                         {"absorb_best_step", m.absorb_best_step},
                         {"rotation_identity_loss", m.rotation_identity_loss},
                         {"rotation_best_loss", m.rotation_best_loss},
                         {"rotation_best_step", m.rotation_best_step},
                         {"warnings", it.result.warnings},
                         {"report", report_json(it.report)},
                         {"budget", budget_json(acc)}});
      continue;
    }
    out << "weight " << it.name << " (" << m.rows << "x" << m.cols << ") -> " << path.string()
        << "\n";
    out << "  rank                " << m.rank;
    if (m.rank_capped)
      out << " (requested " << m.requested_rank << ", capped)";
    out << "\n";
    out << "  absorb loss         " << num(m.absorb_initial_loss) << " -> "
        << num(m.absorb_best_loss) << " (best step " << m.absorb_best_step << " of "
        << it.result.absorb_trace.size() - 1 << ")\n";
    out << "  rotation loss       " << num(m.rotation_identity_loss) << " -> "
        << num(m.rotation_best_loss) << " (best step " << m.rotation_best_step << " of "
        << it.result.rotation_trace.size() - 1 << ")\n";
    print_report(out, it.report);
    print_budget(out, acc);
  }
  if (machine)
    out << json{{"command", "quantize"}, {"results", results}}.dump() << "\n";
  return kExitOk;
}

int cmd_evaluate(const std::string &bundle_file, const std::string &weight_file,
                 const std::string &x_file, const std::string &act, const std::string &lr_act,
                 bool machine, std::ostream &out) {
  const LayerBundle b = load_bundle(bundle_file);
  const Matrix w = load_tensor(weight_file);
  const Matrix x = x_file.empty() ? Matrix(Matrix::Identity(w.rows(), w.rows())) : load_tensor(x_file);
  std::optional<FormatSpec> qa, qlr;
  if (!act.empty())
    qa = make_format(act);
  if (!lr_act.empty())
    qlr = make_format(lr_act);
  const ErrorReport r = error_report(w, x, b, qa, qlr);
  if (machine) {
    out << json{{"command", "evaluate"}, {"report", report_json(r)}}.dump() << "\n";
  } else {
    out << "evaluate " << bundle_file << " against " << weight_file << "\n";
    print_report(out, r);
  }
  return kExitOk;
}

int cmd_ablate(const std::vector<std::string> &inputs, const RunFlags &flags, bool machine,
               std::ostream &out) {
  const BatchConfig cfg = batch_config(resolve_config(flags));
  const auto cells = run_ablation(load_weights(inputs), cfg);
  if (machine) {
    json rows = json::array();
    for (const auto &c : cells)
      rows.push_back({{"optimized_lr", c.optimized_lr},
                      {"rotations", c.rotations},
                      {"mean_weight_err", c.mean_weight_err},
                      {"mean_weight_rel_err", c.mean_weight_rel_err},
                      {"weight_err", c.weight_err}});
    out << json{{"command", "ablate"}, {"weights", inputs}, {"cells", rows}}.dump() << "\n";
    return kExitOk;
  }
  out << "optimized_lr  rotations  mean_weight_err          mean_weight_rel_err\n";
  for (const auto &c : cells)
    out << std::left << std::setw(14) << (c.optimized_lr ? "yes" : "no") << std::setw(11)
        << (c.rotations ? "yes" : "no") << std::setw(25) << num(c.mean_weight_err)
        << num(c.mean_weight_rel_err) << "\n";
  return kExitOk;
}

int cmd_inspect(const std::string &bundle_file, bool machine, std::ostream &out) {
  const Bytes bytes = read_file(bundle_file);
  const LayerBundle b = decode_bundle(bytes);
  const BudgetAccounting acc = budget_accounting(b);
  const json manifest = json::parse(read_bundle_manifest(bytes));
  if (machine) {
    out << json{{"command", "inspect"}, {"manifest", manifest}, {"budget", budget_json(acc)}}.dump()
        << "\n";
    return kExitOk;
  }
  out << manifest.dump(2) << "\n";
  auto tensor_line = [&](const char *name, const QuantizedTensor &t) {
    out << "  " << std::left << std::setw(20) << name << t.rows << "x" << t.cols << " "
        << t.format.name << ", " << t.codes.size() << " code bytes, " << t.scales.size()
        << " scales\n";
  };
  tensor_line("residual", b.residual);
  tensor_line("lowrank_left", b.lowrank_left);
  tensor_line("lowrank_right", b.lowrank_right);
  print_budget(out, acc);
  return kExitOk;
}

std::string escape(std::string_view s) {
  std::string o;
  for (char ch : s) {
    if (ch == '"' || ch == '\\')
      o += '\\';
    o += (ch == '\n' || ch == '\r') ? ' ' : ch;
  }
  return o;
}

int report_error(std::ostream &err, const char *code, int exit, std::string_view message) {
  err << "error: code=" << code << " exit=" << exit << " message=\"" << escape(message) << "\"\n";
  return exit;
}

} // namespace

int exit_code_for(ErrorCode code) noexcept { return 10 + static_cast<int>(code); }

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Low-rank quantization error compensation for linear layers", "loraq"};
  app.require_subcommand(1);
  bool machine = false;
  app.add_flag("--machine", machine, "print results as one JSON document");

  auto *quantize = app.add_subcommand("quantize", "quantize LQT1 weights into LRQB bundles");
  std::vector<std::string> q_inputs;
  quantize->add_option("weights", q_inputs, "LQT1 weight files")->required();
  RunFlags q_flags;
  add_run_flags(quantize, q_flags);
  quantize->add_flag("--machine", machine, "print results as one JSON document");

  auto *evaluate = app.add_subcommand("evaluate", "report errors of a bundle against a weight");
  std::string e_bundle, e_weight, e_x, e_act, e_lr_act;
  evaluate->add_option("bundle", e_bundle, "LRQB bundle")->required();
  evaluate->add_option("weight", e_weight, "LQT1 source weight")->required();
  evaluate->add_option("--x", e_x, "LQT1 activations (default: identity)");
  evaluate->add_option("--act-format", e_act, "activation format");
  evaluate->add_option("--lr-act-format", e_lr_act, "low-rank branch activation format");
  evaluate->add_flag("--machine", machine, "print results as one JSON document");

  auto *ablate = app.add_subcommand("ablate", "run the optimize/rotate toggle grid");
  std::vector<std::string> a_inputs;
  ablate->add_option("weights", a_inputs, "LQT1 weight files")->required();
  RunFlags a_flags;
  add_run_flags(ablate, a_flags);
  ablate->add_flag("--machine", machine, "print results as one JSON document");

  auto *inspect = app.add_subcommand("inspect", "print a bundle's manifest and bit accounting");
  std::string i_bundle;
  inspect->add_option("bundle", i_bundle, "LRQB bundle")->required();
  inspect->add_flag("--machine", machine, "print results as one JSON document");

  std::vector<std::string> argv_store = {"loraq"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char *> argv;
  for (const auto &a : argv_store)
    argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    return report_error(err, "USAGE_ERROR", kExitUsage, e.what());
  }

  try {
    if (*quantize)
      return cmd_quantize(q_inputs, q_flags, machine, out, err);
    if (*evaluate)
      return cmd_evaluate(e_bundle, e_weight, e_x, e_act, e_lr_act, machine, out);
    if (*ablate)
      return cmd_ablate(a_inputs, a_flags, machine, out);
    if (*inspect)
      return cmd_inspect(i_bundle, machine, out);
  } catch (const Error &e) {
    return report_error(err, error_code_name(e.code()), exit_code_for(e.code()), e.what());
  } catch (const fs::filesystem_error &e) {
    return report_error(err, error_code_name(ErrorCode::Io), exit_code_for(ErrorCode::Io), e.what());
  } catch (const std::exception &e) {
    return report_error(err, "INTERNAL_ERROR", kExitInternal, e.what());
  }
  return report_error(err, "USAGE_ERROR", kExitUsage, "no command given");
}

} // namespace loraq
