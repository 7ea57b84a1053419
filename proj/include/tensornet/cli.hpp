#pragma once

#include "io.hpp"
#include "training.hpp"
#include "verification.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace tensornet {

// Bad invocation: unknown flag, subcommand or config key. Exit code 2.
class UsageError : public Error {
public:
  using Error::Error;
};

namespace cli {

struct PredictHeads {
  bool energy = false, forces = false, dipole = false, polarizability = false, shielding = false;
};

inline PredictHeads parse_predict_heads(const std::string &spec) {
  PredictHeads h;
  std::stringstream ss(spec);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = std::string(detail::trim(tok));
    if (tok == "e")
      h.energy = true;
    else if (tok == "f")
      h.forces = true;
    else if (tok == "mu")
      h.dipole = true;
    else if (tok == "alpha")
      h.polarizability = true;
    else if (tok == "sigma")
      h.shielding = true;
    else
      throw UsageError("unknown head '" + tok + "' (expected e, f, mu, alpha, sigma)");
  }
  return h;
}

inline void write_values(std::ostream &os, std::span<const double> v) {
  for (double x : v)
    os << ' ' << to_text(x);
}

// One `frame <idx> energy <v>` line per frame, followed by the requested
// per-frame and per-atom lines.
inline void write_prediction(std::ostream &os, std::size_t frame, const SystemPrediction &p, const PredictHeads &h) {
  os << "frame " << frame;
  if (h.energy || h.forces)
    os << " energy " << to_text(p.energy);
  os << '\n';
  if (h.forces)
    for (std::size_t i = 0; i < p.forces.size(); ++i) {
      os << "force " << i;
      write_values(os, p.forces[i]);
      os << '\n';
    }
  if (h.dipole && p.dipole) {
    os << "dipole";
    write_values(os, *p.dipole);
    os << '\n';
  }
  if (h.polarizability && p.polarizability) {
    os << "polarizability";
    write_values(os, *p.polarizability);
    os << '\n';
  }
  if (h.shielding && p.shieldings)
    for (std::size_t i = 0; i < p.shieldings->size(); ++i) {
      os << "shielding " << i;
      write_values(os, (*p.shieldings)[i]);
      os << '\n';
    }
}

inline std::vector<SystemPrediction> predict_dataset(std::span<const AtomicSystem> systems, const ParamStore &params,
                                                     const ModelConfig &cfg, const PredictHeads &h,
                                                     std::size_t chunk = 16) {
  PredictOptions po;
  po.forces = h.forces;
  po.heads = HeadSet{h.energy || h.forces, h.dipole, h.polarizability, h.shielding};
  std::vector<SystemPrediction> out;
  for (std::size_t b = 0; b < systems.size(); b += chunk) {
    std::vector<const AtomicSystem *> batch;
    for (std::size_t k = b; k < std::min(systems.size(), b + chunk); ++k)
      batch.push_back(&systems[k]);
    for (auto &p : predict(std::span<const AtomicSystem *const>(batch), params, cfg, po))
      out.push_back(std::move(p));
  }
  return out;
}

inline RunConfig load_run_config(const std::string &path) {
  try {
    return parse_config_file(path);
  } catch (const ParseError &e) {
    throw UsageError("config " + path + ": " + e.what());
  }
}

inline void require_heads(const ModelConfig &cfg, const PredictHeads &h) {
  if ((h.energy || h.forces) && !cfg.heads.energy)
    throw Error("model has no energy head");
  if (h.dipole && !cfg.heads.dipole)
    throw Error("model has no dipole head");
  if (h.polarizability && !cfg.heads.polarizability)
    throw Error("model has no polarizability head");
  if (h.shielding && !cfg.heads.shielding)
    throw Error("model has no shielding head");
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out, resume;
};

inline int cmd_train(const TrainArgs &a, std::ostream &out) {
  const RunConfig rc = load_run_config(a.config);
  rc.train.validate();
  const Dataset ds = parse_extxyz(a.data);
  namespace fs = std::filesystem;
  fs::create_directories(a.out);
  const fs::path dir(a.out);

  TrainState state = a.resume.empty() ? initial_state(ds.systems, rc.model, rc.train)
                                      : training_state_from_checkpoint(load_checkpoint(a.resume));
  RunConfig saved = rc;
  saved.model = state.model;
  if (saved.energy_unit.empty())
    saved.energy_unit = ds.energy_unit;
  if (saved.length_unit.empty())
    saved.length_unit = ds.length_unit;

  std::ofstream log(dir / "metrics.log", a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log)
    throw Error("cannot write " + (dir / "metrics.log").string());
  double best_written = state.best_metric;
  auto write_best = [&](const TrainState &s) {
    std::map<std::string, std::string> ex{{"metrics.best_val_loss", to_text(s.best_metric)},
                                          {"metrics.epoch", std::to_string(s.epoch)}};
    save_checkpoint((dir / "best.ckpt").string(), make_checkpoint(saved, s.best_params, ex));
  };

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord &rec, const TrainState &s) {
    const std::string line = format_metrics_line(rec, rc.train.loss_weights);
    log << line << '\n' << std::flush;
    out << line << '\n';
    save_checkpoint((dir / "last.ckpt").string(), make_training_checkpoint(s, saved));
    if (s.best_metric < best_written || !fs::exists(dir / "best.ckpt")) {
      best_written = s.best_metric;
      write_best(s);
    }
  };
  train_loop(ds.systems, state, rc.train, hooks);
  save_checkpoint((dir / "last.ckpt").string(), make_training_checkpoint(state, saved));
  if (!fs::exists(dir / "best.ckpt"))
    write_best(state);
  out << "done epochs " << state.epoch << " steps " << state.step << " best_val_loss "
      << format_double(state.best_metric) << '\n';
  return 0;
}

struct PredictArgs {
  std::string ckpt, data, heads = "e,f", out;
};

inline int cmd_predict(const PredictArgs &a, std::ostream &out) {
  const PredictHeads h = parse_predict_heads(a.heads);
  const LoadedModel m = model_from_checkpoint(load_checkpoint(a.ckpt));
  require_heads(m.config.model, h);
  const Dataset ds = parse_extxyz(a.data);
  const auto preds = predict_dataset(ds.systems, m.params, m.config.model, h);
  std::ofstream file;
  if (!a.out.empty() && a.out != "-") {
    file.open(a.out);
    if (!file)
      throw Error("cannot write " + a.out);
  }
  std::ostream &os = file.is_open() ? static_cast<std::ostream &>(file) : out;
  for (std::size_t f = 0; f < preds.size(); ++f)
    write_prediction(os, f, preds[f], h);
  return 0;
}

struct CheckArgs {
  std::string kind, ckpt;
  bool random_init = false;
  std::uint64_t seed = 0;
  std::size_t trials = 50, atoms = 20, channels = 16, layers = 1;
  std::string group = "O3";
};

inline std::pair<ModelConfig, ParamStore> check_model(const CheckArgs &a) {
  if (!a.ckpt.empty()) {
    LoadedModel m = model_from_checkpoint(load_checkpoint(a.ckpt));
    return {m.config.model, std::move(m.params)};
  }
  ModelConfig cfg;
  cfg.channels = a.channels;
  cfg.n_rbf = 16;
  cfg.n_layers = a.layers;
  if (a.group == "O3")
    cfg.group = Group::O3;
  else if (a.group == "SO3")
    cfg.group = Group::SO3;
  else
    throw UsageError("--group must be O3 or SO3");
  cfg.heads = HeadSet{true, true, true, true};
  cfg.validate();
  return {cfg, init_params(cfg, a.seed)};
}

// Elements the model can embed and, if needed, weight in the shielding head.
inline std::vector<int> check_elements(const ModelConfig &cfg) {
  std::vector<int> el;
  for (int z : {1, 6, 8})
    if (z <= cfg.max_atomic_number && (!cfg.heads.shielding || cfg.shielding_weights.count(z)))
      el.push_back(z);
  if (el.empty())
    throw Error("check: no test elements compatible with the model");
  return el;
}

inline std::string oracle_table(const std::vector<OracleResult> &results) {
  std::ostringstream os;
  os << std::left << std::setw(36) << "check" << std::setw(16) << "value" << std::setw(16) << "threshold"
     << "status\n";
  for (const auto &r : results)
    os << std::left << std::setw(36) << r.name << std::setw(16) << detail::format_g(r.value) << std::setw(16)
       << ((r.must_exceed ? "> " : "<= ") + detail::format_g(r.threshold)) << (r.pass() ? "pass" : "FAIL") << '\n';
  return os.str();
}

inline int cmd_check(const CheckArgs &a, std::ostream &out) {
  if (a.kind == "appendix") {
    const auto results = appendix_oracle_suite(a.seed, 1000);
    out << oracle_table(results) << oracle_result_line(results) << '\n';
    return std::all_of(results.begin(), results.end(), [](const OracleResult &r) { return r.pass(); }) ? 0 : 1;
  }
  if (a.ckpt.empty() && !a.random_init)
    throw UsageError("check " + a.kind + " needs --ckpt <file> or --random-init");
  if (!a.ckpt.empty() && a.random_init)
    throw UsageError("--ckpt and --random-init are exclusive");
  const auto [cfg, params] = check_model(a);
  const AtomicSystem sys = random_system(a.atoms, a.seed, check_elements(cfg));
  if (a.kind == "equivariance") {
    EquivarianceOptions o;
    o.n_trials = a.trials;
    o.seed = a.seed;
    const SymmetryReport rep = equivariance_report(cfg, params, sys, o);
    out << rep.table() << rep.result_line() << '\n';
    return rep.pass() ? 0 : 1;
  }
  if (a.kind == "gradients") {
    if (!cfg.heads.energy)
      throw Error("check gradients: model has no energy head");
    const GradientReport rep = gradient_report(cfg, params, sys);
    out << "max_abs_err " << detail::format_g(rep.max_abs_err) << "\nmax_rel_err "
        << detail::format_g(rep.max_rel_err) << " (tolerance " << detail::format_g(rep.tolerance)
        << ")\nnet_force " << detail::format_g(rep.net_force) << " (tolerance "
        << detail::format_g(rep.net_tolerance) << ")\n"
        << rep.result_line() << '\n';
    return rep.pass() ? 0 : 1;
  }
  throw UsageError("unknown check '" + a.kind + "' (expected equivariance, gradients, appendix)");
}

inline int cmd_inspect(const std::string &path, std::ostream &out) {
  const Checkpoint c = load_checkpoint(path);
  out << "version " << c.version << "\n[config]\n" << c.config_text;
  if (!c.config_text.empty() && c.config_text.back() != '\n')
    out << '\n';
  out << "[arrays] " << c.arrays.size() << '\n';
  std::size_t total = 0;
  for (const auto &arr : c.arrays) {
    std::size_t n = 1;
    out << arr.name << ' ' << to_string(arr.dtype) << " [";
    for (std::size_t k = 0; k < arr.dims.size(); ++k) {
      out << (k ? "," : "") << arr.dims[k];
      n *= arr.dims[k];
    }
    out << "]\n";
    total += n;
  }
  out << "total_values " << total << '\n';
  return 0;
}

struct BenchArgs {
  std::string ckpt, data;
  std::size_t repeat = 3;
};

inline int cmd_bench(const BenchArgs &a, std::ostream &out) {
  if (a.repeat == 0)
    throw UsageError("--repeat must be positive");
  const LoadedModel m = model_from_checkpoint(load_checkpoint(a.ckpt));
  if (!m.config.model.heads.energy)
    throw Error("bench: model has no energy head");
  const Dataset ds = parse_extxyz(a.data);
  using clock = std::chrono::steady_clock;
  auto time_per_system = [&](bool with_forces) {
    PredictOptions po;
    po.forces = with_forces;
    po.heads = HeadSet{true, false, false, false};
    const auto t0 = clock::now();
    for (std::size_t r = 0; r < a.repeat; ++r)
      for (const auto &s : ds.systems)
        predict(s, m.params, m.config.model, po);
    const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    return ms / static_cast<double>(a.repeat * ds.systems.size());
  };
  const double fwd = time_per_system(false);
  const double both = time_per_system(true);
  out << "systems " << ds.systems.size() << " repeat " << a.repeat << '\n'
      << "forward_ms_per_system " << detail::format_g(fwd) << '\n'
      << "forward_backward_ms_per_system " << detail::format_g(both) << '\n';
  return 0;
}

} // namespace cli

// Exit codes: 0 success, 1 runtime failure or failed check, 2 usage error.
inline int run_cli(int argc, const char *const *argv, std::ostream &out = std::cout, std::ostream &err = std::cerr) {
  CLI::App app{"TensorNet: O(3)-equivariant Cartesian tensor message passing"};
  app.require_subcommand(1);

  cli::TrainArgs ta;
  auto *train = app.add_subcommand("train", "Fit a model to an extended-XYZ dataset");
  train->add_option("--config", ta.config, "key = value configuration file")->required()->check(CLI::ExistingFile);
  train->add_option("--data", ta.data, "Extended-XYZ training data")->required()->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Output directory (best.ckpt, last.ckpt, metrics.log)")->required();
  train->add_option("--resume", ta.resume, "Continue from a last.ckpt")->check(CLI::ExistingFile);

  cli::PredictArgs pa;
  auto *pred = app.add_subcommand("predict", "Evaluate a checkpoint on a dataset");
  pred->add_option("--ckpt", pa.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  pred->add_option("--data", pa.data, "Extended-XYZ frames")->required()->check(CLI::ExistingFile);
  pred->add_option("--heads", pa.heads, "Comma list of e,f,mu,alpha,sigma")->capture_default_str();
  pred->add_option("--out", pa.out, "Output file ('-' for stdout)");

  cli::CheckArgs ca;
  auto *check = app.add_subcommand("check", "Symmetry, gradient and identity checks");
  check->add_option("kind", ca.kind, "equivariance | gradients | appendix")
      ->required()
      ->check(CLI::IsMember({"equivariance", "gradients", "appendix"}));
  auto *ck = check->add_option("--ckpt", ca.ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  auto *ri = check->add_flag("--random-init", ca.random_init, "Use a randomly initialized model");
  ck->excludes(ri);
  check->add_option("--seed", ca.seed, "Seed for the model, test system and transforms")->capture_default_str();
  check->add_option("--trials", ca.trials, "Random group elements")->capture_default_str();
  check->add_option("--atoms", ca.atoms, "Atoms in the random test system")->capture_default_str();
  check->add_option("--channels", ca.channels, "Channels for --random-init")->capture_default_str();
  check->add_option("--layers", ca.layers, "Interaction layers for --random-init")->capture_default_str();
  check->add_option("--group", ca.group, "O3 or SO3 for --random-init")->capture_default_str();

  std::string inspect_path;
  auto *inspect = app.add_subcommand("inspect", "Print the configuration and array manifest of a checkpoint");
  inspect->add_option("--ckpt", inspect_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  cli::BenchArgs ba;
  auto *bench = app.add_subcommand("bench", "Time forward and forward+backward per system");
  bench->add_option("--ckpt", ba.ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  bench->add_option("--data", ba.data, "Extended-XYZ frames")->required()->check(CLI::ExistingFile);
  bench->add_option("--repeat", ba.repeat, "Passes over the dataset")->capture_default_str();

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i)
      args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train)
      return cli::cmd_train(ta, out);
    if (*pred)
      return cli::cmd_predict(pa, out);
    if (*check)
      return cli::cmd_check(ca, out);
    if (*inspect)
      return cli::cmd_inspect(inspect_path, out);
    if (*bench)
      return cli::cmd_bench(ba, out);
  } catch (const UsageError &e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

} // namespace tensornet
