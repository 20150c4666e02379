#pragma once

// Command implementations behind the `upn` executable:
//   upn <generate|train|eval|flow|filter> [--config FILE] [--preset NAME] [--key value ...]
// Each command resolves an ExperimentConfig, does its work, and writes CSV
// and checkpoint files atomically under `out`.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "upn/baselines.hpp"
#include "upn/checkpoint.hpp"
#include "upn/config.hpp"
#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/flow.hpp"
#include "upn/io.hpp"
#include "upn/measurement.hpp"
#include "upn/metrics.hpp"
#include "upn/preset_data.hpp"
#include "upn/systems.hpp"
#include "upn/training.hpp"

namespace upn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- presets

inline std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& e : presets::all) out.emplace_back(e.name);
  return out;
}

/// `<name>_<variant>` if it exists, else `<name>`.
inline std::pair<std::string, std::string> find_preset(const std::string& name, const std::string& variant) {
  for (const std::string& candidate : {name + "_" + variant, name})
    for (const auto& e : presets::all)
      if (e.name == candidate) return {candidate, std::string(e.text)};
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' for " + variant + " (available: " + known + ")");
}

struct ConfigSources {
  std::string command;
  std::string preset;
  std::string config_file;
  KeyValues flags;
};

namespace detail {

inline std::optional<std::string> last_value(const KeyValues& kv, const std::string& key) {
  std::optional<std::string> v;
  for (const auto& [k, val] : kv)
    if (k == key) v = val;
  return v;
}

inline void apply_without_system_name(ExperimentConfig& c, const KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (k != "system.name") apply_key(c, k, v);
}

}  // namespace detail

/// Defaults, then preset, then config file, then flags. The system is
/// chosen first (flags, else file, else linear_oscillator) because presets
/// are looked up per system.
inline ExperimentConfig resolve_config(const ConfigSources& src) {
  KeyValues file_kv;
  if (!src.config_file.empty()) {
    try {
      file_kv = parse_key_values(read_file(src.config_file));
    } catch (const ParseError& e) {
      throw ConfigError(src.config_file + ": " + e.what());
    }
  }
  std::string system = "linear_oscillator";
  if (auto v = detail::last_value(file_kv, "system.name")) system = *v;
  if (auto v = detail::last_value(src.flags, "system.name")) system = *v;
  ExperimentConfig c;
  c.system = default_system(system_from_string(system));
  if (src.command == "flow") c.model = ModelKind::flow;
  if (!src.preset.empty()) {
    const auto [name, text] = find_preset(src.preset, src.command == "flow" ? "flow" : system);
    const KeyValues kv = parse_key_values(text);
    if (auto v = detail::last_value(kv, "system.name"); v && *v != system)
      throw ConfigError("preset " + name + " is for system " + *v + ", not " + system);
    detail::apply_without_system_name(c, kv);
  }
  detail::apply_without_system_name(c, file_kv);
  detail::apply_without_system_name(c, src.flags);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- model files

inline Checkpoint upn_checkpoint(const UpnModel& m) {
  Checkpoint ck;
  ck.set_meta("kind", "upn");
  ck.set_meta("state_dim", std::to_string(m.state_dim));
  ck.set_meta("cov_mode", to_string(m.cov_mode));
  ck.set_meta("eps_noise", format_double(m.eps_noise));
  ck.set_meta("psd_floor", format_double(m.psd_floor));
  ck.set_meta("noise_gain", format_double(m.noise_gain));
  ck.set_meta("init_log_scale", format_double(m.init_log_scale));
  ck.nets.emplace_back("dynamics", m.dynamics);
  ck.nets.emplace_back("noise", m.noise);
  return ck;
}

inline void require_kind(const Checkpoint& ck, const std::string& kind) {
  if (ck.get_meta("kind") != kind)
    throw ConfigError("checkpoint holds a '" + ck.get_meta("kind") + "' model, expected '" + kind + "'");
}

inline UpnModel upn_from_checkpoint(const Checkpoint& ck) {
  require_kind(ck, "upn");
  UpnModel m;
  m.state_dim = static_cast<int>(parse_int(ck.get_meta("state_dim")));
  m.cov_mode = cov_mode_from_string(ck.get_meta("cov_mode"));
  m.eps_noise = parse_double(ck.get_meta("eps_noise"));
  m.psd_floor = parse_double(ck.get_meta("psd_floor"));
  m.noise_gain = parse_double(ck.get_meta("noise_gain"));
  m.init_log_scale = parse_double(ck.get_meta("init_log_scale"));
  m.dynamics = ck.net("dynamics");
  m.noise = ck.net("noise");
  try {
    m.validate();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
  return m;
}

inline Checkpoint node_checkpoint(const DeterministicNode& n) {
  Checkpoint ck;
  ck.set_meta("kind", "node");
  ck.set_meta("state_dim", std::to_string(n.state_dim()));
  ck.nets.emplace_back("dynamics", n.net);
  return ck;
}

inline DeterministicNode node_from_checkpoint(const Checkpoint& ck) {
  require_kind(ck, "node");
  return {ck.net("dynamics")};
}

inline Checkpoint flow_checkpoint(const FlowModel& f) {
  Checkpoint ck = upn_checkpoint(f.upn);
  ck.set_meta("kind", "flow");
  ck.set_meta("horizon", format_double(f.horizon));
  ck.vectors.emplace_back("base_mu", f.base_mu);
  ck.vectors.emplace_back("base_chol", f.base_chol);
  return ck;
}

inline FlowModel flow_from_checkpoint(Checkpoint ck) {
  require_kind(ck, "flow");
  FlowModel f;
  f.horizon = parse_double(ck.get_meta("horizon"));
  f.base_mu = ck.vector("base_mu");
  f.base_chol = ck.vector("base_chol");
  ck.set_meta("kind", "upn");
  f.upn = upn_from_checkpoint(ck);
  f.validate();
  return f;
}

// ---------------------------------------------------------------- shared pieces

struct RunPaths {
  fs::path out;
  fs::path model_file(const std::string& stem) const { return out / (stem + ".ckpt"); }
  fs::path file(const std::string& name) const { return out / name; }
};

inline SimulationConfig simulation_config(const ExperimentConfig& c) {
  SimulationConfig s = c.data;
  s.seed = c.seed;
  return s;
}

inline TrajectoryDataset load_or_simulate(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) {
    TrajectoryDataset ds = load_dataset(c.data_dir);
    if (ds.spec.state_dim != c.system.state_dim)
      throw ConfigError("dataset in " + c.data_dir + " has state_dim " + std::to_string(ds.spec.state_dim) +
                        ", config expects " + std::to_string(c.system.state_dim));
    ds.cfg.history = c.data.history;
    ds.cfg.horizon = c.data.horizon;
    ds.cfg.stride = c.data.stride;
    return ds;
  }
  return simulate_dataset(c.system, simulation_config(c));
}

inline void write_run_config(const ExperimentConfig& c) {
  write_file_atomic(fs::path(c.out) / "config.txt", config_text(c));
}

inline TrainConfig train_config(const ExperimentConfig& c, std::uint64_t stream) {
  TrainConfig t = c.train;
  t.seed = derive_seed(c.seed, stream);
  return t;
}

namespace seeds {
inline constexpr std::uint64_t upn_init = 201, node_init = 202, ensemble_init = 203;
inline constexpr std::uint64_t upn_train = 301, node_train = 302, ensemble_train = 310;
inline constexpr std::uint64_t flow_train_data = 401, flow_val_data = 402, flow_init = 403, flow_train = 404;
}  // namespace seeds

inline void annotate(Checkpoint& ck, const ExperimentConfig& c, const TrainReport& r) {
  ck.set_meta("system", to_string(c.system.kind));
  ck.set_meta("seed", std::to_string(c.seed));
  ck.set_meta("best_epoch", std::to_string(r.best_epoch));
  ck.set_meta("best_val_loss", format_double(r.best_val_loss));
  ck.set_meta("stopped_early", r.stopped_early ? "true" : "false");
  ck.set_meta("skipped_steps", std::to_string(r.skipped_steps));
}

// ---------------------------------------------------------------- generate

inline TrajectoryDataset cmd_generate(const ExperimentConfig& c, std::ostream& log) {
  const TrajectoryDataset ds = simulate_dataset(c.system, simulation_config(c));
  const fs::path dir = fs::path(c.out) / "data";
  save_dataset(ds, dir);
  write_run_config(c);
  log << "generated " << ds.trajectories.size() << " " << to_string(c.system.kind) << " trajectories in "
      << dir.string() << " (train " << ds.train.size() << ", val " << ds.val.size() << ", test " << ds.test.size()
      << ", retries " << ds.retries << ")\n";
  return ds;
}

// ---------------------------------------------------------------- train

struct TrainOutput {
  std::vector<TrainReport> reports;  // one per trained model (ensemble: per member)
};

inline FlowModel flow_model_for(const ExperimentConfig& c) {
  return FlowModel::create(c.hidden, c.flow.alpha, c.flow.horizon, derive_seed(c.seed, seeds::flow_init));
}

struct FlowRunOutput {
  TrainReport report;
  std::vector<std::pair<int, double>> checkpoint_nll;  // epoch -> validation NLL
};

inline FlowRunOutput cmd_flow(const ExperimentConfig& c, std::ostream& log);

inline TrainOutput cmd_train(const ExperimentConfig& c, std::ostream& log) {
  if (c.model == ModelKind::flow) return {{cmd_flow(c, log).report}};
  const TrajectoryDataset ds = load_or_simulate(c);
  const auto train_tasks = make_tasks(ds, make_windows(ds, ds.train));
  const auto val_tasks = make_tasks(ds, make_windows(ds, ds.val));
  if (train_tasks.empty()) throw ConfigError("no training windows: trajectories are shorter than history + horizon");
  const RunPaths paths{c.out};
  const int n = c.system.state_dim;
  TrainOutput out;
  auto finish = [&](Checkpoint ck, const TrainReport& r, const std::string& stem) {
    annotate(ck, c, r);
    save_checkpoint(paths.model_file(stem), ck);
    write_file_atomic(paths.file(stem + "_train.csv"), r.to_csv());
    log << stem << ": " << r.epochs.size() << " epochs, best epoch " << r.best_epoch << ", best val loss "
        << format_double(r.best_val_loss) << (r.stopped_early ? " (early stop)" : "") << '\n';
    out.reports.push_back(r);
  };
  switch (c.model) {
    case ModelKind::upn: {
      UpnModel m = UpnModel::create(n, c.hidden, c.cov_mode, derive_seed(c.seed, seeds::upn_init));
      UpnProblem prob(m, train_tasks, val_tasks, c.solver, c.train.grad_mode);
      const TrainReport r = fit(prob, train_config(c, seeds::upn_train));
      finish(upn_checkpoint(m), r, "upn");
      break;
    }
    case ModelKind::node: {
      DeterministicNode m = DeterministicNode::create(n, c.hidden, derive_seed(c.seed, seeds::node_init));
      NodeProblem prob(m, train_tasks, val_tasks, c.solver);
      const TrainReport r = fit(prob, train_config(c, seeds::node_train));
      finish(node_checkpoint(m), r, "node");
      break;
    }
    case ModelKind::ensemble: {
      EnsembleNode e = EnsembleNode::create(n, c.hidden, c.ensemble_size, derive_seed(c.seed, seeds::ensemble_init));
      for (std::size_t k = 0; k < e.members.size(); ++k) {
        NodeProblem prob(e.members[k], train_tasks, val_tasks, c.solver);
        const TrainReport r = fit(prob, train_config(c, seeds::ensemble_train + k));
        finish(node_checkpoint(e.members[k]), r, "ensemble_" + std::to_string(k));
      }
      break;
    }
    case ModelKind::flow: break;
  }
  write_run_config(c);
  return out;
}

// ---------------------------------------------------------------- eval

struct EvalOutput {
  MetricsReport report;
  std::vector<PredictedPath> predictions;
  std::vector<std::vector<Vec>> truth;
  std::vector<WindowRef> windows;
};

inline constexpr double kEnsembleVarianceFloor = 1e-12;

inline fs::path checkpoint_path(const ExperimentConfig& c, const std::string& stem) {
  return c.checkpoint.empty() ? RunPaths{c.out}.model_file(stem) : fs::path(c.checkpoint);
}

inline void require_state_dim(int got, const ExperimentConfig& c) {
  if (got != c.system.state_dim)
    throw ConfigError("checkpoint state dimension " + std::to_string(got) + " does not match system " +
                      to_string(c.system.kind) + " (" + std::to_string(c.system.state_dim) + ")");
}

/// Predictive Gaussians over the test windows of the model named by
/// c.model: upn (full predicted covariance), node (unit variance) or
/// ensemble (member mean and variance, diagonal).
inline std::vector<PredictedPath> predict_windows(const ExperimentConfig& c, const std::vector<ForecastTask>& tasks) {
  std::vector<PredictedPath> preds;
  preds.reserve(tasks.size());
  switch (c.model) {
    case ModelKind::upn: {
      const UpnModel m = upn_from_checkpoint(load_checkpoint(checkpoint_path(c, "upn")));
      require_state_dim(m.state_dim, c);
      for (const auto& t : tasks) {
        PredictedPath p;
        for (const GaussianState& s : upn_forecast(m, t.mu0, t.times, c.solver)) p.push_back({s.mu, s.sigma.matrix()});
        preds.push_back(std::move(p));
      }
      break;
    }
    case ModelKind::node: {
      const DeterministicNode m = node_from_checkpoint(load_checkpoint(checkpoint_path(c, "node")));
      require_state_dim(m.state_dim(), c);
      for (const auto& t : tasks) {
        PredictedPath p;
        for (const Vec& mu : node_predict(m, t.mu0, t.times, c.solver)) p.push_back({mu, Mat::Identity(mu.size(), mu.size())});
        preds.push_back(std::move(p));
      }
      break;
    }
    case ModelKind::ensemble: {
      EnsembleNode e;
      for (int k = 0; k < c.ensemble_size; ++k)
        e.members.push_back(
            node_from_checkpoint(load_checkpoint(RunPaths{c.out}.model_file("ensemble_" + std::to_string(k)))));
      require_state_dim(e.members.front().state_dim(), c);
      for (const auto& t : tasks) {
        const EnsemblePrediction ep = ensemble_predict(e, t.mu0, t.times, c.solver);
        PredictedPath p;
        for (std::size_t s = 0; s < ep.mean.size(); ++s)
          p.push_back({ep.mean[s], Mat(ep.variance[s].cwiseMax(kEnsembleVarianceFloor).asDiagonal())});
        preds.push_back(std::move(p));
      }
      break;
    }
    case ModelKind::flow: throw ConfigError("eval: flow models are evaluated by the flow command");
  }
  return preds;
}

inline std::string band_csv(const TrajectoryDataset& ds, const WindowRef& w, const PredictedPath& pred,
                            const std::vector<Vec>& truth) {
  CsvWriter out({"time", "dim", "mean", "lower", "upper", "truth"});
  const double z = central_z(0.95);
  const std::size_t last = w.start + static_cast<std::size_t>(ds.cfg.history) - 1;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    const double t = ds.trajectories[w.trajectory].times[last + 1 + s];
    for (Eigen::Index i = 0; i < pred[s].mean.size(); ++i) {
      const double sd = std::sqrt(std::max(pred[s].cov(i, i), 0.0));
      out.row({t, static_cast<double>(i), pred[s].mean(i), pred[s].mean(i) - z * sd, pred[s].mean(i) + z * sd,
               truth[s](i)});
    }
  }
  return out.str();
}

inline EvalOutput cmd_eval(const ExperimentConfig& c, std::ostream& log) {
  const TrajectoryDataset ds = load_or_simulate(c);
  EvalOutput out;
  out.windows = make_windows(ds, ds.test);
  if (out.windows.empty()) throw ConfigError("eval: the test split has no complete windows");
  const auto tasks = make_tasks(ds, out.windows);
  out.predictions = predict_windows(c, tasks);
  for (const auto& t : tasks) out.truth.push_back(t.targets);
  out.report = evaluate(out.predictions, out.truth);
  const RunPaths paths{c.out};
  const std::string stem = to_string(c.model);
  CsvWriter w = metrics_writer();
  append_metrics_rows(w, stem, to_string(c.system.kind), out.report);
  w.save(paths.file(stem + "_metrics.csv"));
  write_file_atomic(paths.file(stem + "_horizon.csv"), horizon_csv(out.report));
  write_file_atomic(paths.file(stem + "_calibration.csv"), calibration_csv(out.report));
  const auto picks = detail::evenly_spaced(out.windows.size(), static_cast<std::size_t>(c.band_windows));
  for (std::size_t k = 0; k < picks.size() && k < static_cast<std::size_t>(c.band_windows); ++k) {
    const std::size_t i = picks[k];
    write_file_atomic(paths.file(stem + "_band_" + std::to_string(k) + ".csv"),
                      band_csv(ds, out.windows[i], out.predictions[i], out.truth[i]));
  }
  log << stem << " on " << to_string(c.system.kind) << ": " << out.windows.size() << " test windows, mse "
      << format_double(out.report.mse) << ", nll " << format_double(out.report.nll) << ", crps "
      << format_double(out.report.crps) << ", coverage@0.95 " << format_double(out.report.coverage_at(0.95)) << '\n';
  return out;
}

// ---------------------------------------------------------------- flow

inline FlowRunOutput cmd_flow(const ExperimentConfig& c, std::ostream& log) {
  const ToyDataset train = make_toy_dataset(c.flow.dataset, c.flow.samples, c.flow.noise,
                                            derive_seed(c.seed, seeds::flow_train_data));
  const ToyDataset val = make_toy_dataset(c.flow.dataset, c.flow.val_samples, c.flow.noise,
                                          derive_seed(c.seed, seeds::flow_val_data));
  for (int e : c.flow.checkpoints)
    if (e > c.train.epochs)
      throw ConfigError("flow.checkpoints: epoch " + std::to_string(e) + " is beyond train.epochs = " +
                        std::to_string(c.train.epochs));
  FlowModel model = flow_model_for(c);
  SolverConfig train_solver;
  train_solver.method = Method::rk4_fixed;
  train_solver.step = c.flow.step;
  SolverConfig eval_solver;
  eval_solver.rtol = c.flow.eval_rtol;
  eval_solver.atol = c.flow.eval_rtol * 1e-2;
  const RunPaths paths{c.out};
  write_file_atomic(paths.file("flow_data.csv"), toy_dataset_csv(train));
  FlowProblem prob(model, train.points, val.points, train_solver, eval_solver);
  FlowRunOutput out;
  auto export_at = [&](int epoch, double val_nll) {
    const std::string tag = "epoch_" + std::to_string(epoch);
    Checkpoint ck = flow_checkpoint(model);
    ck.set_meta("epoch", std::to_string(epoch));
    ck.set_meta("dataset", to_string(c.flow.dataset));
    ck.set_meta("seed", std::to_string(c.seed));
    save_checkpoint(paths.model_file("flow_" + tag), ck);
    write_file_atomic(paths.file("density_" + tag + ".csv"),
                      export_density_grid(model, c.flow.bounds, c.flow.grid_resolution, eval_solver).csv());
    write_file_atomic(paths.file("transform_" + tag + ".csv"),
                      export_transform_field(model, c.flow.bounds, c.flow.grid_resolution, eval_solver).csv());
    out.checkpoint_nll.emplace_back(epoch, val_nll);
    log << "flow " << to_string(c.flow.dataset) << " epoch " << epoch << ": val nll " << format_double(val_nll) << '\n';
  };
  const bool wants_zero = c.train.epochs == 0 || std::find(c.flow.checkpoints.begin(), c.flow.checkpoints.end(), 0) !=
                                                      c.flow.checkpoints.end();
  const TrainConfig tc = train_config(c, seeds::flow_train);
  if (wants_zero)
    export_at(0, validation_loss(prob, detail::evenly_spaced(val.points.size(), static_cast<std::size_t>(tc.val_windows))));
  out.report = fit(prob, tc, [&](const EpochRecord& r) {
    if (std::find(c.flow.checkpoints.begin(), c.flow.checkpoints.end(), r.epoch) != c.flow.checkpoints.end())
      export_at(r.epoch, r.val_loss);
  });
  Checkpoint final_ck = flow_checkpoint(model);
  annotate(final_ck, c, out.report);
  final_ck.set_meta("dataset", to_string(c.flow.dataset));
  save_checkpoint(paths.model_file("flow"), final_ck);
  write_file_atomic(paths.file("flow_train.csv"), out.report.to_csv());
  CsvWriter nll({"epoch", "val_nll"});
  for (const auto& [e, v] : out.checkpoint_nll) nll.row({static_cast<double>(e), v});
  nll.save(paths.file("flow_checkpoints.csv"));
  write_run_config(c);
  return out;
}

// ---------------------------------------------------------------- filter

/// Observation CSV: header `time,y_0,...,y_{n-1}`; an empty cell or `nan`
/// marks a missing value. Times must increase strictly.
inline ObservationSeries read_observations(const fs::path& path, int n, const ObservationModel& model) {
  const std::string text = read_file(path);
  ObservationSeries obs;
  obs.model = model;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  const auto where = [&path](const std::string& what, std::size_t l) { return ParseError(path.string() + ": " + what, l); };
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (!header) {
      if (cells.size() != static_cast<std::size_t>(n + 1) || trim(cells[0]) != "time")
        throw where("header must be time followed by " + std::to_string(n) + " value columns", lineno);
      header = true;
      continue;
    }
    if (cells.size() != static_cast<std::size_t>(n + 1))
      throw where("expected " + std::to_string(n + 1) + " fields, got " + std::to_string(cells.size()), lineno);
    double t = 0.0;
    try {
      t = parse_double(cells[0]);
    } catch (const ConfigError&) {
      throw where("time is not a number", lineno);
    }
    if (!std::isfinite(t)) throw where("time must be finite", lineno);
    if (!obs.times.empty() && !(t > obs.times.back())) throw where("times must increase strictly", lineno);
    Vec y = Vec::Zero(n);
    Mask m(static_cast<std::size_t>(n), true);
    for (int i = 0; i < n; ++i) {
      const std::string cell = trim(cells[static_cast<std::size_t>(i + 1)]);
      double v = std::numeric_limits<double>::quiet_NaN();
      if (!cell.empty()) {
        try {
          v = parse_double(cell);
        } catch (const ConfigError&) {
          throw where("non-numeric value '" + cell + "'", lineno);
        }
      }
      if (std::isnan(v)) m[static_cast<std::size_t>(i)] = false;
      else if (!std::isfinite(v)) throw where("infinite value", lineno);
      else y(i) = v;
    }
    obs.times.push_back(t);
    obs.values.push_back(y);
    obs.masks.push_back(m);
  }
  if (!header) throw where("missing header", std::max<std::size_t>(lineno, 1));
  return obs;
}

inline std::string observation_csv(const ObservationSeries& obs) {
  const int n = static_cast<int>(obs.values.empty() ? 0 : obs.values.front().size());
  std::vector<std::string> header{"time"};
  for (int i = 0; i < n; ++i) header.push_back("y_" + std::to_string(i));
  CsvWriter w(header);
  for (std::size_t k = 0; k < obs.size(); ++k) {
    std::vector<std::string> row{format_double(obs.times[k])};
    for (int i = 0; i < n; ++i) {
      const Mask& m = obs.mask(k);
      row.push_back(m.empty() || m[static_cast<std::size_t>(i)] ? format_double(obs.values[k](i)) : "");
    }
    w.row_strings(row);
  }
  return w.str();
}

struct FilterOutput {
  std::vector<double> times;
  std::vector<GaussianState> prior, posterior;
};

inline std::string filter_csv(const FilterOutput& f) {
  const int n = f.prior.empty() ? 0 : f.prior.front().dim();
  std::vector<std::string> header{"time"};
  for (const char* part : {"prior_mean_", "prior_var_", "post_mean_", "post_var_"})
    for (int i = 0; i < n; ++i) header.push_back(part + std::to_string(i));
  CsvWriter w(header);
  for (std::size_t k = 0; k < f.times.size(); ++k) {
    std::vector<double> row{f.times[k]};
    const Vec pv = f.prior[k].sigma.diagonal(), qv = f.posterior[k].sigma.diagonal();
    for (int i = 0; i < n; ++i) row.push_back(f.prior[k].mu(i));
    for (int i = 0; i < n; ++i) row.push_back(pv(i));
    for (int i = 0; i < n; ++i) row.push_back(f.posterior[k].mu(i));
    for (int i = 0; i < n; ++i) row.push_back(qv(i));
    w.row(row);
  }
  return w.str();
}

/// Runs filter_pass over an observation CSV. Without filter.init_mean the
/// first (complete) observation initializes the state and is not reused as
/// an update. With no observations the state is propagated on a data.dt grid
/// up to filter.t_end.
inline FilterOutput cmd_filter(const ExperimentConfig& c, std::ostream& log) {
  const UpnModel m = upn_from_checkpoint(load_checkpoint(checkpoint_path(c, "upn")));
  require_state_dim(m.state_dim, c);
  const int n = m.state_dim;
  if (c.filter.observations.empty()) throw ConfigError("filter.observations (--observations) is required");
  const double std_obs = c.filter.obs_std >= 0.0 ? c.filter.obs_std : c.system.noise_std;
  const ObservationModel model =
      ObservationModel::linear(Mat::Identity(n, n), std::max(std_obs * std_obs, 1e-12) * Mat::Identity(n, n));
  ObservationSeries obs = read_observations(c.filter.observations, n, model);
  GaussianState init;
  init.sigma = SymMatrix(std::exp(2.0 * m.init_log_scale) * Mat::Identity(n, n));
  if (!c.filter.init_mean.empty()) {
    std::vector<double> v;
    for (const auto& tok : split(c.filter.init_mean, ',')) v.push_back(detail::to_double("filter.init_mean", tok));
    if (v.size() != static_cast<std::size_t>(n))
      throw ConfigError("filter.init_mean needs " + std::to_string(n) + " values");
    init.mu = Eigen::Map<const Vec>(v.data(), n);
    init.t = obs.times.empty() ? 0.0 : std::min(0.0, obs.times.front());
  } else {
    if (obs.times.empty()) throw ConfigError("filter: no observations, so filter.init_mean is required");
    for (bool present : obs.mask(0))
      if (!present) throw ConfigError("filter: the first observation is incomplete; set filter.init_mean");
    init.mu = obs.values.front();
    init.t = obs.times.front();
  }
  FilterOutput out;
  std::size_t first = 0;
  if (c.filter.init_mean.empty()) {
    out.times.push_back(init.t);
    out.prior.push_back(init);
    out.posterior.push_back(init);
    first = 1;
  }
  ObservationSeries rest;
  rest.model = obs.model;
  for (std::size_t k = first; k < obs.size(); ++k) {
    rest.times.push_back(obs.times[k]);
    rest.values.push_back(obs.values[k]);
    rest.masks.push_back(obs.masks[k]);
  }
  const double last = obs.times.empty() ? init.t : obs.times.back();
  const double t_end = c.filter.t_end >= 0.0 ? c.filter.t_end : (obs.times.empty() ? c.data.horizon * c.data.dt : last);
  const FilterResult r = rest.size() > 0 ? filter_pass(m, init, rest, c.solver) : FilterResult{};
  GaussianState state = init;
  for (const auto& s : r.steps) {
    out.times.push_back(s.t);
    out.prior.push_back(s.prior);
    out.posterior.push_back(s.posterior);
    state = s.posterior;
  }
  // propagate-only rows beyond the last observation
  for (int k = 1; state.t + c.data.dt * 0.5 < t_end; ++k) {
    const double t = std::min(t_end, last + k * c.data.dt);
    GaussianState s = detail::propagate(m, state, t - state.t, c.solver);
    s.t = t;
    out.times.push_back(t);
    out.prior.push_back(s);
    out.posterior.push_back(s);
    state = s;
  }
  write_file_atomic(fs::path(c.out) / "filter.csv", filter_csv(out));
  write_run_config(c);
  log << "filtered " << rest.size() << " observations, " << out.times.size() << " rows\n";
  return out;
}

// ---------------------------------------------------------------- entry point

inline constexpr int kExitOk = 0, kExitConfig = 2, kExitNumerical = 3, kExitIo = 4;

/// `--system x` style shortcuts for common keys; any other `--a.b value`
/// (or `--a.b=value`) sets config key a.b directly.
inline std::string flag_key(const std::string& flag) {
  static const std::vector<std::pair<std::string, std::string>> aliases{
      {"system", "system.name"},      {"model", "model.kind"},          {"epochs", "train.epochs"},
      {"size", "model.ensemble_size"}, {"dataset", "flow.dataset"},     {"checkpoints", "flow.checkpoints"},
      {"observations", "filter.observations"}, {"data", "data.dir"},    {"hidden", "model.hidden"},
      {"lr", "train.lr"},             {"cov-mode", "model.cov_mode"},   {"grad-mode", "train.grad_mode"}};
  for (const auto& [a, k] : aliases)
    if (a == flag) return k;
  return flag;
}

inline KeyValues parse_flag_pairs(const std::vector<std::string>& args) {
  KeyValues kv;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0 || a.size() <= 2) throw ConfigError("unexpected argument '" + a + "'");
    std::string name = a.substr(2), value;
    if (const auto eq = name.find('='); eq != std::string::npos) {
      value = name.substr(eq + 1);
      name = name.substr(0, eq);
    } else {
      if (i + 1 >= args.size()) throw ConfigError("flag --" + name + " needs a value");
      value = args[++i];
    }
    kv.emplace_back(flag_key(name), value);
  }
  return kv;
}

/// Full command-line entry point; returns the process exit code.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Uncertainty propagation networks: data generation, training, evaluation, flows and filtering",
               "upn"};
  app.require_subcommand(0, 1);
  std::string show_preset;
  bool list_presets = false;
  app.add_option("--show-preset", show_preset, "Print an embedded preset and exit");
  app.add_flag("--list-presets", list_presets, "List embedded presets and exit");
  ConfigSources src;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"generate", "Simulate a dataset and write trajectory CSVs plus a manifest"},
      {"train", "Train a upn, node, ensemble or flow model"},
      {"eval", "Evaluate a trained model on the test split"},
      {"flow", "Train a flow on a 2-D toy dataset and export density grids"},
      {"filter", "Run the predict/update filter over an observation CSV"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", src.config_file, "Config file (key = value lines)");
    s->add_option("--preset", src.preset, "Embedded preset name (see --list-presets)");
    s->allow_extras();
    subs.push_back(s);
  }
  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int code = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return code == 0 ? kExitOk : kExitConfig;
  }
  try {
    if (list_presets) {
      for (const auto& n : preset_names()) out << n << '\n';
      return kExitOk;
    }
    if (!show_preset.empty()) {
      for (const auto& e : presets::all)
        if (e.name == show_preset) {
          out << e.text;
          return kExitOk;
        }
      throw ConfigError("unknown preset '" + show_preset + "'");
    }
    CLI::App* chosen = nullptr;
    for (CLI::App* s : subs)
      if (s->parsed()) chosen = s;
    if (chosen == nullptr) {
      out << app.help();
      return kExitConfig;
    }
    src.command = chosen->get_name();
    src.flags = parse_flag_pairs(chosen->remaining());
    const ExperimentConfig c = resolve_config(src);
    if (src.command == "generate") cmd_generate(c, out);
    else if (src.command == "train") cmd_train(c, out);
    else if (src.command == "eval") cmd_eval(c, out);
    else if (src.command == "flow") cmd_flow(c, out);
    else cmd_filter(c, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DomainError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  }
}

}  // namespace upn
