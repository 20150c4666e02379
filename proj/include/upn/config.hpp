#pragma once

// Experiment configuration: flat key=value text with section prefixes
// (system.*, data.*, model.*, train.*, solver.*, eval.*, flow.*, filter.*).
// Later sources override earlier ones: defaults, preset, file, flags.

#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/flow.hpp"
#include "upn/io.hpp"
#include "upn/ode.hpp"
#include "upn/systems.hpp"
#include "upn/training.hpp"

namespace upn {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines. '#' starts a comment; blank lines are skipped.
/// `[section]` lines prefix the keys that follow with "section.".
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", lineno);
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", lineno);
    if (!section.empty()) key = section + "." + key;
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  try {
    for (const auto& tok : split(s, ',')) out.push_back(static_cast<int>(parse_int(tok)));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

enum class ModelKind { upn, node, ensemble, flow };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::upn: return "upn";
    case ModelKind::node: return "node";
    case ModelKind::ensemble: return "ensemble";
    case ModelKind::flow: return "flow";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "upn") return ModelKind::upn;
  if (s == "node") return ModelKind::node;
  if (s == "ensemble") return ModelKind::ensemble;
  if (s == "flow") return ModelKind::flow;
  throw ConfigError("unknown model '" + s + "' (expected upn|node|ensemble|flow)");
}

struct FlowSettings {
  ToyKind dataset = ToyKind::moons;
  int samples = 512;
  int val_samples = 256;
  double noise = 0.05;
  double alpha = 1e-8;
  double horizon = 1.0;
  double step = 0.05;       // taped RK4 step for training
  double eval_rtol = 1e-5;  // dopri45 tolerance for NLL and grids
  std::vector<int> checkpoints{50, 150};
  int grid_resolution = 60;
  GridBounds bounds;
};

struct FilterSettings {
  std::string observations;  // CSV path
  std::string init_mean;     // comma list; empty = first observation
  double obs_std = -1.0;     // < 0: system noise_std
  double t_end = -1.0;       // < 0: last observation time
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "run";
  std::string checkpoint;  // empty: <out>/<model>.ckpt
  std::string data_dir;    // empty: simulate from data.*
  SystemSpec system = default_system(SystemKind::linear_oscillator);
  SimulationConfig data;
  ModelKind model = ModelKind::upn;
  std::vector<int> hidden{64};
  CovMode cov_mode = CovMode::diagonal;
  int ensemble_size = 5;
  TrainConfig train;
  SolverConfig solver;
  int band_windows = 3;  // test windows exported as band CSVs
  FlowSettings flow;
  FilterSettings filter;

  void validate() const {
    system.validate();
    data.validate();
    train.validate();
    solver.validate();
    if (hidden.empty()) throw ConfigError("model.hidden must list at least one width");
    for (int h : hidden)
      if (h < 1) throw ConfigError("model.hidden widths must be >= 1");
    if (ensemble_size < 2) throw ConfigError("model.ensemble_size must be >= 2");
    if (band_windows < 0) throw ConfigError("eval.band_windows must be >= 0");
    if (flow.samples < 1 || flow.val_samples < 1) throw ConfigError("flow.samples and flow.val_samples must be >= 1");
    if (!(flow.alpha >= 0.0) || !(flow.horizon > 0.0) || !(flow.step > 0.0) || !(flow.eval_rtol > 0.0))
      throw ConfigError("flow: alpha >= 0, horizon > 0, step > 0, eval_rtol > 0 required");
    if (flow.grid_resolution < 2) throw ConfigError("flow.grid_resolution must be >= 2");
    for (int c : flow.checkpoints)
      if (c < 0) throw ConfigError("flow.checkpoints must be >= 0");
  }
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline int to_int(const std::string& key, const std::string& v) {
  try {
    return static_cast<int>(parse_int(v));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true|false, got '" + v + "'");
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  long long x = 0;
  try {
    x = parse_int(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
  if (x < 0) throw ConfigError(key + ": must be >= 0");
  return static_cast<std::uint64_t>(x);
}

}  // namespace detail

/// Applies one key. system.name resets the system parameters to that
/// system's defaults, so it should come before system.<param> keys;
/// apply_key_values takes care of that ordering.
inline void apply_key(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using detail::to_double;
  using detail::to_int;
  if (key == "seed") c.seed = detail::to_u64(key, v);
  else if (key == "out") c.out = v;
  else if (key == "checkpoint") c.checkpoint = v;
  else if (key == "data.dir") c.data_dir = v;
  else if (key == "system.name") c.system = default_system(system_from_string(v));
  else if (key == "system.noise_std") c.system.noise_std = to_double(key, v);
  else if (key.rfind("system.", 0) == 0) c.system.set_param(key.substr(7), to_double(key, v));
  else if (key == "data.trajectories") c.data.trajectories = to_int(key, v);
  else if (key == "data.duration") c.data.duration = to_double(key, v);
  else if (key == "data.dt") c.data.dt = to_double(key, v);
  else if (key == "data.init_low") c.data.init_low = to_double(key, v);
  else if (key == "data.init_high") c.data.init_high = to_double(key, v);
  else if (key == "data.history") c.data.history = to_int(key, v);
  else if (key == "data.horizon") c.data.horizon = to_int(key, v);
  else if (key == "data.stride") c.data.stride = to_int(key, v);
  else if (key == "data.train_fraction") c.data.train_fraction = to_double(key, v);
  else if (key == "data.val_fraction") c.data.val_fraction = to_double(key, v);
  else if (key == "model.kind") c.model = model_kind_from_string(v);
  else if (key == "model.hidden") c.hidden = parse_int_list(v, key);
  else if (key == "model.cov_mode") c.cov_mode = cov_mode_from_string(v);
  else if (key == "model.ensemble_size") c.ensemble_size = to_int(key, v);
  else if (key == "train.lr") c.train.lr = to_double(key, v);
  else if (key == "train.epochs") c.train.epochs = to_int(key, v);
  else if (key == "train.batch_size") c.train.batch_size = to_int(key, v);
  else if (key == "train.grad_mode") c.train.grad_mode = grad_mode_from_string(v);
  else if (key == "train.early_stop_patience") c.train.early_stop_patience = to_int(key, v);
  else if (key == "train.grad_clip") c.train.grad_clip = to_double(key, v);
  else if (key == "train.windows_per_epoch") c.train.windows_per_epoch = to_int(key, v);
  else if (key == "train.val_windows") c.train.val_windows = to_int(key, v);
  else if (key == "train.record_time") c.train.record_time = detail::to_bool(key, v);
  else if (key == "solver.method") c.solver.method = method_from_string(v);
  else if (key == "solver.step") c.solver.step = to_double(key, v);
  else if (key == "solver.rtol") c.solver.rtol = to_double(key, v);
  else if (key == "solver.atol") c.solver.atol = to_double(key, v);
  else if (key == "solver.max_steps") c.solver.max_steps = to_int(key, v);
  else if (key == "eval.band_windows") c.band_windows = to_int(key, v);
  else if (key == "flow.dataset") c.flow.dataset = toy_from_string(v);
  else if (key == "flow.samples") c.flow.samples = to_int(key, v);
  else if (key == "flow.val_samples") c.flow.val_samples = to_int(key, v);
  else if (key == "flow.noise") c.flow.noise = to_double(key, v);
  else if (key == "flow.alpha") c.flow.alpha = to_double(key, v);
  else if (key == "flow.horizon") c.flow.horizon = to_double(key, v);
  else if (key == "flow.step") c.flow.step = to_double(key, v);
  else if (key == "flow.eval_rtol") c.flow.eval_rtol = to_double(key, v);
  else if (key == "flow.checkpoints") c.flow.checkpoints = parse_int_list(v, key);
  else if (key == "flow.grid_resolution") c.flow.grid_resolution = to_int(key, v);
  else if (key == "flow.bounds") {
    std::vector<double> b;
    for (const auto& tok : split(v, ',')) b.push_back(to_double(key, tok));
    if (b.size() != 4) throw ConfigError("flow.bounds: expected x_min,x_max,y_min,y_max");
    c.flow.bounds = {b[0], b[1], b[2], b[3]};
  } else if (key == "filter.observations") c.filter.observations = v;
  else if (key == "filter.init_mean") c.filter.init_mean = v;
  else if (key == "filter.obs_std") c.filter.obs_std = to_double(key, v);
  else if (key == "filter.t_end") c.filter.t_end = to_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_key_values(ExperimentConfig& c, const KeyValues& kv) {
  for (const auto& [k, v] : kv)
    if (k == "system.name") apply_key(c, k, v);
  for (const auto& [k, v] : kv)
    if (k != "system.name") apply_key(c, k, v);
}

/// Every key, one per line, in a fixed order. parse + apply of this text
/// reproduces the config exactly.
inline std::string config_text(const ExperimentConfig& c) {
  std::ostringstream os;
  auto line = [&os](const std::string& k, const std::string& v) { os << k << " = " << v << '\n'; };
  auto num = [&line](const std::string& k, double v) { line(k, format_double(v)); };
  line("seed", std::to_string(c.seed));
  line("out", c.out);
  line("checkpoint", c.checkpoint);
  line("data.dir", c.data_dir);
  line("system.name", to_string(c.system.kind));
  for (const auto& [k, v] : c.system.params) num("system." + k, v);
  num("system.noise_std", c.system.noise_std);
  line("data.trajectories", std::to_string(c.data.trajectories));
  num("data.duration", c.data.duration);
  num("data.dt", c.data.dt);
  num("data.init_low", c.data.init_low);
  num("data.init_high", c.data.init_high);
  line("data.history", std::to_string(c.data.history));
  line("data.horizon", std::to_string(c.data.horizon));
  line("data.stride", std::to_string(c.data.stride));
  num("data.train_fraction", c.data.train_fraction);
  num("data.val_fraction", c.data.val_fraction);
  line("model.kind", to_string(c.model));
  line("model.hidden", join_ints(c.hidden));
  line("model.cov_mode", to_string(c.cov_mode));
  line("model.ensemble_size", std::to_string(c.ensemble_size));
  num("train.lr", c.train.lr);
  line("train.epochs", std::to_string(c.train.epochs));
  line("train.batch_size", std::to_string(c.train.batch_size));
  line("train.grad_mode", to_string(c.train.grad_mode));
  line("train.early_stop_patience", std::to_string(c.train.early_stop_patience));
  num("train.grad_clip", c.train.grad_clip);
  line("train.windows_per_epoch", std::to_string(c.train.windows_per_epoch));
  line("train.val_windows", std::to_string(c.train.val_windows));
  line("train.record_time", c.train.record_time ? "true" : "false");
  line("solver.method", to_string(c.solver.method));
  num("solver.step", c.solver.step);
  num("solver.rtol", c.solver.rtol);
  num("solver.atol", c.solver.atol);
  line("solver.max_steps", std::to_string(c.solver.max_steps));
  line("eval.band_windows", std::to_string(c.band_windows));
  line("flow.dataset", to_string(c.flow.dataset));
  line("flow.samples", std::to_string(c.flow.samples));
  line("flow.val_samples", std::to_string(c.flow.val_samples));
  num("flow.noise", c.flow.noise);
  num("flow.alpha", c.flow.alpha);
  num("flow.horizon", c.flow.horizon);
  num("flow.step", c.flow.step);
  num("flow.eval_rtol", c.flow.eval_rtol);
  line("flow.checkpoints", join_ints(c.flow.checkpoints));
  line("flow.grid_resolution", std::to_string(c.flow.grid_resolution));
  line("flow.bounds", format_double(c.flow.bounds.x_min) + "," + format_double(c.flow.bounds.x_max) + "," +
                          format_double(c.flow.bounds.y_min) + "," + format_double(c.flow.bounds.y_max));
  line("filter.observations", c.filter.observations);
  line("filter.init_mean", c.filter.init_mean);
  num("filter.obs_std", c.filter.obs_std);
  num("filter.t_end", c.filter.t_end);
  return os.str();
}

inline ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig c;
  apply_key_values(c, parse_key_values(text));
  return c;
}

}  // namespace upn
