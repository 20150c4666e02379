#pragma once

// Ground-truth dynamical systems, trajectory simulation with observation
// noise, train/val/test splits and forecasting windows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/io.hpp"
#include "upn/measurement.hpp"
#include "upn/ode.hpp"
#include "upn/training.hpp"

namespace upn {

enum class SystemKind { linear_oscillator, van_der_pol, linear_2d, lorenz };

inline std::string to_string(SystemKind k) {
  switch (k) {
    case SystemKind::linear_oscillator: return "linear_oscillator";
    case SystemKind::van_der_pol: return "van_der_pol";
    case SystemKind::linear_2d: return "linear_2d";
    case SystemKind::lorenz: return "lorenz";
  }
  return "?";
}

inline SystemKind system_from_string(const std::string& s) {
  if (s == "linear_oscillator") return SystemKind::linear_oscillator;
  if (s == "van_der_pol") return SystemKind::van_der_pol;
  if (s == "linear_2d") return SystemKind::linear_2d;
  if (s == "lorenz") return SystemKind::lorenz;
  throw ConfigError("unknown system '" + s + "' (expected linear_oscillator|van_der_pol|linear_2d|lorenz)");
}

struct SystemSpec {
  SystemKind kind = SystemKind::linear_oscillator;
  std::vector<std::pair<std::string, double>> params;
  int state_dim = 2;
  double noise_std = 0.05;

  double param(const std::string& name) const {
    for (const auto& [k, v] : params)
      if (k == name) return v;
    throw ConfigError("system " + to_string(kind) + ": missing parameter '" + name + "'");
  }

  void set_param(const std::string& name, double value) {
    for (auto& [k, v] : params)
      if (k == name) {
        v = value;
        return;
      }
    throw ConfigError("system " + to_string(kind) + ": unknown parameter '" + name + "'");
  }

  void validate() const {
    if (!(noise_std >= 0.0)) throw ConfigError("system.noise_std must be >= 0");
    switch (kind) {
      case SystemKind::linear_oscillator:
        param("k"), param("c");
        if (!(param("m") > 0.0)) throw ConfigError("system.m must be > 0");
        break;
      case SystemKind::van_der_pol: param("mu"); break;
      case SystemKind::linear_2d: param("a11"), param("a12"), param("a21"), param("a22"); break;
      case SystemKind::lorenz: param("sigma"), param("rho"), param("beta"); break;
    }
  }
};

/// Default parameters: k = m = 1, c = 0.1; mu = 0.5; A = [[-0.1, 0.5],
/// [-0.5, -0.1]]; sigma = 10, rho = 28, beta = 8/3. Observation noise 0.05
/// for the oscillators and 0.1 otherwise.
inline SystemSpec default_system(SystemKind kind) {
  SystemSpec s;
  s.kind = kind;
  switch (kind) {
    case SystemKind::linear_oscillator:
      s.params = {{"k", 1.0}, {"m", 1.0}, {"c", 0.1}};
      s.noise_std = 0.05;
      break;
    case SystemKind::van_der_pol:
      s.params = {{"mu", 0.5}};
      s.noise_std = 0.05;
      break;
    case SystemKind::linear_2d:
      s.params = {{"a11", -0.1}, {"a12", 0.5}, {"a21", -0.5}, {"a22", -0.1}};
      s.noise_std = 0.1;
      break;
    case SystemKind::lorenz:
      s.params = {{"sigma", 10.0}, {"rho", 28.0}, {"beta", 8.0 / 3.0}};
      s.state_dim = 3;
      s.noise_std = 0.1;
      break;
  }
  return s;
}

inline Vec system_rhs(const SystemSpec& spec, const Vec& x, double /*t*/) {
  detail::require_dims(x.size() == spec.state_dim, "system_rhs: state has length " + std::to_string(x.size()) +
                                                      ", expected " + std::to_string(spec.state_dim));
  Vec d(x.size());
  switch (spec.kind) {
    case SystemKind::linear_oscillator: {
      const double k = spec.param("k"), m = spec.param("m"), c = spec.param("c");
      d << x(1), -(c / m) * x(1) - (k / m) * x(0);
      break;
    }
    case SystemKind::van_der_pol: {
      const double mu = spec.param("mu");
      d << x(1), mu * (1.0 - x(0) * x(0)) * x(1) - x(0);
      break;
    }
    case SystemKind::linear_2d:
      d << spec.param("a11") * x(0) + spec.param("a12") * x(1), spec.param("a21") * x(0) + spec.param("a22") * x(1);
      break;
    case SystemKind::lorenz: {
      const double s = spec.param("sigma"), r = spec.param("rho"), b = spec.param("beta");
      d << s * (x(1) - x(0)), x(0) * (r - x(2)) - x(1), x(0) * x(1) - b * x(2);
      break;
    }
  }
  return d;
}

struct SimulationConfig {
  int trajectories = 50;
  double duration = 20.0;
  double dt = 0.1;
  std::uint64_t seed = 0;
  double init_low = -2.0;  // initial conditions uniform over [low, high]^n
  double init_high = 2.0;
  int history = 10;
  int horizon = 20;
  int stride = 1;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  SolverConfig solver;  // dopri45 by default

  int grid_points() const { return static_cast<int>(std::llround(duration / dt)) + 1; }

  void validate() const {
    if (trajectories < 1) throw ConfigError("data.trajectories must be >= 1");
    if (!(duration > 0.0) || !(dt > 0.0)) throw ConfigError("data.duration and data.dt must be > 0");
    if (!(init_high >= init_low)) throw ConfigError("data.init_high must be >= data.init_low");
    if (history < 1 || horizon < 1 || stride < 1) throw ConfigError("data: history, horizon and stride must be >= 1");
    if (train_fraction <= 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
      throw ConfigError("data: split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
    solver.validate();
  }
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Vec> clean;
  std::vector<Vec> observed;
};

struct TrajectoryDataset {
  SystemSpec spec;
  SimulationConfig cfg;
  std::vector<Trajectory> trajectories;
  std::vector<std::size_t> train, val, test;  // trajectory indices
  std::size_t retries = 0;                    // initial conditions redrawn after divergence
};

struct WindowRef {
  std::size_t trajectory = 0;
  std::size_t start = 0;  // first history index
};

namespace detail {

inline void split_indices(TrajectoryDataset& ds, std::mt19937_64& gen) {
  std::vector<std::size_t> idx(ds.trajectories.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), gen);
  const auto n = idx.size();
  const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ds.cfg.train_fraction * n + 1e-9)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(ds.cfg.val_fraction * n + 1e-9)));
  ds.train.assign(idx.begin(), idx.begin() + n_train);
  ds.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  ds.test.assign(idx.begin() + n_train + n_val, idx.end());
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.val.begin(), ds.val.end());
  std::sort(ds.test.begin(), ds.test.end());
}

}  // namespace detail

/// Simulates `cfg.trajectories` trajectories on the regular grid with
/// dopri45 dense output and adds i.i.d. Gaussian observation noise.
inline TrajectoryDataset simulate_dataset(const SystemSpec& spec, const SimulationConfig& cfg) {
  spec.validate();
  cfg.validate();
  TrajectoryDataset ds;
  ds.spec = spec;
  ds.cfg = cfg;
  std::mt19937_64 ic_gen(derive_seed(cfg.seed, 11));
  std::mt19937_64 noise_gen(derive_seed(cfg.seed, 12));
  std::mt19937_64 split_gen(derive_seed(cfg.seed, 13));
  std::uniform_real_distribution<double> ic(cfg.init_low, cfg.init_high);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int points = cfg.grid_points();
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) grid[static_cast<std::size_t>(i)] = i * cfg.dt;
  const auto rhs = [&spec](const Vec& x, double t) { return system_rhs(spec, x, t); };
  for (int k = 0; k < cfg.trajectories; ++k) {
    Solution sol;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 100) throw DivergenceError("simulate_dataset: could not find a stable initial condition", 0.0);
      Vec x0(spec.state_dim);
      for (int i = 0; i < spec.state_dim; ++i) x0(i) = ic(ic_gen);
      try {
        sol = integrate(rhs, x0, grid, cfg.solver);
        break;
      } catch (const NumericalError&) {
        ++ds.retries;
      }
    }
    Trajectory tr;
    tr.times = grid;
    tr.clean = std::move(sol.states);
    tr.observed.reserve(tr.clean.size());
    for (const Vec& x : tr.clean) {
      Vec y = x;
      for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += spec.noise_std * noise(noise_gen);
      tr.observed.push_back(std::move(y));
    }
    ds.trajectories.push_back(std::move(tr));
  }
  detail::split_indices(ds, split_gen);
  return ds;
}

/// Sliding windows (history + horizon points, stride cfg.stride) that lie
/// inside single trajectories.
inline std::vector<WindowRef> make_windows(const TrajectoryDataset& ds, const std::vector<std::size_t>& trajectories) {
  std::vector<WindowRef> out;
  const auto len = static_cast<std::size_t>(ds.cfg.history + ds.cfg.horizon);
  for (std::size_t k : trajectories) {
    const std::size_t points = ds.trajectories[k].times.size();
    for (std::size_t s = 0; s + len <= points; s += static_cast<std::size_t>(ds.cfg.stride)) out.push_back({k, s});
  }
  return out;
}

/// Forecast task of a window: start at the last history observation, targets
/// are the following `horizon` observations at times relative to it.
inline ForecastTask make_task(const TrajectoryDataset& ds, const WindowRef& w, bool clean_targets = false) {
  const Trajectory& tr = ds.trajectories.at(w.trajectory);
  const std::size_t last = w.start + static_cast<std::size_t>(ds.cfg.history) - 1;
  detail::require_dims(last + static_cast<std::size_t>(ds.cfg.horizon) < tr.times.size(), "make_task: window out of range");
  ForecastTask t;
  t.mu0 = tr.observed[last];
  for (int k = 1; k <= ds.cfg.horizon; ++k) {
    const std::size_t i = last + static_cast<std::size_t>(k);
    t.times.push_back(tr.times[i] - tr.times[last]);
    t.targets.push_back(clean_targets ? tr.clean[i] : tr.observed[i]);
  }
  return t;
}

inline std::vector<ForecastTask> make_tasks(const TrajectoryDataset& ds, const std::vector<WindowRef>& windows,
                                            bool clean_targets = false) {
  std::vector<ForecastTask> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(make_task(ds, w, clean_targets));
  return out;
}

// ---------------------------------------------------------------- files

namespace detail {

inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<std::size_t> parse_indices(const std::string& s) {
  std::vector<std::size_t> out;
  if (trim(s).empty()) return out;
  for (const auto& tok : split(s, ',')) out.push_back(static_cast<std::size_t>(parse_int(tok)));
  return out;
}

inline std::string trajectory_file_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "traj_%03zu.csv", k);
  return buf;
}

}  // namespace detail

inline std::string trajectory_csv(const Trajectory& tr) {
  const auto n = tr.clean.front().size();
  std::vector<std::string> header{"time"};
  for (Eigen::Index i = 0; i < n; ++i) header.push_back("state_" + std::to_string(i));
  for (Eigen::Index i = 0; i < n; ++i) header.push_back("obs_" + std::to_string(i));
  CsvWriter w(header);
  for (std::size_t r = 0; r < tr.times.size(); ++r) {
    std::vector<double> row{tr.times[r]};
    for (Eigen::Index i = 0; i < n; ++i) row.push_back(tr.clean[r](i));
    for (Eigen::Index i = 0; i < n; ++i) row.push_back(tr.observed[r](i));
    w.row(row);
  }
  return w.str();
}

inline std::string dataset_manifest(const TrajectoryDataset& ds) {
  std::ostringstream os;
  os << "system=" << to_string(ds.spec.kind) << '\n';
  for (const auto& [k, v] : ds.spec.params) os << "param." << k << '=' << format_double(v) << '\n';
  os << "state_dim=" << ds.spec.state_dim << '\n';
  os << "noise_std=" << format_double(ds.spec.noise_std) << '\n';
  os << "seed=" << ds.cfg.seed << '\n';
  os << "trajectories=" << ds.trajectories.size() << '\n';
  os << "duration=" << format_double(ds.cfg.duration) << '\n';
  os << "dt=" << format_double(ds.cfg.dt) << '\n';
  os << "init_low=" << format_double(ds.cfg.init_low) << '\n';
  os << "init_high=" << format_double(ds.cfg.init_high) << '\n';
  os << "history=" << ds.cfg.history << '\n';
  os << "horizon=" << ds.cfg.horizon << '\n';
  os << "stride=" << ds.cfg.stride << '\n';
  os << "train_fraction=" << format_double(ds.cfg.train_fraction) << '\n';
  os << "val_fraction=" << format_double(ds.cfg.val_fraction) << '\n';
  os << "retries=" << ds.retries << '\n';
  os << "split.train=" << detail::join_indices(ds.train) << '\n';
  os << "split.val=" << detail::join_indices(ds.val) << '\n';
  os << "split.test=" << detail::join_indices(ds.test) << '\n';
  for (std::size_t k = 0; k < ds.trajectories.size(); ++k) os << "file." << k << '=' << detail::trajectory_file_name(k) << '\n';
  return os.str();
}

inline void save_dataset(const TrajectoryDataset& ds, const std::filesystem::path& dir) {
  for (std::size_t k = 0; k < ds.trajectories.size(); ++k)
    write_file_atomic(dir / detail::trajectory_file_name(k), trajectory_csv(ds.trajectories[k]));
  write_file_atomic(dir / "manifest.txt", dataset_manifest(ds));
}

inline TrajectoryDataset load_dataset(const std::filesystem::path& dir) {
  const std::string text = read_file(dir / "manifest.txt");
  std::vector<std::pair<std::string, std::string>> kv;
  {
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("manifest: expected key=value", lineno);
      kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }
  auto get = [&](const std::string& key) -> std::string {
    for (const auto& [k, v] : kv)
      if (k == key) return v;
    throw ConfigError("manifest: missing key '" + key + "'");
  };
  TrajectoryDataset ds;
  ds.spec = default_system(system_from_string(get("system")));
  for (auto& [k, v] : ds.spec.params) v = parse_double(get("param." + k));
  ds.spec.noise_std = parse_double(get("noise_std"));
  ds.cfg.seed = static_cast<std::uint64_t>(std::stoull(get("seed")));
  ds.cfg.trajectories = static_cast<int>(parse_int(get("trajectories")));
  ds.cfg.duration = parse_double(get("duration"));
  ds.cfg.dt = parse_double(get("dt"));
  ds.cfg.init_low = parse_double(get("init_low"));
  ds.cfg.init_high = parse_double(get("init_high"));
  ds.cfg.history = static_cast<int>(parse_int(get("history")));
  ds.cfg.horizon = static_cast<int>(parse_int(get("horizon")));
  ds.cfg.stride = static_cast<int>(parse_int(get("stride")));
  ds.cfg.train_fraction = parse_double(get("train_fraction"));
  ds.cfg.val_fraction = parse_double(get("val_fraction"));
  ds.retries = static_cast<std::size_t>(parse_int(get("retries")));
  ds.train = detail::parse_indices(get("split.train"));
  ds.val = detail::parse_indices(get("split.val"));
  ds.test = detail::parse_indices(get("split.test"));
  const int n = ds.spec.state_dim;
  for (int k = 0; k < ds.cfg.trajectories; ++k) {
    const auto file = dir / get("file." + std::to_string(k));
    CsvTable table;
    try {
      table = parse_csv(read_file(file));
    } catch (const ParseError& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
    if (table.header.size() != static_cast<std::size_t>(1 + 2 * n))
      throw ConfigError(file.string() + ": expected " + std::to_string(1 + 2 * n) + " columns");
    Trajectory tr;
    for (const auto& row : table.rows) {
      tr.times.push_back(row[0]);
      Vec c(n), o(n);
      for (int i = 0; i < n; ++i) {
        c(i) = row[static_cast<std::size_t>(1 + i)];
        o(i) = row[static_cast<std::size_t>(1 + n + i)];
      }
      tr.clean.push_back(c);
      tr.observed.push_back(o);
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

// ---------------------------------------------------------------- irregular series

struct IrregularSeriesConfig {
  double duration = 20.0;
  double mean_gap = 0.3;     // exponential inter-arrival times
  double min_gap = 0.02;
  double missing_rate = 0.5;  // per-entry probability of being masked
  std::uint64_t seed = 0;
};

struct IrregularSeries {
  std::vector<double> times;
  std::vector<Vec> clean;
  ObservationSeries obs;
};

/// Irregularly sampled noisy observations of one trajectory with entries
/// missing at random. The first observation is always complete.
inline IrregularSeries simulate_irregular(const SystemSpec& spec, const Vec& x0, const IrregularSeriesConfig& cfg,
                                          const SolverConfig& solver = {}) {
  spec.validate();
  if (!(cfg.mean_gap > 0.0) || !(cfg.duration > 0.0) || cfg.missing_rate < 0.0 || cfg.missing_rate >= 1.0)
    throw ConfigError("irregular series: need duration > 0, mean_gap > 0, 0 <= missing_rate < 1");
  std::mt19937_64 gen(derive_seed(cfg.seed, 21));
  std::exponential_distribution<double> gap(1.0 / cfg.mean_gap);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  IrregularSeries out;
  for (double t = 0.0; t <= cfg.duration; t += std::max(cfg.min_gap, gap(gen))) out.times.push_back(t);
  const auto rhs = [&spec](const Vec& x, double t) { return system_rhs(spec, x, t); };
  out.clean = integrate(rhs, x0, out.times, solver).states;
  const int n = spec.state_dim;
  out.obs.times = out.times;
  out.obs.model = ObservationModel::linear(Mat::Identity(n, n), std::max(spec.noise_std * spec.noise_std, 1e-12) * Mat::Identity(n, n));
  for (std::size_t k = 0; k < out.times.size(); ++k) {
    Vec y = out.clean[k];
    Mask m(static_cast<std::size_t>(n), true);
    for (int i = 0; i < n; ++i) {
      y(i) += spec.noise_std * noise(gen);
      if (k > 0 && u(gen) < cfg.missing_rate) m[static_cast<std::size_t>(i)] = false;
    }
    out.obs.values.push_back(y);
    out.obs.masks.push_back(m);
  }
  return out;
}

}  // namespace upn
