#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "test_util.hpp"
#include "upn/systems.hpp"

namespace upn {
namespace {

Vec v3(double a, double b, double c) {
  Vec x(3);
  x << a, b, c;
  return x;
}

Vec v2(double a, double b) {
  Vec x(2);
  x << a, b;
  return x;
}

SimulationConfig small_config(std::uint64_t seed = 5) {
  SimulationConfig c;
  c.trajectories = 6;
  c.duration = 5.0;
  c.seed = seed;
  return c;
}

TEST(SystemRhs, LorenzExamples) {
  const SystemSpec s = default_system(SystemKind::lorenz);
  EXPECT_LT(system_rhs(s, v3(0, 0, 0), 0.0).norm(), 1e-15);
  const Vec d = system_rhs(s, v3(1, 1, 1), 0.0);
  EXPECT_NEAR(d(0), 0.0, 1e-14);
  EXPECT_NEAR(d(1), 26.0, 1e-14);
  EXPECT_NEAR(d(2), 1.0 - 8.0 / 3.0, 1e-14);
  const double r = std::sqrt(72.0);
  EXPECT_LT(system_rhs(s, v3(r, r, 27.0), 0.0).norm(), 1e-12);
}

TEST(SystemRhs, OscillatorExamples) {
  const Vec d = system_rhs(default_system(SystemKind::linear_oscillator), v2(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(d(0), 0.0);
  EXPECT_DOUBLE_EQ(d(1), -1.0);
  const Vec e = system_rhs(default_system(SystemKind::van_der_pol), v2(2, 1), 0.0);
  EXPECT_DOUBLE_EQ(e(0), 1.0);
  EXPECT_DOUBLE_EQ(e(1), 0.5 * (1.0 - 4.0) - 2.0);
  const Vec f = system_rhs(default_system(SystemKind::linear_2d), v2(1, 2), 0.0);
  EXPECT_DOUBLE_EQ(f(0), -0.1 + 1.0);
  EXPECT_DOUBLE_EQ(f(1), -0.5 - 0.2);
}

TEST(SystemRhs, WrongDimensionThrows) {
  EXPECT_THROW(system_rhs(default_system(SystemKind::lorenz), v2(1, 1), 0.0), DimensionError);
}

TEST(SystemSpec, NamesAndValidation) {
  for (auto k : {SystemKind::linear_oscillator, SystemKind::van_der_pol, SystemKind::linear_2d, SystemKind::lorenz})
    EXPECT_EQ(system_from_string(to_string(k)), k);
  EXPECT_THROW(system_from_string("duffing"), ConfigError);
  SystemSpec s = default_system(SystemKind::linear_oscillator);
  s.set_param("m", 0.0);
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(s.set_param("q", 1.0), ConfigError);
  s = default_system(SystemKind::lorenz);
  s.noise_std = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(SimulationConfig, Validation) {
  SimulationConfig c;
  c.dt = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.train_fraction = 0.9;
  c.val_fraction = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.horizon = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(SimulationConfig{}.grid_points(), 201);
}

TEST(Simulation, ZeroNoiseObservesCleanStates) {
  SystemSpec s = default_system(SystemKind::van_der_pol);
  s.noise_std = 0.0;
  const auto ds = simulate_dataset(s, small_config());
  for (const auto& tr : ds.trajectories)
    for (std::size_t i = 0; i < tr.clean.size(); ++i) EXPECT_EQ(tr.clean[i], tr.observed[i]);
}

TEST(Simulation, Deterministic) {
  const SystemSpec s = default_system(SystemKind::lorenz);
  const auto a = simulate_dataset(s, small_config(3));
  const auto b = simulate_dataset(s, small_config(3));
  const auto c = simulate_dataset(s, small_config(4));
  ASSERT_EQ(a.trajectories.size(), b.trajectories.size());
  for (std::size_t k = 0; k < a.trajectories.size(); ++k)
    for (std::size_t i = 0; i < a.trajectories[k].observed.size(); ++i)
      EXPECT_EQ(a.trajectories[k].observed[i], b.trajectories[k].observed[i]);
  EXPECT_EQ(a.train, b.train);
  EXPECT_NE(a.trajectories[0].observed[0], c.trajectories[0].observed[0]);
}

TEST(Simulation, UndampedOscillatorConservesEnergy) {
  SystemSpec s = default_system(SystemKind::linear_oscillator);
  s.set_param("c", 0.0);
  s.noise_std = 0.0;
  SimulationConfig c = small_config();
  c.duration = 20.0;
  const auto ds = simulate_dataset(s, c);
  for (const auto& tr : ds.trajectories) {
    const auto energy = [](const Vec& x) { return 0.5 * x.squaredNorm(); };
    const double e0 = energy(tr.clean.front());
    for (const Vec& x : tr.clean) EXPECT_LT(std::abs(energy(x) - e0), 1e-4 * std::max(1.0, e0));
  }
}

TEST(Simulation, Linear2dNormDecaysExponentially) {
  // A = -0.1 I + skew part, so |x(t)| = e^{-0.1 t} |x0|.
  SystemSpec s = default_system(SystemKind::linear_2d);
  s.noise_std = 0.0;
  SimulationConfig c = small_config();
  c.duration = 20.0;
  const auto ds = simulate_dataset(s, c);
  for (const auto& tr : ds.trajectories)
    for (std::size_t i = 0; i < tr.times.size(); ++i)
      EXPECT_NEAR(tr.clean[i].norm(), std::exp(-0.1 * tr.times[i]) * tr.clean[0].norm(), 1e-5);
}

TEST(Simulation, LorenzStaysBounded) {
  SimulationConfig c = small_config();
  c.duration = 20.0;
  const auto ds = simulate_dataset(default_system(SystemKind::lorenz), c);
  for (const auto& tr : ds.trajectories)
    for (const Vec& x : tr.clean) EXPECT_LT(x.cwiseAbs().maxCoeff(), 100.0);
}

TEST(Simulation, NoiseStandardDeviation) {
  SimulationConfig c;
  c.seed = 8;
  const SystemSpec s = default_system(SystemKind::linear_oscillator);
  const auto ds = simulate_dataset(s, c);
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& tr : ds.trajectories)
    for (std::size_t i = 0; i < tr.clean.size(); ++i)
      for (Eigen::Index d = 0; d < 2; ++d) {
        const double r = tr.observed[i](d) - tr.clean[i](d);
        sum += r;
        sq += r * r;
        ++count;
      }
  const double mean = sum / count;
  const double sd = std::sqrt(sq / count - mean * mean);
  EXPECT_NEAR(sd, 0.05, 0.05 * 0.05);
  EXPECT_LT(std::abs(mean), 0.005);
}

TEST(Simulation, InitialConditionsInRange) {
  const auto ds = simulate_dataset(default_system(SystemKind::van_der_pol), small_config());
  for (const auto& tr : ds.trajectories) {
    EXPECT_GE(tr.clean[0].minCoeff(), -2.0);
    EXPECT_LE(tr.clean[0].maxCoeff(), 2.0);
    EXPECT_DOUBLE_EQ(tr.times[1], 0.1);
    EXPECT_NEAR(tr.times.back(), 5.0, 1e-12);
  }
}

TEST(Split, FloorSizesAndPartition) {
  SimulationConfig c;
  c.duration = 1.0;
  const auto ds = simulate_dataset(default_system(SystemKind::linear_oscillator), c);
  EXPECT_EQ(ds.train.size(), 35u);
  EXPECT_EQ(ds.val.size(), 7u);
  EXPECT_EQ(ds.test.size(), 8u);
  std::set<std::size_t> all(ds.train.begin(), ds.train.end());
  all.insert(ds.val.begin(), ds.val.end());
  all.insert(ds.test.begin(), ds.test.end());
  EXPECT_EQ(all.size(), 50u);
}

TEST(Windows, CountAndTask) {
  SimulationConfig c = small_config();
  c.duration = 20.0;
  const auto ds = simulate_dataset(default_system(SystemKind::linear_oscillator), c);
  const auto w = make_windows(ds, {0, 1});
  EXPECT_EQ(w.size(), 2u * (201 - 30 + 1));
  const ForecastTask t = make_task(ds, w[5]);
  EXPECT_EQ(t.mu0, ds.trajectories[0].observed[14]);
  ASSERT_EQ(t.times.size(), 20u);
  EXPECT_NEAR(t.times.front(), 0.1, 1e-12);
  EXPECT_NEAR(t.times.back(), 2.0, 1e-12);
  EXPECT_EQ(t.targets[0], ds.trajectories[0].observed[15]);
  EXPECT_EQ(make_task(ds, w[5], true).targets[0], ds.trajectories[0].clean[15]);
  auto ds5 = ds;
  ds5.cfg.stride = 5;
  EXPECT_EQ(make_windows(ds5, {0}).size(), 35u);
}

TEST(DatasetFiles, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "upn_test_dataset";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto ds = simulate_dataset(default_system(SystemKind::lorenz), small_config(9));
  save_dataset(ds, dir);
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.spec.kind, SystemKind::lorenz);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.test, ds.test);
  EXPECT_EQ(back.cfg.seed, 9u);
  ASSERT_EQ(back.trajectories.size(), ds.trajectories.size());
  for (std::size_t k = 0; k < ds.trajectories.size(); ++k)
    for (std::size_t i = 0; i < ds.trajectories[k].times.size(); ++i) {
      EXPECT_EQ(back.trajectories[k].clean[i], ds.trajectories[k].clean[i]);
      EXPECT_EQ(back.trajectories[k].observed[i], ds.trajectories[k].observed[i]);
    }
  EXPECT_EQ(dataset_manifest(back), dataset_manifest(ds));
  std::filesystem::remove_all(dir);
}

TEST(DatasetFiles, MissingDirectoryIsIoError) {
  EXPECT_THROW(load_dataset("/nonexistent/upn_dataset"), IoError);
}

TEST(Irregular, TimesMasksAndNoise) {
  IrregularSeriesConfig c;
  c.duration = 200.0;
  c.seed = 3;
  const SystemSpec s = default_system(SystemKind::linear_oscillator);
  const auto ser = simulate_irregular(s, v2(1.0, 0.0), c);
  ASSERT_GT(ser.times.size(), 300u);
  EXPECT_EQ(ser.times.front(), 0.0);
  for (std::size_t k = 1; k < ser.times.size(); ++k) EXPECT_GE(ser.times[k] - ser.times[k - 1], c.min_gap - 1e-12);
  EXPECT_TRUE(ser.obs.masks.front()[0] && ser.obs.masks.front()[1]);
  std::size_t missing = 0, total = 0;
  for (std::size_t k = 1; k < ser.obs.masks.size(); ++k)
    for (bool m : ser.obs.masks[k]) {
      missing += m ? 0 : 1;
      ++total;
    }
  EXPECT_NEAR(static_cast<double>(missing) / total, 0.5, 0.05);
  const double mean_gap = ser.times.back() / static_cast<double>(ser.times.size() - 1);
  EXPECT_NEAR(mean_gap, 0.3, 0.04);
  EXPECT_NEAR(ser.obs.model.r(0, 0), 0.0025, 1e-15);
  // c = 0.1 damps the clean state
  EXPECT_LT(ser.clean.back().norm(), 1.0);
  c.missing_rate = 1.0;
  EXPECT_THROW(simulate_irregular(s, v2(1.0, 0.0), c), ConfigError);
}

}  // namespace
}  // namespace upn
