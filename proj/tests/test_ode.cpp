#include <gtest/gtest.h>

#include "test_util.hpp"
#include "upn/ode.hpp"

namespace upn {
namespace {

const auto decay = [](const Vec& z, double) -> Vec { return -z; };
const auto oscillator = [](const Vec& z, double) -> Vec { return (Vec(2) << z(1), -z(0)).finished(); };

SolverConfig rk4(double step) {
  SolverConfig c;
  c.method = Method::rk4_fixed;
  c.step = step;
  return c;
}

SolverConfig dopri(double rtol, double atol) {
  SolverConfig c;
  c.rtol = rtol;
  c.atol = atol;
  return c;
}

TEST(Integrate, ZeroRhsIsConstant) {
  const auto zero = [](const Vec& z, double) -> Vec { return Vec::Zero(z.size()); };
  const Vec z0 = (Vec(3) << 1.0, -2.0, 3.5).finished();
  const auto times = linspace(0.0, 4.0, 9);
  for (const SolverConfig& cfg : {dopri(1e-6, 1e-8), rk4(0.1)}) {
    const Solution sol = integrate(zero, z0, times, cfg);
    ASSERT_EQ(sol.states.size(), times.size());
    for (const Vec& z : sol.states) EXPECT_EQ(z, z0);
  }
}

TEST(Integrate, ExponentialDecay) {
  const std::vector<double> times{0.0, 1.0};
  const Solution sol = integrate(decay, Vec::Ones(1), times, dopri(1e-8, 1e-10));
  EXPECT_NEAR(sol.states.back()(0), std::exp(-1.0), 1e-7);
}

TEST(Integrate, HarmonicEnergyConserved) {
  const auto times = linspace(0.0, 20.0, 201);
  const Solution sol = integrate(oscillator, (Vec(2) << 1.0, 0.0).finished(), times, dopri(1e-8, 1e-10));
  for (const Vec& z : sol.states) EXPECT_NEAR(0.5 * z.squaredNorm(), 0.5, 1e-5);
}

TEST(Integrate, OutputsAtRequestedTimesOnly) {
  const std::vector<double> times{0.0, 0.05, 0.3, 2.0};
  const Solution sol = integrate(decay, Vec::Ones(1), times, dopri(1e-10, 1e-12));
  ASSERT_EQ(sol.times, times);
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_NEAR(sol.states[i](0), std::exp(-times[i]), 1e-9);
  EXPECT_GT(sol.step_count, 0u);
}

TEST(Integrate, Errors) {
  const std::vector<double> bad{0.0, 1.0, 1.0};
  EXPECT_THROW(integrate(decay, Vec::Ones(1), bad, {}), DomainError);
  EXPECT_THROW(integrate(decay, Vec::Ones(1), std::vector<double>{}, {}), DimensionError);
  SolverConfig few = dopri(1e-10, 1e-12);
  few.max_steps = 3;
  EXPECT_THROW(integrate(decay, Vec::Ones(1), linspace(0, 10, 2), few), DivergenceError);
  SolverConfig invalid;
  invalid.rtol = 0.0;
  EXPECT_THROW(integrate(decay, Vec::Ones(1), linspace(0, 1, 2), invalid), ConfigError);
  const auto blowup = [](const Vec& z, double) -> Vec { return z.array().square(); };
  try {
    integrate(blowup, Vec::Ones(1), linspace(0, 2, 3), rk4(0.1));
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GT(e.last_good_time(), 0.5);
    EXPECT_LT(e.last_good_time(), 2.0);
  }
}

TEST(Integrate, Deterministic) {
  const auto times = linspace(0.0, 5.0, 11);
  const Solution a = integrate(oscillator, (Vec(2) << 0.3, 1.0).finished(), times, {});
  const Solution b = integrate(oscillator, (Vec(2) << 0.3, 1.0).finished(), times, {});
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_EQ(a.states[i], b.states[i]);
}

TEST(Rk4, FourthOrderConvergence) {
  const std::vector<double> times{0.0, 2.0};
  const double exact = std::exp(-2.0);
  const double e1 = std::abs(integrate(decay, Vec::Ones(1), times, rk4(0.1)).states.back()(0) - exact);
  const double e2 = std::abs(integrate(decay, Vec::Ones(1), times, rk4(0.05)).states.back()(0) - exact);
  EXPECT_GE(e1 / e2, 14.0);
  EXPECT_LE(e1 / e2, 18.0);
}

// Global error vs accepted-step count on dz/dt = -z.
TEST(Dopri45, ConvergenceOrder) {
  const std::vector<double> times{0.0, 10.0};
  const double exact = std::exp(-10.0);
  std::vector<double> log_steps, log_err;
  for (double tol : {1e-5, 1e-6, 1e-7, 1e-8, 1e-9}) {
    const Solution sol = integrate(decay, Vec::Ones(1), times, dopri(tol, tol * 1e-4));
    log_steps.push_back(std::log(static_cast<double>(sol.step_count)));
    log_err.push_back(std::log(std::abs(sol.states.back()(0) - exact)));
  }
  // least-squares slope
  const double n = static_cast<double>(log_steps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < log_steps.size(); ++i) {
    sx += log_steps[i];
    sy += log_err[i];
    sxx += log_steps[i] * log_steps[i];
    sxy += log_steps[i] * log_err[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  EXPECT_LE(slope, -4.5);
}

TEST(Dopri45, AgreesWithRk4OnCoupledLinearSystem) {
  const Mat a = testing::coupled_linear_a();
  const auto rhs = [&](const Vec& z, double) -> Vec { return a * z; };
  const auto times = linspace(0.0, 20.0, 201);
  const Vec z0 = (Vec(2) << 1.5, -0.5).finished();
  const Solution d = integrate(rhs, z0, times, {});
  const Solution r = integrate(rhs, z0, times, rk4(0.1));
  for (std::size_t i = 0; i < times.size(); ++i) {
    EXPECT_LT((d.states[i] - r.states[i]).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_LT((d.states[i] - testing::expm(a * times[i]) * z0).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Dopri45, DenseOutputMatchesSolution) {
  const auto times = linspace(0.0, 3.0, 4);
  const auto [sol, dense] = integrate_dense(oscillator, (Vec(2) << 1.0, 0.0).finished(), times, dopri(1e-9, 1e-11));
  EXPECT_EQ(dense.t_begin(), 0.0);
  EXPECT_DOUBLE_EQ(dense.t_end(), 3.0);
  for (double t : linspace(0.0, 3.0, 37)) {
    const Vec z = dense.at(t);
    EXPECT_NEAR(z(0), std::cos(t), 1e-7);
    EXPECT_NEAR(z(1), -std::sin(t), 1e-7);
  }
}

TEST(Dopri45, RhsNumericalErrorIsRejectedStep) {
  // The rhs refuses states beyond 1.5; a too-large trial step must shrink.
  const auto guarded = [](const Vec& z, double) -> Vec {
    if (z(0) > 1.5) throw NumericalError("out of domain");
    return (Vec(1) << 1.0 - z(0)).finished();
  };
  const std::vector<double> times{0.0, 5.0};
  const Solution sol = integrate(guarded, Vec::Zero(1), times, dopri(1e-6, 1e-8));
  EXPECT_NEAR(sol.states.back()(0), 1.0 - std::exp(-5.0), 1e-5);
}

TEST(Tape, ReplayIsBitIdentical) {
  const auto times = linspace(0.0, 2.0, 5);
  const auto [sol, tape] = integrate_with_tape(oscillator, (Vec(2) << 0.2, 0.9).finished(), times, rk4(0.07));
  const auto replayed = tape.replay(oscillator, (Vec(2) << 0.2, 0.9).finished());
  ASSERT_EQ(replayed.size(), sol.states.size());
  for (std::size_t i = 0; i < replayed.size(); ++i) EXPECT_EQ(replayed[i], sol.states[i]);
  EXPECT_THROW(integrate_with_tape(oscillator, Vec::Ones(2), times, dopri(1e-6, 1e-8)), ConfigError);
}

TEST(Tape, LinearSensitivityIsExponential) {
  const double a = -0.7, horizon = 3.0;
  const auto rhs = [a](const Vec& z, double) -> Vec { return a * z; };
  const auto vjp = [a](const Vec&, double, const Vec& v, double*) -> Vec { return a * v; };
  const std::vector<double> times{0.0, horizon};
  const auto [sol, tape] = integrate_with_tape(rhs, Vec::Ones(1), times, rk4(0.01));
  std::vector<Vec> cot(2);
  cot[1] = Vec::Ones(1);
  EXPECT_NEAR(tape.backward(vjp, cot, nullptr)(0), std::exp(a * horizon), 1e-6);
}

// Nonlinear rhs with parameters p: dz/dt = [p0 sin(z1), p1 z0 z1 + t].
TEST(Tape, GradientMatchesFiniteDifferences) {
  const auto make_rhs = [](const Vec& p) {
    return [p](const Vec& z, double t) -> Vec {
      return (Vec(2) << p(0) * std::sin(z(1)), p(1) * z(0) * z(1) + t).finished();
    };
  };
  const Vec p = (Vec(2) << 0.8, -0.3).finished();
  const auto vjp = [&p](const Vec& z, double, const Vec& a, double* g) -> Vec {
    if (g != nullptr) {
      g[0] += a(0) * std::sin(z(1));
      g[1] += a(1) * z(0) * z(1);
    }
    return (Vec(2) << a(1) * p(1) * z(1), a(0) * p(0) * std::cos(z(1)) + a(1) * p(1) * z(0)).finished();
  };
  const auto times = linspace(0.0, 1.5, 4);
  const Vec z0 = (Vec(2) << 0.4, 1.1).finished();
  const Vec w = (Vec(2) << 1.0, -2.0).finished();
  // loss = sum_i w . z(t_i) over outputs 1..3
  const auto loss = [&](const Vec& zz, const Vec& pp) {
    const auto sol = integrate(make_rhs(pp), zz, times, rk4(0.05));
    double l = 0;
    for (std::size_t i = 1; i < times.size(); ++i) l += w.dot(sol.states[i]);
    return l;
  };
  const auto [sol, tape] = integrate_with_tape(make_rhs(p), z0, times, rk4(0.05));
  std::vector<Vec> cot(times.size());
  for (std::size_t i = 1; i < times.size(); ++i) cot[i] = w;
  Vec grad = Vec::Zero(2);
  const Vec zb = tape.backward(vjp, cot, grad.data());
  const Vec fd_z = testing::fd_gradient([&](const Vec& zz) { return loss(zz, p); }, z0, 1e-6);
  const Vec fd_p = testing::fd_gradient([&](const Vec& pp) { return loss(z0, pp); }, p, 1e-6);
  EXPECT_LT(testing::rel_error(zb, fd_z), 1e-5);
  EXPECT_LT(testing::rel_error(grad, fd_p), 1e-5);
}

TEST(Method, Parsing) {
  EXPECT_EQ(method_from_string("rk45"), Method::dopri45);
  EXPECT_EQ(method_from_string("rk4_fixed"), Method::rk4_fixed);
  EXPECT_THROW(method_from_string("euler"), ConfigError);
}

}  // namespace
}  // namespace upn
