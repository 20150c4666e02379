#pragma once

// Initial-value-problem integrators over flat state vectors.
//
//   rk4_fixed  classic fourth-order Runge-Kutta on a fixed step. The taped
//              variant records every stage input so gradients can be
//              propagated back through the discrete solve.
//   dopri45    Dormand-Prince 5(4) with FSAL, error-per-step control and the
//              standard fourth-order continuous extension for dense output.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "upn/errors.hpp"
#include "upn/linalg.hpp"

namespace upn {

enum class Method { rk4_fixed, dopri45 };

inline std::string to_string(Method m) { return m == Method::rk4_fixed ? "rk4_fixed" : "dopri45"; }

inline Method method_from_string(const std::string& s) {
  if (s == "rk4_fixed" || s == "rk4") return Method::rk4_fixed;
  if (s == "dopri45" || s == "rk45") return Method::dopri45;
  throw ConfigError("unknown solver method '" + s + "' (expected rk4_fixed|dopri45)");
}

struct SolverConfig {
  Method method = Method::dopri45;
  double step = 0.1;  // rk4_fixed step
  double rtol = 1e-6;
  double atol = 1e-8;
  int max_steps = 100000;

  void validate() const {
    if (!(step > 0.0)) throw ConfigError("solver: step must be > 0");
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ConfigError("solver: rtol and atol must be > 0");
    if (max_steps < 1) throw ConfigError("solver: max_steps must be >= 1");
  }
};

struct Solution {
  std::vector<double> times;
  std::vector<Vec> states;
  std::size_t step_count = 0;
  std::size_t rejected_count = 0;
};

template <class F>
concept OdeRhs = requires(const F& f, const Vec& z, double t) {
  { f(z, t) } -> std::convertible_to<Vec>;
};

// Vector-Jacobian product of a right-hand side: returns a^T df/dz and adds
// a^T df/dparams into the gradient buffer.
template <class F>
concept OdeVjp = requires(const F& f, const Vec& z, double t, const Vec& a, double* grad) {
  { f(z, t, a, grad) } -> std::convertible_to<Vec>;
};

namespace detail {

inline void check_times(std::span<const double> times) {
  if (times.empty()) throw DimensionError("integrate: empty time grid");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1])) throw DomainError("integrate: times must be strictly ascending");
}

inline int substeps(double span, double step) {
  return std::max(1, static_cast<int>(std::ceil(span / step - 1e-9)));
}

namespace dp {
inline constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
inline constexpr double a21 = 1.0 / 5;
inline constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
inline constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
inline constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
inline constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                        a65 = -5103.0 / 18656;
inline constexpr double a71 = 35.0 / 384, a73 = 500.0 / 1113, a74 = 125.0 / 192, a75 = -2187.0 / 6784,
                        a76 = 11.0 / 84;
inline constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                        e6 = 22.0 / 525, e7 = -1.0 / 40;
inline constexpr double d1 = -12715105075.0 / 11282082432, d3 = 87487479700.0 / 32700410799,
                        d4 = -10690763975.0 / 1880347072, d5 = 701980252875.0 / 199316789632,
                        d6 = -1453857185.0 / 822651844, d7 = 69997945.0 / 29380423;
}  // namespace dp

}  // namespace detail

/// One accepted Dormand-Prince step with its dense-output coefficients.
struct DenseSegment {
  double t0 = 0.0;
  double h = 0.0;
  Vec r1, r2, r3, r4, r5;

  Vec at(double t) const {
    const double theta = (t - t0) / h;
    const double theta1 = 1.0 - theta;
    return r1 + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)));
  }
};

/// Continuous solution assembled from accepted steps.
struct DenseTrajectory {
  std::vector<DenseSegment> segments;

  double t_begin() const { return segments.front().t0; }
  double t_end() const { return segments.back().t0 + segments.back().h; }

  Vec at(double t) const {
    if (segments.empty()) throw Error("DenseTrajectory: empty");
    auto it = std::upper_bound(segments.begin(), segments.end(), t,
                               [](double v, const DenseSegment& s) { return v < s.t0; });
    const DenseSegment& seg = it == segments.begin() ? segments.front() : *std::prev(it);
    return seg.at(std::clamp(t, seg.t0, seg.t0 + seg.h));
  }
};

namespace detail {

template <OdeRhs F>
Solution dopri45(const F& rhs, const Vec& z0, std::span<const double> times, const SolverConfig& cfg,
                 DenseTrajectory* dense) {
  using namespace dp;
  Solution sol;
  sol.times.assign(times.begin(), times.end());
  sol.states.reserve(times.size());
  sol.states.push_back(z0);
  if (times.size() == 1) return sol;

  const double t_end = times.back();
  double t = times.front();
  Vec y = z0;
  Vec k1 = rhs(y, t);
  auto scale = [&](const Vec& a, const Vec& b) {
    return (cfg.atol + cfg.rtol * a.cwiseAbs().cwiseMax(b.cwiseAbs()).array()).matrix();
  };
  auto rms = [](const Vec& v) { return v.size() == 0 ? 0.0 : std::sqrt(v.squaredNorm() / static_cast<double>(v.size())); };

  // Initial step (Hairer & Wanner's heuristic).
  double h = 0.0;
  {
    const Vec sk = scale(y, y);
    const double d0 = rms(y.cwiseQuotient(sk));
    const double d1 = rms(k1.cwiseQuotient(sk));
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, t_end - t);
    const Vec y1 = y + h0 * k1;
    const Vec f1 = rhs(y1, t + h0);
    const double d2 = rms((f1 - k1).cwiseQuotient(sk)) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 0.2);
    h = std::min({100.0 * h0, h1, t_end - t});
  }

  std::size_t next_out = 1;
  int attempts = 0;
  bool last_rejected = false;
  const double tiny = 1e-14 * std::max(1.0, std::abs(t_end));
  while (next_out < times.size()) {
    if (++attempts > cfg.max_steps)
      throw DivergenceError("dopri45: max_steps (" + std::to_string(cfg.max_steps) + ") exceeded", t);
    if (h < tiny) throw DivergenceError("dopri45: step size underflow", t);
    h = std::min(h, t_end - t);
    Vec k2, k3, k4, k5, k6, k7, y_new;
    double err = std::numeric_limits<double>::quiet_NaN();
    try {
      k2 = rhs(y + h * (a21 * k1), t + c2 * h);
      k3 = rhs(y + h * (a31 * k1 + a32 * k2), t + c3 * h);
      k4 = rhs(y + h * (a41 * k1 + a42 * k2 + a43 * k3), t + c4 * h);
      k5 = rhs(y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), t + c5 * h);
      k6 = rhs(y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), t + h);
      y_new = y + h * (a71 * k1 + a73 * k3 + a74 * k4 + a75 * k5 + a76 * k6);
      k7 = rhs(y_new, t + h);
      const Vec err_vec = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
      err = rms(err_vec.cwiseQuotient(scale(y, y_new)));
    } catch (const NumericalError&) {
      // trial stage left the finite domain; retry with a smaller step
    }

    if (!std::isfinite(err) || !y_new.allFinite()) {
      ++sol.rejected_count;
      last_rejected = true;
      h *= 0.2;
      continue;
    }
    if (err > 1.0) {
      ++sol.rejected_count;
      last_rejected = true;
      h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
      continue;
    }

    DenseSegment seg;
    seg.t0 = t;
    seg.h = h;
    seg.r1 = y;
    seg.r2 = y_new - y;
    seg.r3 = h * k1 - seg.r2;
    seg.r4 = seg.r2 - h * k7 - seg.r3;
    seg.r5 = h * (d1 * k1 + d3 * k3 + d4 * k4 + d5 * k5 + d6 * k6 + d7 * k7);
    const double t_new = (t_end - (t + h) <= tiny) ? t_end : t + h;
    while (next_out < times.size() && times[next_out] <= t_new) {
      sol.states.push_back(times[next_out] == t_new ? y_new : seg.at(times[next_out]));
      ++next_out;
    }
    if (dense != nullptr) dense->segments.push_back(std::move(seg));
    ++sol.step_count;
    t = t_new;
    y = y_new;
    k1 = k7;
    double fac = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
    if (last_rejected) fac = std::min(fac, 1.0);
    last_rejected = false;
    h *= fac;
  }
  return sol;
}

template <OdeRhs F>
Vec rk4_step(const F& rhs, const Vec& z, double t, double h, Vec* stages = nullptr) {
  const Vec k1 = rhs(z, t);
  const Vec s2 = z + (0.5 * h) * k1;
  const Vec k2 = rhs(s2, t + 0.5 * h);
  const Vec s3 = z + (0.5 * h) * k2;
  const Vec k3 = rhs(s3, t + 0.5 * h);
  const Vec s4 = z + h * k3;
  const Vec k4 = rhs(s4, t + h);
  if (stages != nullptr) {
    stages[0] = z;
    stages[1] = s2;
    stages[2] = s3;
    stages[3] = s4;
  }
  return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

inline void check_state(const Vec& z, double t_good) {
  if (!z.allFinite()) throw DivergenceError("integrate: non-finite state", t_good);
}

}  // namespace detail

/// Record of a fixed-step RK4 solve: the inputs of every stage.
class RkTape {
public:
  struct Step {
    double t = 0.0;
    double h = 0.0;
    Vec stages[4];
    std::size_t output_index = 0;  // output reached at the end of this step, or 0
  };

  const std::vector<Step>& steps() const { return steps_; }
  std::size_t output_count() const { return output_count_; }

  // Re-runs the recorded steps from z0; returns the states at the outputs.
  template <OdeRhs F>
  std::vector<Vec> replay(const F& rhs, const Vec& z0) const {
    std::vector<Vec> out{z0};
    Vec z = z0;
    for (const auto& s : steps_) {
      z = detail::rk4_step(rhs, z, s.t, s.h);
      if (s.output_index != 0) out.push_back(z);
    }
    return out;
  }

  // Propagates output cotangents back to the initial state. `cotangents[i]`
  // is dL/dz(times[i]) (entries may be empty for "no contribution").
  // Parameter gradients accumulate into `grad` through the VJP callback.
  template <OdeVjp G>
  Vec backward(const G& vjp, const std::vector<Vec>& cotangents, double* grad) const {
    detail::require_dims(cotangents.size() == output_count_, "RkTape::backward: one cotangent per output time");
    const Eigen::Index dim = steps_.empty() ? cotangents.front().size() : steps_.front().stages[0].size();
    Vec zb = Vec::Zero(dim);
    auto add = [&](std::size_t i) {
      if (cotangents[i].size() != 0) {
        detail::require_dims(cotangents[i].size() == dim, "RkTape::backward: cotangent length mismatch");
        zb += cotangents[i];
      }
    };
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
      if (it->output_index != 0) add(it->output_index);
      const double h = it->h;
      const double t = it->t;
      // z_next = z + h/6 (k1 + 2 k2 + 2 k3 + k4)
      Vec k4b = (h / 6.0) * zb;
      Vec k3b = (h / 3.0) * zb;
      Vec k2b = (h / 3.0) * zb;
      Vec k1b = (h / 6.0) * zb;
      Vec acc = zb;
      Vec sb = vjp(it->stages[3], t + h, k4b, grad);
      acc += sb;
      k3b += h * sb;
      sb = vjp(it->stages[2], t + 0.5 * h, k3b, grad);
      acc += sb;
      k2b += (0.5 * h) * sb;
      sb = vjp(it->stages[1], t + 0.5 * h, k2b, grad);
      acc += sb;
      k1b += (0.5 * h) * sb;
      acc += vjp(it->stages[0], t, k1b, grad);
      zb = std::move(acc);
    }
    add(0);
    return zb;
  }

private:
  template <OdeRhs F>
  friend std::pair<Solution, RkTape> integrate_with_tape(const F&, const Vec&, std::span<const double>,
                                                          const SolverConfig&);
  std::vector<Step> steps_;
  std::size_t output_count_ = 0;
};

/// Integrates with fixed-step RK4, recording every stage.
template <OdeRhs F>
std::pair<Solution, RkTape> integrate_with_tape(const F& rhs, const Vec& z0, std::span<const double> times,
                                                const SolverConfig& cfg) {
  cfg.validate();
  if (cfg.method != Method::rk4_fixed) throw ConfigError("integrate_with_tape: requires rk4_fixed");
  detail::check_times(times);
  detail::check_state(z0, times.front());
  Solution sol;
  RkTape tape;
  sol.times.assign(times.begin(), times.end());
  sol.states.push_back(z0);
  tape.output_count_ = times.size();
  Vec z = z0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double span = times[i] - times[i - 1];
    const int m = detail::substeps(span, cfg.step);
    const double h = span / m;
    for (int s = 0; s < m; ++s) {
      RkTape::Step step;
      step.t = times[i - 1] + s * h;
      step.h = h;
      const Vec next = detail::rk4_step(rhs, z, step.t, h, step.stages);
      detail::check_state(next, step.t);
      z = next;
      step.output_index = s + 1 == m ? i : 0;
      tape.steps_.push_back(std::move(step));
      ++sol.step_count;
      if (static_cast<int>(sol.step_count) > cfg.max_steps)
        throw DivergenceError("rk4: max_steps exceeded", step.t);
    }
    sol.states.push_back(z);
  }
  return {std::move(sol), std::move(tape)};
}

/// Solution at exactly the requested times.
template <OdeRhs F>
Solution integrate(const F& rhs, const Vec& z0, std::span<const double> times, const SolverConfig& cfg) {
  cfg.validate();
  detail::check_times(times);
  detail::check_state(z0, times.front());
  if (cfg.method == Method::dopri45) {
    Solution sol = detail::dopri45(rhs, z0, times, cfg, nullptr);
    return sol;
  }
  Solution sol;
  sol.times.assign(times.begin(), times.end());
  sol.states.push_back(z0);
  Vec z = z0;
  for (std::size_t i = 1; i < times.size(); ++i) {
    const double span = times[i] - times[i - 1];
    const int m = detail::substeps(span, cfg.step);
    const double h = span / m;
    for (int s = 0; s < m; ++s) {
      const double t = times[i - 1] + s * h;
      z = detail::rk4_step(rhs, z, t, h);
      detail::check_state(z, t);
      if (static_cast<int>(++sol.step_count) > cfg.max_steps) throw DivergenceError("rk4: max_steps exceeded", t);
    }
    sol.states.push_back(z);
  }
  return sol;
}

/// dopri45 solve that also keeps every accepted step for interpolation.
template <OdeRhs F>
std::pair<Solution, DenseTrajectory> integrate_dense(const F& rhs, const Vec& z0, std::span<const double> times,
                                                     const SolverConfig& cfg) {
  cfg.validate();
  detail::check_times(times);
  detail::check_state(z0, times.front());
  DenseTrajectory dense;
  Solution sol = detail::dopri45(rhs, z0, times, cfg, &dense);
  return {std::move(sol), std::move(dense)};
}

inline std::vector<double> linspace(double a, double b, std::size_t count) {
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = a;
    return out;
  }
  for (std::size_t i = 0; i < count; ++i)
    out[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1);
  return out;
}

}  // namespace upn
