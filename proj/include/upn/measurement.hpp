#pragma once

// Kalman / EKF measurement updates and the predict-observe-correct loop.

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <unsupported/Eigen/AutoDiff>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/linalg.hpp"
#include "upn/ode.hpp"

namespace upn {

/// Differentiable observation map y = h(x) with its Jacobian.
struct ObservationMap {
  int output_dim = 0;
  std::function<Vec(const Vec&)> value;
  std::function<Mat(const Vec&)> jacobian;
};

using AdScalar = Eigen::AutoDiffScalar<Eigen::VectorXd>;
using AdVec = Eigen::Matrix<AdScalar, Eigen::Dynamic, 1>;
using AdMat = Eigen::Matrix<AdScalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Wraps a generic callable `f(const Eigen::Matrix<S, Dynamic, 1>&)` whose
/// Jacobian is obtained by forward-mode automatic differentiation.
template <class F>
ObservationMap make_observation_map(F f, int output_dim) {
  ObservationMap map;
  map.output_dim = output_dim;
  map.value = [f](const Vec& x) -> Vec { return f(x); };
  map.jacobian = [f, output_dim](const Vec& x) -> Mat {
    const auto n = x.size();
    AdVec xa(n);
    for (Eigen::Index i = 0; i < n; ++i) xa(i) = AdScalar(x(i), n, i);
    const AdVec ya = f(xa);
    detail::require_dims(ya.size() == output_dim, "observation map: output length mismatch");
    Mat jac(output_dim, n);
    for (int r = 0; r < output_dim; ++r) {
      if (ya(r).derivatives().size() == 0)
        jac.row(r).setZero();
      else
        jac.row(r) = ya(r).derivatives().transpose();
    }
    return jac;
  };
  return map;
}

struct ObservationModel {
  enum class Kind { linear, nonlinear };
  Kind kind = Kind::linear;
  Mat h_matrix;  // linear: m x n
  ObservationMap h;
  Mat r;  // m x m, symmetric PD

  static ObservationModel linear(Mat h_matrix, Mat r) {
    ObservationModel m;
    m.kind = Kind::linear;
    m.h_matrix = std::move(h_matrix);
    m.r = std::move(r);
    m.validate();
    return m;
  }

  static ObservationModel nonlinear(ObservationMap h, Mat r) {
    ObservationModel m;
    m.kind = Kind::nonlinear;
    m.h = std::move(h);
    m.r = std::move(r);
    m.validate();
    return m;
  }

  int output_dim() const { return kind == Kind::linear ? static_cast<int>(h_matrix.rows()) : h.output_dim; }

  void validate() const {
    detail::require_dims(r.rows() == output_dim() && r.cols() == output_dim(), "ObservationModel: R must be m x m");
    if ((r - r.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, r.cwiseAbs().maxCoeff()))
      throw DomainError("ObservationModel: R must be symmetric");
    if (SymMatrix(r).min_eigenvalue() <= 0.0) throw DomainError("ObservationModel: R must be positive definite");
  }
};

/// Jacobian of h at mu.
inline Mat linearize(const ObservationMap& h, const Vec& mu) {
  Mat jac = h.jacobian(mu);
  if (!jac.allFinite()) throw NumericalError("linearize: non-finite Jacobian");
  return jac;
}

struct KalmanResult {
  GaussianState posterior;
  bool regularized = false;  // jitter was added to the innovation covariance
  double innovation_nll = 0.0;  // -log N(y; predicted y, H Sigma H^T + R)
};

using Mask = std::vector<bool>;

namespace detail {

inline std::vector<int> present_indices(const Mask& mask, int m) {
  std::vector<int> idx;
  for (int i = 0; i < m; ++i)
    if (mask.empty() || mask[static_cast<std::size_t>(i)]) idx.push_back(i);
  return idx;
}

// Linearized observation restricted to the present rows.
struct LinearizedObservation {
  Mat h;        // k x n
  Vec y;        // k
  Vec h_at_mu;  // k, h(mu0)
  Mat r;        // k x k
};

inline LinearizedObservation select_observation(const ObservationModel& model, const Vec& mu, const Vec& y,
                                                const Mask& mask) {
  const int m = model.output_dim();
  detail::require_dims(y.size() == m, "kalman_update: observation has length " + std::to_string(y.size()) +
                                          ", model expects " + std::to_string(m));
  detail::require_dims(mask.empty() || static_cast<int>(mask.size()) == m, "kalman_update: mask length mismatch");
  Mat h_full;
  Vec h_val;
  if (model.kind == ObservationModel::Kind::linear) {
    detail::require_dims(model.h_matrix.cols() == mu.size(), "kalman_update: H column count mismatch");
    h_full = model.h_matrix;
    h_val = h_full * mu;
  } else {
    h_full = linearize(model.h, mu);
    h_val = model.h.value(mu);
  }
  const auto idx = present_indices(mask, m);
  const auto k = static_cast<Eigen::Index>(idx.size());
  LinearizedObservation out{Mat(k, mu.size()), Vec(k), Vec(k), Mat(k, k)};
  for (Eigen::Index a = 0; a < k; ++a) {
    out.h.row(a) = h_full.row(idx[a]);
    out.y(a) = y(idx[a]);
    out.h_at_mu(a) = h_val(idx[a]);
    for (Eigen::Index b = 0; b < k; ++b) out.r(a, b) = model.r(idx[a], idx[b]);
  }
  return out;
}

// In-place lower Cholesky for small matrices of any scalar type.
template <class S>
bool small_cholesky(Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& a) {
  using std::sqrt;
  const auto n = a.rows();
  for (Eigen::Index j = 0; j < n; ++j) {
    S d = a(j, j);
    for (Eigen::Index k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0)) return false;
    a(j, j) = sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      S s = a(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / a(j, j);
    }
    for (Eigen::Index k = j + 1; k < n; ++k) a(j, k) = S(0.0);
  }
  return true;
}

// Solves (L L^T) X = B given the lower factor L.
template <class S>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> cholesky_solve(
    const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& l, Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> b) {
  const auto n = l.rows();
  for (Eigen::Index c = 0; c < b.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      S s = b(i, c);
      for (Eigen::Index k = 0; k < i; ++k) s -= l(i, k) * b(k, c);
      b(i, c) = s / l(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      S s = b(i, c);
      for (Eigen::Index k = i + 1; k < n; ++k) s -= l(k, i) * b(k, c);
      b(i, c) = s / l(i, i);
    }
  }
  return b;
}

template <class S>
struct KalmanCoreOut {
  Eigen::Matrix<S, Eigen::Dynamic, 1> mu;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> sigma;
  S nll;
  bool ok = true;
};

// Joseph-form update around the linearization point mu0. Returns ok=false
// when the innovation covariance (plus jitter) is not positive definite.
template <class S>
KalmanCoreOut<S> kalman_core(const Eigen::Matrix<S, Eigen::Dynamic, 1>& mu,
                             const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& sigma, const Vec& mu0,
                             const LinearizedObservation& obs, double jitter) {
  using MatS = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using VecS = Eigen::Matrix<S, Eigen::Dynamic, 1>;
  using std::log;
  const auto n = mu.size();
  const auto k = obs.y.size();
  const MatS h = obs.h.template cast<S>();
  const VecS dmu = mu - mu0.template cast<S>();
  const VecS innovation = (obs.y - obs.h_at_mu).template cast<S>() - h * dmu;
  const MatS sh = sigma * h.transpose();
  MatS p = h * sh + obs.r.template cast<S>();
  for (Eigen::Index i = 0; i < k; ++i) p(i, i) += jitter;
  MatS l = p;
  KalmanCoreOut<S> out;
  if (!small_cholesky(l)) {
    out.ok = false;
    return out;
  }
  // K = Sigma H^T P^{-1}
  const MatS kt = cholesky_solve<S>(l, sh.transpose());
  const MatS gain = kt.transpose();
  out.mu = mu + gain * innovation;
  MatS a = MatS::Identity(n, n) - gain * h;
  MatS post = a * sigma * a.transpose() + gain * obs.r.template cast<S>() * gain.transpose();
  out.sigma = (post + post.transpose()) * S(0.5);
  const VecS w = cholesky_solve<S>(l, MatS(innovation)).col(0);
  S logdet = S(0.0);
  for (Eigen::Index i = 0; i < k; ++i) logdet += log(l(i, i));
  out.nll = S(0.5) * innovation.dot(w) + logdet + S(0.5 * static_cast<double>(k) * std::log(2.0 * std::numbers::pi));
  return out;
}

inline double innovation_jitter(const Mat& sigma, const LinearizedObservation& obs) {
  const Mat p = obs.h * sigma * obs.h.transpose() + obs.r;
  const double k = static_cast<double>(p.rows());
  return 1e-9 * std::max(p.trace(), 1e-300) / k;
}

}  // namespace detail

/// Kalman (or EKF) correction of `prior` by observation `y`. Masked-out
/// entries (mask[i] == false) are ignored. With no present entries the
/// prior is returned unchanged.
inline KalmanResult kalman_update(const GaussianState& prior, const Vec& y, const ObservationModel& model,
                                  const Mask& mask = {}) {
  const int n = prior.dim();
  detail::require_dims(prior.sigma.dim() == n, "kalman_update: covariance dimension mismatch");
  const auto obs = detail::select_observation(model, prior.mu, y, mask);
  KalmanResult res;
  if (obs.y.size() == 0) {
    res.posterior = prior;
    return res;
  }
  auto out = detail::kalman_core<double>(prior.mu, prior.sigma.matrix(), prior.mu, obs, 0.0);
  if (!out.ok) {
    res.regularized = true;
    out = detail::kalman_core<double>(prior.mu, prior.sigma.matrix(), prior.mu, obs,
                                      detail::innovation_jitter(prior.sigma.matrix(), obs));
    if (!out.ok) throw FactorizationError("kalman_update: innovation covariance is not positive definite");
  }
  res.posterior = GaussianState{out.mu, SymMatrix(out.sigma), prior.t};
  res.innovation_nll = out.nll;
  return res;
}

/// Gradients of a scalar loss through kalman_update.
struct KalmanVjp {
  Vec mu_bar;          // dL/d mu_prior
  Vec sigma_vech_bar;  // dL/d vech(Sigma_prior)
};

/// Given dL/d mu_post, the symmetric gradient dL/d Sigma_post (as a matrix G
/// with dL = <G, dSigma_post>), and dL/d innovation_nll, returns the
/// gradient with respect to the prior mean and vech(prior covariance).
/// For nonlinear models the linearization Jacobian is held fixed.
inline KalmanVjp kalman_update_vjp(const GaussianState& prior, const Vec& y, const ObservationModel& model,
                                   const Mask& mask, const Vec& mu_post_bar, const Mat& sigma_post_bar,
                                   double nll_bar) {
  const int n = prior.dim();
  const int m = triangular_number(n);
  const auto obs = detail::select_observation(model, prior.mu, y, mask);
  KalmanVjp out{mu_post_bar, Vec::Zero(m)};
  if (obs.y.size() == 0) {
    out.sigma_vech_bar = detail::vech_gradient(sigma_post_bar, n);
    return out;
  }
  const int inputs = n + m;
  AdVec mu(n);
  for (int i = 0; i < n; ++i) mu(i) = AdScalar(prior.mu(i), inputs, i);
  AdMat sigma(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) sigma(i, j) = sigma(j, i) = AdScalar(prior.sigma(i, j), inputs, n + vech_index(i, j));
  double jitter = 0.0;
  auto res = detail::kalman_core<AdScalar>(mu, sigma, prior.mu, obs, jitter);
  if (!res.ok) {
    jitter = detail::innovation_jitter(prior.sigma.matrix(), obs);
    res = detail::kalman_core<AdScalar>(mu, sigma, prior.mu, obs, jitter);
    if (!res.ok) throw FactorizationError("kalman_update_vjp: innovation covariance is not positive definite");
  }
  Vec grad = Vec::Zero(inputs);
  auto accumulate = [&](const AdScalar& v, double w) {
    if (w != 0.0 && v.derivatives().size() == inputs) grad += w * v.derivatives();
  };
  for (int i = 0; i < n; ++i) accumulate(res.mu(i), mu_post_bar(i));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) accumulate(res.sigma(i, j), sigma_post_bar(i, j));
  accumulate(res.nll, nll_bar);
  out.mu_bar = grad.head(n);
  out.sigma_vech_bar = grad.tail(m);
  return out;
}

/// Irregularly timestamped observations. masks[i] may be empty (all present).
struct ObservationSeries {
  std::vector<double> times;
  std::vector<Vec> values;
  std::vector<Mask> masks;
  ObservationModel model;

  std::size_t size() const { return times.size(); }
  const Mask& mask(std::size_t i) const {
    static const Mask all;
    return masks.empty() ? all : masks[i];
  }

  void validate() const {
    detail::require_dims(values.size() == times.size(), "ObservationSeries: one value per time");
    detail::require_dims(masks.empty() || masks.size() == times.size(), "ObservationSeries: one mask per time");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1])) throw DomainError("ObservationSeries: times must be strictly ascending");
  }
};

struct FilterStep {
  double t = 0.0;
  GaussianState prior;
  GaussianState posterior;
  bool regularized = false;
  double innovation_nll = 0.0;
};

struct FilterResult {
  std::vector<FilterStep> steps;
  GaussianState final_state;  // state at t_end (or after the last update)
};

namespace detail {

// Propagates a state by `span` time units. The net's time input is measured
// from the start of the segment, i.e. from the last conditioning point.
inline GaussianState propagate(const UpnModel& model, const GaussianState& s, double span, const SolverConfig& cfg) {
  if (span <= 0.0) return s;
  const Vec z0 = pack(s, model.cov_mode);
  const std::vector<double> times{0.0, span};
  const auto rhs = [&model](const Vec& z, double t) { return upn_rhs(model, z, t); };
  const Solution sol = integrate(rhs, z0, times, cfg);
  GaussianState out = unpack(sol.states.back(), model.state_dim, model.cov_mode, s.t + span);
  out.sigma = psd_repair(out.sigma, model.psd_floor);
  return out;
}

inline GaussianState project_to_mode(GaussianState s, CovMode mode) {
  if (mode == CovMode::diagonal) s.sigma = SymMatrix::diagonal(s.sigma.diagonal());
  return s;
}

}  // namespace detail

/// Alternates UPN propagation between observation times with Kalman
/// updates. If `t_end` is given the final posterior is propagated to it.
inline FilterResult filter_pass(const UpnModel& model, const GaussianState& init, const ObservationSeries& obs,
                                const SolverConfig& cfg, std::optional<double> t_end = std::nullopt) {
  model.validate();
  obs.validate();
  if (!obs.times.empty() && init.t > obs.times.front())
    throw DomainError("filter_pass: initial time is after the first observation");
  FilterResult result;
  GaussianState state = init;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    FilterStep step;
    step.t = obs.times[i];
    step.prior = detail::propagate(model, state, obs.times[i] - state.t, cfg);
    step.prior.t = obs.times[i];
    const KalmanResult upd = kalman_update(step.prior, obs.values[i], obs.model, obs.mask(i));
    step.posterior = detail::project_to_mode(upd.posterior, model.cov_mode);
    step.regularized = upd.regularized;
    step.innovation_nll = upd.innovation_nll;
    state = step.posterior;
    result.steps.push_back(std::move(step));
  }
  if (t_end && *t_end > state.t) {
    state = detail::propagate(model, state, *t_end - state.t, cfg);
    state.t = *t_end;
  }
  result.final_state = state;
  return result;
}

/// Sum of innovation negative log-likelihoods of a filter pass, with its
/// gradient. Propagation uses taped fixed-step RK4 of step `cfg.step` so the
/// gradient is exact for the discrete computation. `grad` (may be null)
/// receives [dynamics params, noise params]; `init_bar` (may be null)
/// receives dL/d pack(init) in full-covariance coordinates for full mode,
/// diagonal coordinates for diagonal mode.
inline double filter_nll(const UpnModel& model, const GaussianState& init, const ObservationSeries& obs,
                         const SolverConfig& cfg, double* grad, Vec* init_bar) {
  model.validate();
  obs.validate();
  SolverConfig rk = cfg;
  rk.method = Method::rk4_fixed;
  const int n = model.state_dim;
  const auto rhs = [&model](const Vec& z, double t) { return upn_rhs(model, z, t); };
  const auto vjp = [&model](const Vec& z, double t, const Vec& a, double* g) {
    return upn_rhs_vjp(model, z, t, a, g);
  };
  struct Segment {
    RkTape tape;
    GaussianState prior;  // state at the observation, before the update
    bool propagated = false;
  };
  std::vector<Segment> segments;
  segments.reserve(obs.size());
  GaussianState state = init;
  double loss = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    Segment seg;
    const double span = obs.times[i] - state.t;
    if (span > 0.0) {
      const std::vector<double> times{0.0, span};
      auto [sol, tape] = integrate_with_tape(rhs, pack(state, model.cov_mode), times, rk);
      seg.tape = std::move(tape);
      seg.propagated = true;
      seg.prior = unpack(sol.states.back(), n, model.cov_mode, obs.times[i]);
    } else {
      seg.prior = state;
    }
    const KalmanResult upd = kalman_update(seg.prior, obs.values[i], obs.model, obs.mask(i));
    loss += upd.innovation_nll;
    state = detail::project_to_mode(upd.posterior, model.cov_mode);
    segments.push_back(std::move(seg));
  }
  // Backward: cotangent of the posterior packed state flows to the prior.
  Vec post_bar = Vec::Zero(model.packed_size());
  for (std::size_t ii = segments.size(); ii-- > 0;) {
    const Segment& seg = segments[ii];
    Mat sigma_post_bar;
    if (model.cov_mode == CovMode::full) {
      sigma_post_bar = detail::symmetric_cotangent(post_bar.tail(triangular_number(n)), n);
    } else {
      sigma_post_bar = Mat(post_bar.tail(n).asDiagonal());
    }
    const KalmanVjp kv = kalman_update_vjp(seg.prior, obs.values[ii], obs.model, obs.mask(ii), post_bar.head(n),
                                           sigma_post_bar, 1.0);
    Vec prior_bar(model.packed_size());
    prior_bar.head(n) = kv.mu_bar;
    if (model.cov_mode == CovMode::full) {
      prior_bar.tail(triangular_number(n)) = kv.sigma_vech_bar;
    } else {
      for (int d = 0; d < n; ++d) prior_bar(n + d) = kv.sigma_vech_bar(vech_index(d, d));
    }
    if (seg.propagated) {
      std::vector<Vec> cot(2);
      cot[1] = prior_bar;
      post_bar = seg.tape.backward(vjp, cot, grad);
    } else {
      post_bar = prior_bar;
    }
  }
  if (init_bar != nullptr) *init_bar = post_bar;
  return loss;
}

}  // namespace upn
