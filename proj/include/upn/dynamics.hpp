#pragma once

// Coupled mean/covariance right-hand side of an uncertainty propagation
// network:
//     d mu / dt    = f(mu, t)
//     d Sigma / dt = J Sigma + Sigma J^T + Q(mu, t),   Q = L L^T + eps I
// packed as z = [mu; vech(Sigma)] (full mode) or z = [mu; diag(Sigma)]
// (diagonal mode).

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "upn/errors.hpp"
#include "upn/linalg.hpp"
#include "upn/net.hpp"

namespace upn {

enum class CovMode { full, diagonal };

inline std::string to_string(CovMode m) { return m == CovMode::full ? "full" : "diagonal"; }

inline CovMode cov_mode_from_string(const std::string& s) {
  if (s == "full") return CovMode::full;
  if (s == "diagonal") return CovMode::diagonal;
  throw ConfigError("unknown cov_mode '" + s + "' (expected full|diagonal)");
}

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct UpnModel {
  MlpNet dynamics;  // [mu; t] -> n
  MlpNet noise;     // [mu; t] -> n(n+1)/2 (full) or n (diagonal)
  int state_dim = 0;
  CovMode cov_mode = CovMode::full;
  double eps_noise = 1e-6;
  double psd_floor = 1e-9;
  // Multiplies Q inside the covariance RHS. 1 for forecasting models,
  // the alpha scaling for flows.
  double noise_gain = 1.0;
  // log of the initial standard deviation used when a forecast starts from
  // an observation: Sigma0 = exp(2 * init_log_scale) I. Trainable.
  double init_log_scale = std::log(0.1);

  // Hidden widths apply to both nets. Initial Q is close to 1e-2 I.
  static UpnModel create(int n, const std::vector<int>& hidden, CovMode mode, std::uint64_t seed) {
    detail::require_dims(n >= 1, "UpnModel: state dimension must be positive");
    UpnModel m;
    m.state_dim = n;
    m.cov_mode = mode;
    std::vector<int> dims{n + 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(n);
    m.dynamics = MlpNet::random(dims, derive_seed(seed, 0));
    dims.back() = mode == CovMode::full ? triangular_number(n) : n;
    m.noise = MlpNet::random(dims, derive_seed(seed, 1));
    const std::size_t last = m.noise.num_layers() - 1;
    m.noise.weight(last) *= 0.1;
    Vec& b = m.noise.bias(last);
    b.setZero();
    if (mode == CovMode::full) {
      for (int i = 0; i < n; ++i) b(vech_index(i, i)) = 0.1;
    } else {
      b.setConstant(std::log(std::expm1(0.1)));  // softplus(b) = 0.1
    }
    m.validate();
    return m;
  }

  void validate() const {
    detail::require_dims(dynamics.state_dim() == state_dim && dynamics.output_dim() == state_dim,
                         "UpnModel: dynamics net must map n (+time) to n");
    const int expected = cov_mode == CovMode::full ? triangular_number(state_dim) : state_dim;
    detail::require_dims(noise.state_dim() == state_dim && noise.output_dim() == expected,
                         "UpnModel: noise net output must be " + std::to_string(expected));
    if (!(eps_noise > 0.0)) throw DomainError("UpnModel: eps_noise must be > 0");
    if (psd_floor < 0.0) throw DomainError("UpnModel: psd_floor must be >= 0");
  }

  int cov_size() const { return cov_mode == CovMode::full ? triangular_number(state_dim) : state_dim; }
  int packed_size() const { return state_dim + cov_size(); }

  std::size_t dynamics_param_count() const { return dynamics.param_count(); }
  std::size_t noise_param_count() const { return noise.param_count(); }
  // dynamics, noise, init_log_scale
  std::size_t param_count() const { return dynamics.param_count() + noise.param_count() + 1; }

  Vec parameters() const {
    Vec p(static_cast<Eigen::Index>(param_count()));
    const auto nd = static_cast<Eigen::Index>(dynamics.param_count());
    const auto nn = static_cast<Eigen::Index>(noise.param_count());
    p.head(nd) = dynamics.flatten();
    p.segment(nd, nn) = noise.flatten();
    p(nd + nn) = init_log_scale;
    return p;
  }

  void set_parameters(const Vec& p) {
    detail::require_dims(static_cast<std::size_t>(p.size()) == param_count(), "UpnModel: parameter length mismatch");
    const auto nd = static_cast<Eigen::Index>(dynamics.param_count());
    const auto nn = static_cast<Eigen::Index>(noise.param_count());
    dynamics.unflatten(p.head(nd));
    noise.unflatten(p.segment(nd, nn));
    init_log_scale = p(nd + nn);
  }
};

struct GaussianState {
  Vec mu;
  SymMatrix sigma;
  double t = 0.0;

  int dim() const { return static_cast<int>(mu.size()); }
};

/// [mu; vech(Sigma)] or [mu; diag(Sigma)].
inline Vec pack(const GaussianState& s, CovMode mode) {
  const int n = s.dim();
  detail::require_dims(s.sigma.dim() == n, "pack: covariance dimension mismatch");
  Vec z(n + (mode == CovMode::full ? triangular_number(n) : n));
  z.head(n) = s.mu;
  if (mode == CovMode::full) {
    z.tail(triangular_number(n)) = vech(s.sigma).data;
  } else {
    z.tail(n) = s.sigma.diagonal();
  }
  return z;
}

inline GaussianState unpack(const Vec& z, int n, CovMode mode, double t) {
  const int expected = n + (mode == CovMode::full ? triangular_number(n) : n);
  detail::require_dims(z.size() == expected, "unpack: packed state has length " + std::to_string(z.size()) +
                                                 ", expected " + std::to_string(expected));
  GaussianState s;
  s.mu = z.head(n);
  s.t = t;
  if (mode == CovMode::full) {
    s.sigma = SymMatrix(unvech_matrix(z.tail(triangular_number(n)), n));
  } else {
    s.sigma = SymMatrix::diagonal(z.tail(n));
  }
  return s;
}

/// Q = L L^T + eps I (full) or diag(softplus(raw)^2) + eps I (diagonal).
inline Mat process_noise_matrix(const UpnModel& model, const Vec& raw) {
  const int n = model.state_dim;
  if (model.cov_mode == CovMode::full) {
    const Mat l = lower_triangular_from(raw, n);
    Mat q = l * l.transpose();
    q.diagonal().array() += model.eps_noise;
    return q;
  }
  Vec d(n);
  for (int i = 0; i < n; ++i) {
    const double sp = softplus(raw(i));
    d(i) = sp * sp + model.eps_noise;
  }
  return Mat(d.asDiagonal());
}

inline SymMatrix process_noise(const UpnModel& model, const Vec& mu, double t) {
  detail::require_dims(mu.size() == model.state_dim, "process_noise: mean length mismatch");
  return SymMatrix(process_noise_matrix(model, forward(model.noise, mu, t)));
}

/// J Sigma + Sigma J^T + Q.
inline SymMatrix covariance_rhs(const Mat& j, const SymMatrix& sigma, const SymMatrix& q) {
  const auto n = j.rows();
  detail::require_dims(j.cols() == n && sigma.dim() == n && q.dim() == n, "covariance_rhs: dimension mismatch");
  const Mat js = j * sigma.matrix();
  return SymMatrix(js + js.transpose() + q.matrix());
}

namespace detail {

inline void check_finite_rhs(const Vec& dz, int n, double t) {
  for (Eigen::Index i = 0; i < dz.size(); ++i) {
    if (!std::isfinite(dz(i))) {
      const std::string part = i < n ? "mean component " + std::to_string(i)
                                     : "covariance component " + std::to_string(i - n);
      throw NumericalError("upn_rhs: non-finite derivative in " + part + " at t=" + std::to_string(t));
    }
  }
}

// Symmetric cotangent G with <G, dC> = sum_{i>=j} a_ij dC_ij for symmetric dC.
inline Mat symmetric_cotangent(const Vec& a_vech, int n) {
  Mat g(n, n);
  for (int i = 0; i < n; ++i) {
    g(i, i) = a_vech(vech_index(i, i));
    for (int j = 0; j < i; ++j) g(i, j) = g(j, i) = 0.5 * a_vech(vech_index(i, j));
  }
  return g;
}

// Gradient with respect to vech(S) of a scalar with symmetric-matrix gradient G.
inline Vec vech_gradient(const Mat& g, int n) {
  Vec out(triangular_number(n));
  for (int i = 0; i < n; ++i) {
    out(vech_index(i, i)) = g(i, i);
    for (int j = 0; j < i; ++j) out(vech_index(i, j)) = g(i, j) + g(j, i);
  }
  return out;
}

}  // namespace detail

/// d z / dt for the packed state.
inline Vec upn_rhs(const UpnModel& model, const Vec& z, double t) {
  const int n = model.state_dim;
  detail::require_dims(z.size() == model.packed_size(), "upn_rhs: packed state has length " +
                                                            std::to_string(z.size()) + ", expected " +
                                                            std::to_string(model.packed_size()));
  const Vec mu = z.head(n);
  const GradTape dyn = GradTape::record(model.dynamics, mu, t, true);
  const Vec raw = forward(model.noise, mu, t);
  const Mat& j = dyn.jacobian();
  Vec dz(z.size());
  dz.head(n) = dyn.output();
  if (model.cov_mode == CovMode::full) {
    const Mat sigma = unvech_matrix(z.tail(triangular_number(n)), n);
    const Mat js = j * sigma;
    const Mat q = process_noise_matrix(model, raw);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c <= r; ++c) dz(n + vech_index(r, c)) = js(r, c) + js(c, r) + model.noise_gain * q(r, c);
  } else {
    for (int i = 0; i < n; ++i) {
      const double sp = softplus(raw(i));
      dz(n + i) = 2.0 * j(i, i) * z(n + i) + model.noise_gain * (sp * sp + model.eps_noise);
    }
  }
  detail::check_finite_rhs(dz, n, t);
  return dz;
}

/// Vector-Jacobian product of upn_rhs. Returns a^T d(rhs)/dz and adds
/// a^T d(rhs)/d(params) into `grad`, laid out as [dynamics params, noise params]
/// (length dynamics_param_count() + noise_param_count(); may be null).
inline Vec upn_rhs_vjp(const UpnModel& model, const Vec& z, double t, const Vec& a, double* grad) {
  const int n = model.state_dim;
  detail::require_dims(z.size() == model.packed_size() && a.size() == z.size(), "upn_rhs_vjp: length mismatch");
  const Vec mu = z.head(n);
  const GradTape dyn = GradTape::record(model.dynamics, mu, t, true);
  const GradTape noise = GradTape::record(model.noise, mu, t, false);
  const Mat& j = dyn.jacobian();
  const Vec& raw = noise.output();
  Vec z_bar = Vec::Zero(z.size());
  Mat j_bar(n, n);
  Vec raw_bar(raw.size());
  if (model.cov_mode == CovMode::full) {
    const int m = triangular_number(n);
    const Mat sigma = unvech_matrix(z.tail(m), n);
    const Mat g = detail::symmetric_cotangent(a.tail(m), n);
    j_bar = 2.0 * g * sigma;
    const Mat sigma_bar = j.transpose() * g + g * j;
    z_bar.tail(m) = detail::vech_gradient(sigma_bar, n);
    const Mat l = lower_triangular_from(raw, n);
    const Mat l_bar = 2.0 * model.noise_gain * g * l;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c <= r; ++c) raw_bar(vech_index(r, c)) = l_bar(r, c);
  } else {
    j_bar.setZero();
    for (int i = 0; i < n; ++i) {
      const double ai = a(n + i);
      j_bar(i, i) = 2.0 * ai * z(n + i);
      z_bar(n + i) = 2.0 * j(i, i) * ai;
      const double sp = softplus(raw(i));
      raw_bar(i) = model.noise_gain * ai * 2.0 * sp * sigmoid(raw(i));
    }
  }
  double* dyn_grad = grad;
  double* noise_grad = grad == nullptr ? nullptr : grad + model.dynamics.param_count();
  z_bar.head(n) += dyn.backward(model.dynamics, a.head(n), &j_bar, dyn_grad);
  z_bar.head(n) += noise.backward(model.noise, raw_bar, nullptr, noise_grad);
  return z_bar;
}

}  // namespace upn
