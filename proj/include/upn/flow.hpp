#pragma once

// Continuous normalizing flow built on the UPN dynamics: samples move with
// the mean dynamics, carry a covariance, and accumulate
// d log p / dt = -tr(J) + 1/2 tr(Sigma^{-1} Q).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/io.hpp"
#include "upn/linalg.hpp"
#include "upn/net.hpp"
#include "upn/ode.hpp"

namespace upn {

/// -tr(J) + 1/2 tr(Sigma^{-1} Q). Q is passed already scaled.
inline double logdensity_rhs(const Mat& j, const Mat& sigma, const Mat& q) {
  detail::require_dims(j.rows() == j.cols() && sigma.rows() == j.rows() && sigma.cols() == j.rows() &&
                           q.rows() == j.rows() && q.cols() == j.rows(),
                       "logdensity_rhs: dimension mismatch");
  double out = -j.trace();
  if (q.isZero(0.0)) return out;
  Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success) throw NumericalError("logdensity_rhs: covariance is not positive definite");
  return out + 0.5 * llt.solve(q).trace();
}

struct FlowModel {
  UpnModel upn;    // 2-D, full covariance; upn.noise_gain is alpha
  Vec base_mu;     // base Gaussian mean
  Vec base_chol;   // (log l00, l10, log l11) of the base covariance factor
  double horizon = 1.0;

  static FlowModel create(const std::vector<int>& hidden, double alpha, double horizon, std::uint64_t seed) {
    FlowModel f;
    f.upn = UpnModel::create(2, hidden, CovMode::full, seed);
    f.upn.noise_gain = alpha;
    f.base_mu = Vec::Zero(2);
    f.base_chol = Vec::Zero(3);
    f.horizon = horizon;
    f.validate();
    return f;
  }

  void validate() const {
    upn.validate();
    detail::require_dims(upn.state_dim == 2 && upn.cov_mode == CovMode::full, "FlowModel: needs a 2-D full-covariance UPN");
    detail::require_dims(base_mu.size() == 2 && base_chol.size() == 3, "FlowModel: base parameters have wrong length");
    if (!(upn.noise_gain >= 0.0)) throw ConfigError("flow.alpha must be >= 0");
    if (!(horizon > 0.0)) throw ConfigError("flow.horizon must be > 0");
    if (!base_chol.allFinite() || !base_mu.allFinite()) throw DomainError("FlowModel: base parameters not finite");
  }

  double alpha() const { return upn.noise_gain; }

  Mat base_factor() const {
    Mat l = Mat::Zero(2, 2);
    l(0, 0) = std::exp(base_chol(0));
    l(1, 0) = base_chol(1);
    l(1, 1) = std::exp(base_chol(2));
    return l;
  }

  Mat base_sigma() const {
    const Mat l = base_factor();
    return l * l.transpose();
  }

  double base_logpdf(const Vec& x) const {
    const Mat l = base_factor();
    const Vec w = l.triangularView<Eigen::Lower>().solve(x - base_mu);
    return -std::log(2.0 * std::numbers::pi) - base_chol(0) - base_chol(2) - 0.5 * w.squaredNorm();
  }

  std::size_t net_param_count() const { return upn.dynamics.param_count() + upn.noise.param_count(); }
  // dynamics, noise, base_mu, base_chol
  std::size_t param_count() const { return net_param_count() + 5; }

  Vec parameters() const {
    Vec p(static_cast<Eigen::Index>(param_count()));
    const auto nd = static_cast<Eigen::Index>(upn.dynamics.param_count());
    const auto nn = static_cast<Eigen::Index>(upn.noise.param_count());
    p.head(nd) = upn.dynamics.flatten();
    p.segment(nd, nn) = upn.noise.flatten();
    p.segment(nd + nn, 2) = base_mu;
    p.tail(3) = base_chol;
    return p;
  }

  void set_parameters(const Vec& p) {
    detail::require_dims(static_cast<std::size_t>(p.size()) == param_count(), "FlowModel: parameter length mismatch");
    const auto nd = static_cast<Eigen::Index>(upn.dynamics.param_count());
    const auto nn = static_cast<Eigen::Index>(upn.noise.param_count());
    upn.dynamics.unflatten(p.head(nd));
    upn.noise.unflatten(p.segment(nd, nn));
    base_mu = p.segment(nd + nn, 2);
    base_chol = p.tail(3);
  }
};

struct FlowSample {
  Vec x;
  double logp = 0.0;  // log-density change accumulated since t = 0
  SymMatrix sigma;
};

namespace detail {

// Augmented state [x (2); vech Sigma (3); logp (1)].
inline Vec flow_rhs(const FlowModel& f, const Vec& z, double t) {
  const Vec x = z.head(2);
  const GradTape dyn = GradTape::record(f.upn.dynamics, x, t, true);
  const Mat& j = dyn.jacobian();
  const Mat sigma = unvech_matrix(z.segment(2, 3), 2);
  const Mat q = f.alpha() * process_noise_matrix(f.upn, forward(f.upn.noise, x, t));
  const Mat js = j * sigma;
  Vec dz(6);
  dz.head(2) = dyn.output();
  dz.segment(2, 3) = vech(Mat(js + js.transpose() + q)).data;
  dz(5) = logdensity_rhs(j, sigma, q);
  if (!dz.allFinite()) throw NumericalError("flow: non-finite derivative at t=" + std::to_string(t));
  return dz;
}

// Adds a^T d rhs / d(dynamics, noise params) into grad.
inline Vec flow_rhs_vjp(const FlowModel& f, const Vec& z, double t, const Vec& a, double* grad) {
  const Vec x = z.head(2);
  const GradTape dyn = GradTape::record(f.upn.dynamics, x, t, true);
  const GradTape noise = GradTape::record(f.upn.noise, x, t, false);
  const Mat& j = dyn.jacobian();
  const Mat sigma = unvech_matrix(z.segment(2, 3), 2);
  const Mat g = symmetric_cotangent(a.segment(2, 3), 2);
  const double al = a(5);
  const double alpha = f.alpha();
  Mat j_bar = 2.0 * g * sigma - al * Mat::Identity(2, 2);
  Mat sigma_bar = j.transpose() * g + g * j;
  Mat q_bar = alpha * g;
  if (alpha != 0.0) {
    const Mat l = lower_triangular_from(noise.output(), 2);
    Mat q = l * l.transpose();
    q.diagonal().array() += f.upn.eps_noise;
    const Mat si = sigma.inverse();
    sigma_bar -= 0.5 * alpha * al * si * q * si;
    q_bar += 0.5 * alpha * al * si;
  }
  Vec z_bar = Vec::Zero(6);
  z_bar.segment(2, 3) = vech_gradient(sigma_bar, 2);
  const Mat l = lower_triangular_from(noise.output(), 2);
  const Mat l_bar = 2.0 * q_bar * l;
  Vec raw_bar(3);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c <= r; ++c) raw_bar(vech_index(r, c)) = l_bar(r, c);
  double* noise_grad = grad == nullptr ? nullptr : grad + f.upn.dynamics.param_count();
  z_bar.head(2) += dyn.backward(f.upn.dynamics, a.head(2), &j_bar, grad);
  z_bar.head(2) += noise.backward(f.upn.noise, raw_bar, nullptr, noise_grad);
  return z_bar;
}

inline Vec flow_initial(const Vec& x0, const Mat& sigma0) {
  Vec z(6);
  z.head(2) = x0;
  z.segment(2, 3) = vech(sigma0).data;
  z(5) = 0.0;
  return z;
}

}  // namespace detail

/// Evolves (x, Sigma, logp) from t = 0 to the flow horizon.
inline FlowSample flow_forward(const FlowModel& f, const Vec& x0, const Mat& sigma0, const SolverConfig& cfg = {}) {
  detail::require_dims(x0.size() == 2 && sigma0.rows() == 2 && sigma0.cols() == 2, "flow_forward: expects 2-D input");
  if (!x0.allFinite() || !sigma0.allFinite()) throw DomainError("flow_forward: non-finite input");
  const auto rhs = [&f](const Vec& z, double t) { return detail::flow_rhs(f, z, t); };
  const std::vector<double> grid{0.0, f.horizon};
  const Vec z = integrate(rhs, detail::flow_initial(x0, sigma0), grid, cfg).states.back();
  return {z.head(2), z(5), unvech(Vec(z.segment(2, 3)))};
}

/// Pre-image at t = 0: the mean dynamics integrated backward from the horizon.
inline Vec flow_inverse(const FlowModel& f, const Vec& x_t, const SolverConfig& cfg = {}) {
  detail::require_dims(x_t.size() == 2, "flow_inverse: expects a 2-vector");
  if (!x_t.allFinite()) throw DomainError("flow_inverse: non-finite input");
  const double horizon = f.horizon;
  const auto rhs = [&f, horizon](const Vec& y, double s) { return Vec(-forward(f.upn.dynamics, y, horizon - s)); };
  const std::vector<double> grid{0.0, horizon};
  return integrate(rhs, x_t, grid, cfg).states.back();
}

/// log p_T(x): base log-density of the pre-image plus the accumulated change
/// along the forward path from it, with Sigma(0) = base covariance.
inline double flow_loglik(const FlowModel& f, const Vec& x, const SolverConfig& cfg = {}) {
  const Vec x0 = flow_inverse(f, x, cfg);
  return f.base_logpdf(x0) + flow_forward(f, x0, f.base_sigma(), cfg).logp;
}

/// -log p_T(x) through taped RK4 passes; gradient over FlowModel::parameters().
inline double flow_nll_grad(const FlowModel& f, const Vec& x, const SolverConfig& cfg, Vec* grad) {
  SolverConfig rk = cfg;
  rk.method = Method::rk4_fixed;
  const double horizon = f.horizon;
  const std::vector<double> grid{0.0, horizon};
  const auto inv_rhs = [&f, horizon](const Vec& y, double s) { return Vec(-forward(f.upn.dynamics, y, horizon - s)); };
  auto [inv_sol, inv_tape] = integrate_with_tape(inv_rhs, x, grid, rk);
  const Vec x0 = inv_sol.states.back();
  const Mat l = f.base_factor();
  const Mat sigma_b = l * l.transpose();
  const auto fwd_rhs = [&f](const Vec& z, double t) { return detail::flow_rhs(f, z, t); };
  auto [fwd_sol, fwd_tape] = integrate_with_tape(fwd_rhs, detail::flow_initial(x0, sigma_b), grid, rk);
  const double nll = -(f.base_logpdf(x0) + fwd_sol.states.back()(5));
  if (grad == nullptr) return nll;

  grad->setZero(static_cast<Eigen::Index>(f.param_count()));
  std::vector<Vec> cot(2);
  cot[1] = Vec::Zero(6);
  cot[1](5) = -1.0;
  const auto fwd_vjp = [&f](const Vec& z, double t, const Vec& a, double* g) {
    return detail::flow_rhs_vjp(f, z, t, a, g);
  };
  const Vec zb0 = fwd_tape.backward(fwd_vjp, cot, grad->data());

  // base term: -log N(x0; mu, L L^T)
  const Vec d = x0 - f.base_mu;
  const Vec w = l.triangularView<Eigen::Lower>().solve(d);
  const Vec s_inv_d = l.transpose().triangularView<Eigen::Upper>().solve(w);
  const Vec x0_bar = zb0.head(2) + s_inv_d;
  const auto nn = static_cast<Eigen::Index>(f.net_param_count());
  grad->segment(nn, 2) = -s_inv_d;
  Mat l_bar = -(s_inv_d * w.transpose());
  l_bar(0, 0) += 1.0 / l(0, 0);
  l_bar(1, 1) += 1.0 / l(1, 1);
  l_bar += 2.0 * detail::symmetric_cotangent(zb0.segment(2, 3), 2) * l;
  (*grad)(nn + 2) = l_bar(0, 0) * l(0, 0);
  (*grad)(nn + 3) = l_bar(1, 0);
  (*grad)(nn + 4) = l_bar(1, 1) * l(1, 1);

  std::vector<Vec> inv_cot(2);
  inv_cot[1] = x0_bar;
  const auto inv_vjp = [&f, horizon](const Vec& y, double s, const Vec& a, double* g) {
    return GradTape::record(f.upn.dynamics, y, horizon - s, false).backward(f.upn.dynamics, Vec(-a), nullptr, g);
  };
  inv_tape.backward(inv_vjp, inv_cot, grad->data());
  return nll;
}

// ---------------------------------------------------------------- toy data

enum class ToyKind { moons, blobs, circles };

inline std::string to_string(ToyKind k) {
  switch (k) {
    case ToyKind::moons: return "moons";
    case ToyKind::blobs: return "blobs";
    case ToyKind::circles: return "circles";
  }
  return "?";
}

inline ToyKind toy_from_string(const std::string& s) {
  if (s == "moons") return ToyKind::moons;
  if (s == "blobs") return ToyKind::blobs;
  if (s == "circles") return ToyKind::circles;
  throw ConfigError("unknown flow dataset '" + s + "' (expected moons|blobs|circles)");
}

struct ToyDataset {
  std::vector<Vec> points;
  std::vector<int> labels;
};

inline const std::vector<Vec>& blob_centers() {
  static const std::vector<Vec> c = [] {
    std::vector<Vec> v(3, Vec(2));
    v[0] << 2.0, 2.0;
    v[1] << -2.0, 2.0;
    v[2] << 2.0, -2.0;
    return v;
  }();
  return c;
}

/// moons: unit upper arc and its flipped copy shifted by (1, 0.5);
/// circles: radii 1 and 0.5; blobs: three clusters at (2,2), (-2,2), (2,-2)
/// with standard deviation `noise`. Labels alternate so classes are balanced.
inline ToyDataset make_toy_dataset(ToyKind kind, int n, double noise, std::uint64_t seed) {
  if (n < 1) throw ConfigError("flow dataset size must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("flow dataset noise must be >= 0");
  std::mt19937_64 gen(derive_seed(seed, 31));
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> full(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> jitter(0.0, 1.0);
  ToyDataset out;
  for (int i = 0; i < n; ++i) {
    Vec p(2);
    int label = 0;
    switch (kind) {
      case ToyKind::moons: {
        label = i % 2;
        const double a = angle(gen);
        if (label == 0) p << std::cos(a), std::sin(a);
        else p << 1.0 - std::cos(a), 0.5 - std::sin(a);
        break;
      }
      case ToyKind::circles: {
        label = i % 2;
        const double a = full(gen);
        const double r = label == 0 ? 1.0 : 0.5;
        p << r * std::cos(a), r * std::sin(a);
        break;
      }
      case ToyKind::blobs:
        label = i % 3;
        p = blob_centers()[static_cast<std::size_t>(label)];
        break;
    }
    p(0) += noise * jitter(gen);
    p(1) += noise * jitter(gen);
    out.points.push_back(p);
    out.labels.push_back(label);
  }
  return out;
}

inline std::string toy_dataset_csv(const ToyDataset& d) {
  CsvWriter w({"x", "y", "label"});
  for (std::size_t i = 0; i < d.points.size(); ++i)
    w.row({d.points[i](0), d.points[i](1), static_cast<double>(d.labels[i])});
  return w.str();
}

// ---------------------------------------------------------------- grids

struct GridBounds {
  double x_min = -4.0, x_max = 4.0, y_min = -4.0, y_max = 4.0;
};

struct DensityGrid {
  std::vector<double> xs, ys;
  Mat density;  // density(iy, ix)

  double cell_area() const { return (xs[1] - xs[0]) * (ys[1] - ys[0]); }

  std::string csv() const {
    CsvWriter w({"x", "y", "density"});
    for (std::size_t iy = 0; iy < ys.size(); ++iy)
      for (std::size_t ix = 0; ix < xs.size(); ++ix)
        w.row({xs[ix], ys[iy], density(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix))});
    return w.str();
  }
};

inline std::vector<double> grid_axis(double lo, double hi, int resolution) {
  std::vector<double> v(static_cast<std::size_t>(resolution));
  for (int i = 0; i < resolution; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (resolution - 1);
  return v;
}

/// exp(flow_loglik) on a resolution x resolution grid of points.
inline DensityGrid export_density_grid(const FlowModel& f, const GridBounds& b, int resolution,
                                       const SolverConfig& cfg = {}) {
  if (resolution < 2) throw ConfigError("grid resolution must be >= 2");
  if (!(b.x_max > b.x_min) || !(b.y_max > b.y_min)) throw ConfigError("grid bounds must be increasing");
  DensityGrid g;
  g.xs = grid_axis(b.x_min, b.x_max, resolution);
  g.ys = grid_axis(b.y_min, b.y_max, resolution);
  g.density.resize(resolution, resolution);
  Vec p(2);
  for (int iy = 0; iy < resolution; ++iy)
    for (int ix = 0; ix < resolution; ++ix) {
      p << g.xs[static_cast<std::size_t>(ix)], g.ys[static_cast<std::size_t>(iy)];
      g.density(iy, ix) = std::exp(flow_loglik(f, p, cfg));
    }
  return g;
}

struct TransformField {
  std::vector<Vec> from, to;

  std::string csv() const {
    CsvWriter w({"x0", "y0", "xT", "yT"});
    for (std::size_t i = 0; i < from.size(); ++i) w.row({from[i](0), from[i](1), to[i](0), to[i](1)});
    return w.str();
  }
};

/// Grid points pushed through the flow from t = 0 to the horizon.
inline TransformField export_transform_field(const FlowModel& f, const GridBounds& b, int resolution,
                                             const SolverConfig& cfg = {}) {
  if (resolution < 2) throw ConfigError("grid resolution must be >= 2");
  TransformField out;
  const auto xs = grid_axis(b.x_min, b.x_max, resolution);
  const auto ys = grid_axis(b.y_min, b.y_max, resolution);
  const Mat sigma0 = f.base_sigma();
  for (double y : ys)
    for (double x : xs) {
      Vec p(2);
      p << x, y;
      out.from.push_back(p);
      out.to.push_back(flow_forward(f, p, sigma0, cfg).x);
    }
  return out;
}

// ---------------------------------------------------------------- training

/// Maximum likelihood over data points. Training uses taped RK4 at
/// `train_solver.step`; validation NLL uses `eval_solver`.
class FlowProblem {
public:
  FlowProblem(FlowModel& model, const std::vector<Vec>& train, const std::vector<Vec>& val, SolverConfig train_solver,
              SolverConfig eval_solver)
      : model_(model), train_(train), val_(val), train_solver_(train_solver), eval_solver_(eval_solver) {}

  Vec parameters() const { return model_.parameters(); }
  void set_parameters(const Vec& p) { model_.set_parameters(p); }
  std::size_t train_size() const { return train_.size(); }
  std::size_t val_size() const { return val_.size(); }
  double train_loss_grad(std::size_t i, Vec& g) { return flow_nll_grad(model_, train_[i], train_solver_, &g); }
  double val_loss(std::size_t i) { return -flow_loglik(model_, val_[i], eval_solver_); }

private:
  FlowModel& model_;
  const std::vector<Vec>& train_;
  const std::vector<Vec>& val_;
  SolverConfig train_solver_;
  SolverConfig eval_solver_;
};

}  // namespace upn
