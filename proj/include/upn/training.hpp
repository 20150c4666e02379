#pragma once

// Gaussian NLL, forecast losses with two gradient engines (backprop through
// taped RK4, or the continuous adjoint), Adam, and a generic training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/io.hpp"
#include "upn/linalg.hpp"
#include "upn/ode.hpp"

namespace upn {

inline constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 ln(2 pi)

/// 0.5 [(y-mu)^T Sigma^-1 (y-mu) + ln det Sigma + n ln 2 pi]. Adds `floor` I
/// once if Sigma is not numerically positive definite.
inline double gaussian_nll(const Vec& y, const Vec& mu, const Mat& sigma, Vec* mu_bar = nullptr,
                           Mat* sigma_bar = nullptr, double floor = 1e-9) {
  const auto n = y.size();
  detail::require_dims(mu.size() == n && sigma.rows() == n && sigma.cols() == n, "gaussian_nll: dimension mismatch");
  Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success || llt.matrixL().toDenseMatrix().diagonal().minCoeff() <= 0.0) {
    llt.compute(sigma + floor * Mat::Identity(n, n));
    if (llt.info() != Eigen::Success) throw NumericalError("gaussian_nll: covariance is not positive definite");
  }
  const Vec d = y - mu;
  const Vec w = llt.solve(d);
  const Mat l = llt.matrixL();
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet += 2.0 * std::log(l(i, i));
  if (mu_bar != nullptr) *mu_bar = -w;
  if (sigma_bar != nullptr) {
    const Mat inv = llt.solve(Mat::Identity(n, n));
    *sigma_bar = 0.5 * (inv - w * w.transpose());
  }
  return 0.5 * (d.dot(w) + logdet) + static_cast<double>(n) * kHalfLog2Pi;
}

/// Diagonal-covariance special case; `var_bar` receives dL/d var.
inline double gaussian_nll_diag(const Vec& y, const Vec& mu, const Vec& var, Vec* mu_bar = nullptr,
                                Vec* var_bar = nullptr) {
  const auto n = y.size();
  detail::require_dims(mu.size() == n && var.size() == n, "gaussian_nll_diag: dimension mismatch");
  double out = 0.0;
  if (mu_bar != nullptr) mu_bar->resize(n);
  if (var_bar != nullptr) var_bar->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = var(i);
    if (!(v > 0.0) || !std::isfinite(v)) throw NumericalError("gaussian_nll_diag: variance is not positive");
    const double d = y(i) - mu(i);
    out += 0.5 * (d * d / v + std::log(v)) + kHalfLog2Pi;
    if (mu_bar != nullptr) (*mu_bar)(i) = -d / v;
    if (var_bar != nullptr) (*var_bar)(i) = 0.5 * (1.0 / v - d * d / (v * v));
  }
  return out;
}

enum class GradMode { unrolled, adjoint };

inline std::string to_string(GradMode g) { return g == GradMode::unrolled ? "unrolled" : "adjoint"; }

inline GradMode grad_mode_from_string(const std::string& s) {
  if (s == "unrolled") return GradMode::unrolled;
  if (s == "adjoint") return GradMode::adjoint;
  throw ConfigError("unknown grad_mode '" + s + "' (expected unrolled|adjoint)");
}

/// One forecasting problem: start from the last history observation at
/// t = 0 and predict the targets at the given (positive, ascending) times.
struct ForecastTask {
  Vec mu0;
  std::vector<double> times;
  std::vector<Vec> targets;

  std::vector<double> grid() const {
    std::vector<double> g{0.0};
    g.insert(g.end(), times.begin(), times.end());
    return g;
  }
};

struct AdjointResult {
  Vec dz0;
  Vec grad;
};

/// Integrates the adjoint system backward over `times`, adding the jump
/// `cotangents[k]` at every output time. The forward state is read from the
/// dense trajectory; parameter gradients accumulate as quadratures.
template <OdeVjp G>
AdjointResult adjoint_backward(const G& vjp, std::size_t param_count, const DenseTrajectory& path,
                               std::span<const double> times, const std::vector<Vec>& cotangents,
                               const SolverConfig& cfg) {
  detail::require_dims(cotangents.size() == times.size(), "adjoint_backward: one cotangent per output time");
  const Eigen::Index dim = path.at(times.front()).size();
  const auto np = static_cast<Eigen::Index>(param_count);
  Vec w = Vec::Zero(dim + np);
  auto add = [&](std::size_t k) {
    if (cotangents[k].size() != 0) {
      detail::require_dims(cotangents[k].size() == dim, "adjoint_backward: cotangent length mismatch");
      w.head(dim) += cotangents[k];
    }
  };
  // reversed time u = -t, so both da/du and dg/du are plain VJPs
  const auto rhs = [&](const Vec& state, double u) -> Vec {
    const double t = -u;
    Vec out(state.size());
    Vec g = Vec::Zero(np);
    out.head(dim) = vjp(path.at(t), t, Vec(state.head(dim)), np > 0 ? g.data() : nullptr);
    out.tail(np) = g;
    return out;
  };
  SolverConfig back = cfg;
  back.method = Method::dopri45;
  for (std::size_t k = times.size() - 1; k > 0; --k) {
    add(k);
    const std::vector<double> span{-times[k], -times[k - 1]};
    if (w.head(dim).isZero(0.0)) continue;  // nothing to transport on this segment
    w = integrate(rhs, w, span, back).states.back();
  }
  add(0);
  return {w.head(dim), w.tail(np)};
}

namespace detail {

inline Vec initial_packed(const UpnModel& model, const Vec& mu0) {
  const int n = model.state_dim;
  detail::require_dims(mu0.size() == n, "forecast: initial mean has wrong length");
  const double s0 = std::exp(2.0 * model.init_log_scale);
  return pack(GaussianState{mu0, SymMatrix(s0 * Mat::Identity(n, n)), 0.0}, model.cov_mode);
}

// Loss contribution of one packed state and its cotangent.
inline double packed_nll(const UpnModel& model, const Vec& z, const Vec& y, double weight, Vec* z_bar) {
  const int n = model.state_dim;
  Vec mb;
  if (model.cov_mode == CovMode::diagonal) {
    Vec vb;
    const double l = gaussian_nll_diag(y, z.head(n), z.tail(n), z_bar ? &mb : nullptr, z_bar ? &vb : nullptr);
    if (z_bar != nullptr) {
      z_bar->resize(z.size());
      z_bar->head(n) = weight * mb;
      z_bar->tail(n) = weight * vb;
    }
    return weight * l;
  }
  Mat sb;
  const double l = gaussian_nll(y, z.head(n), unvech_matrix(z.tail(triangular_number(n)), n),
                                z_bar ? &mb : nullptr, z_bar ? &sb : nullptr, model.psd_floor);
  if (z_bar != nullptr) {
    z_bar->resize(z.size());
    z_bar->head(n) = weight * mb;
    z_bar->tail(triangular_number(n)) = weight * vech_gradient(sb, n);
  }
  return weight * l;
}

// d loss / d init_log_scale from the cotangent of the initial packed state.
inline double init_scale_grad(const UpnModel& model, const Vec& dz0) {
  const int n = model.state_dim;
  const double ds = 2.0 * std::exp(2.0 * model.init_log_scale);
  double g = 0.0;
  for (int i = 0; i < n; ++i)
    g += dz0(n + (model.cov_mode == CovMode::full ? vech_index(i, i) : i)) * ds;
  return g;
}

}  // namespace detail

/// Mean over targets of gaussian_nll / n for one forecast task. When `grad`
/// is given it receives the gradient in UpnModel::parameters() layout.
/// Unrolled mode forces fixed-step RK4; adjoint mode forces dopri45.
inline double upn_task_loss(const UpnModel& model, const ForecastTask& task, const SolverConfig& cfg, GradMode mode,
                            Vec* grad) {
  detail::require_dims(task.times.size() == task.targets.size() && !task.times.empty(),
                       "upn_task_loss: one target per time");
  const Vec z0 = detail::initial_packed(model, task.mu0);
  const std::vector<double> grid = task.grid();
  const auto rhs = [&model](const Vec& z, double t) { return upn_rhs(model, z, t); };
  const auto vjp = [&model](const Vec& z, double t, const Vec& a, double* g) { return upn_rhs_vjp(model, z, t, a, g); };
  const double weight = 1.0 / (static_cast<double>(task.times.size()) * model.state_dim);
  const auto np = static_cast<Eigen::Index>(model.dynamics_param_count() + model.noise_param_count());
  double loss = 0.0;
  std::vector<Vec> cot(grid.size());
  auto accumulate = [&](const Solution& sol) {
    for (std::size_t i = 1; i < grid.size(); ++i)
      loss += detail::packed_nll(model, sol.states[i], task.targets[i - 1], weight, grad ? &cot[i] : nullptr);
  };
  if (mode == GradMode::unrolled) {
    SolverConfig rk = cfg;
    rk.method = Method::rk4_fixed;
    if (grad == nullptr) {
      accumulate(integrate(rhs, z0, grid, rk));
      return loss;
    }
    auto [sol, tape] = integrate_with_tape(rhs, z0, grid, rk);
    accumulate(sol);
    grad->setZero(static_cast<Eigen::Index>(model.param_count()));
    const Vec dz0 = tape.backward(vjp, cot, grad->data());
    (*grad)(np) = detail::init_scale_grad(model, dz0);
    return loss;
  }
  SolverConfig dp = cfg;
  dp.method = Method::dopri45;
  if (grad == nullptr) {
    accumulate(integrate(rhs, z0, grid, dp));
    return loss;
  }
  auto [sol, dense] = integrate_dense(rhs, z0, grid, dp);
  accumulate(sol);
  const AdjointResult adj = adjoint_backward(vjp, static_cast<std::size_t>(np), dense, grid, cot, dp);
  grad->resize(static_cast<Eigen::Index>(model.param_count()));
  grad->head(np) = adj.grad;
  (*grad)(np) = detail::init_scale_grad(model, adj.dz0);
  return loss;
}

/// Predicted Gaussian states at the task times (covariance PSD-repaired).
inline std::vector<GaussianState> upn_forecast(const UpnModel& model, const Vec& mu0, const std::vector<double>& times,
                                               const SolverConfig& cfg) {
  std::vector<double> grid{0.0};
  grid.insert(grid.end(), times.begin(), times.end());
  const auto rhs = [&model](const Vec& z, double t) { return upn_rhs(model, z, t); };
  const Solution sol = integrate(rhs, detail::initial_packed(model, mu0), grid, cfg);
  std::vector<GaussianState> out;
  out.reserve(times.size());
  for (std::size_t i = 1; i < grid.size(); ++i) {
    GaussianState s = unpack(sol.states[i], model.state_dim, model.cov_mode, grid[i]);
    s.sigma = psd_repair(s.sigma, model.psd_floor);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- Adam

struct AdamState {
  Vec m, v;
  long long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One Adam update in place. Returns false (and leaves everything untouched)
/// when the gradient has non-finite entries.
inline bool adam_step(Vec& params, const Vec& grads, AdamState& st, double lr) {
  detail::require_dims(grads.size() == params.size(), "adam_step: gradient length mismatch");
  if (!grads.allFinite()) return false;
  if (st.m.size() != params.size()) {
    st.m = Vec::Zero(params.size());
    st.v = Vec::Zero(params.size());
    st.step = 0;
  }
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grads;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (Eigen::Index i = 0; i < params.size(); ++i)
    params(i) -= lr * (st.m(i) / c1) / (std::sqrt(st.v(i) / c2) + st.eps);
  return true;
}

// ---------------------------------------------------------------- training loop

struct TrainConfig {
  double lr = 1e-3;
  int epochs = 100;
  int batch_size = 16;
  GradMode grad_mode = GradMode::unrolled;
  int early_stop_patience = 10;  // 0 disables
  std::uint64_t seed = 0;
  double grad_clip = 0.0;     // global-norm clip, 0 = none
  int windows_per_epoch = 0;  // random subset of training items per epoch, 0 = all
  int val_windows = 0;        // fixed evenly spaced validation subset, 0 = all
  bool record_time = false;   // wall-clock seconds make reports non-reproducible

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (early_stop_patience < 0) throw ConfigError("train.early_stop_patience must be >= 0");
    if (grad_clip < 0.0) throw ConfigError("train.grad_clip must be >= 0");
    if (windows_per_epoch < 0 || val_windows < 0) throw ConfigError("train: window caps must be >= 0");
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 0 = initial parameters
  double best_val_loss = 0.0;
  bool stopped_early = false;
  std::size_t skipped_steps = 0;
  std::string checkpoint;

  std::string to_csv() const {
    CsvWriter w({"epoch", "train_loss", "val_loss", "seconds"});
    for (const auto& e : epochs) w.row({static_cast<double>(e.epoch), e.train_loss, e.val_loss, e.seconds});
    return w.str();
  }
};

// A trainable problem: flat parameters plus per-item losses.
template <class P>
concept TrainProblem = requires(P& p, const P& cp, const Vec& v, Vec& g, std::size_t i) {
  { cp.parameters() } -> std::convertible_to<Vec>;
  p.set_parameters(v);
  { cp.train_size() } -> std::convertible_to<std::size_t>;
  { cp.val_size() } -> std::convertible_to<std::size_t>;
  { p.train_loss_grad(i, g) } -> std::convertible_to<double>;
  { p.val_loss(i) } -> std::convertible_to<double>;
};

namespace detail {

inline std::vector<std::size_t> evenly_spaced(std::size_t total, std::size_t count) {
  std::vector<std::size_t> idx;
  if (count == 0 || count >= total) {
    idx.resize(total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  for (std::size_t k = 0; k < count; ++k) idx.push_back(k * total / count);
  return idx;
}

}  // namespace detail

/// Mean validation loss over the fixed validation subset.
template <TrainProblem P>
double validation_loss(P& problem, const std::vector<std::size_t>& idx) {
  double s = 0.0;
  for (std::size_t j : idx) s += problem.val_loss(j);
  return idx.empty() ? 0.0 : s / static_cast<double>(idx.size());
}

/// Minibatch Adam with per-epoch shuffling, optional gradient clipping and
/// early stopping on validation loss (training loss when there is no
/// validation data). The best parameters are restored at the end.
/// `on_epoch` sees each finished epoch with the current parameters in place.
template <TrainProblem P>
TrainReport fit(P& problem, const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  TrainReport report;
  if (cfg.epochs == 0 || problem.train_size() == 0) return report;
  std::mt19937_64 gen(derive_seed(cfg.seed, 101));
  const auto val_idx = detail::evenly_spaced(problem.val_size(), static_cast<std::size_t>(cfg.val_windows));
  const bool has_val = !val_idx.empty();
  Vec params = problem.parameters();
  Vec best = params;
  AdamState adam;
  double best_loss = has_val ? validation_loss(problem, val_idx) : std::numeric_limits<double>::infinity();
  if (!std::isfinite(best_loss)) throw NumericalError("fit: initial validation loss is not finite");
  report.best_val_loss = best_loss;
  int since_best = 0;
  std::vector<std::size_t> order(problem.train_size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto t_start = std::chrono::steady_clock::now();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), gen);
    std::size_t used = order.size();
    if (cfg.windows_per_epoch > 0) used = std::min(used, static_cast<std::size_t>(cfg.windows_per_epoch));
    double epoch_loss = 0.0;
    Vec grad(params.size()), item(params.size());
    for (std::size_t b0 = 0, batch = 0; b0 < used; b0 += static_cast<std::size_t>(cfg.batch_size), ++batch) {
      const std::size_t b1 = std::min(used, b0 + static_cast<std::size_t>(cfg.batch_size));
      grad.setZero();
      double batch_loss = 0.0;
      for (std::size_t k = b0; k < b1; ++k) {
        item.setZero();
        double l = 0.0;
        try {
          l = problem.train_loss_grad(order[k], item);
        } catch (const NumericalError& e) {
          throw NumericalError("fit: epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) +
                               ", item " + std::to_string(order[k]) + ": " + e.what());
        }
        if (!std::isfinite(l))
          throw NumericalError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(batch) + ", item " + std::to_string(order[k]));
        batch_loss += l;
        grad += item;
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      grad *= inv;
      epoch_loss += batch_loss;
      if (cfg.grad_clip > 0.0) {
        const double norm = grad.norm();
        if (norm > cfg.grad_clip) grad *= cfg.grad_clip / norm;
      }
      if (!adam_step(params, grad, adam, cfg.lr)) {
        ++report.skipped_steps;
        continue;
      }
      problem.set_parameters(params);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(used);
    rec.val_loss = has_val ? validation_loss(problem, val_idx) : rec.train_loss;
    if (!std::isfinite(rec.val_loss))
      throw NumericalError("fit: non-finite validation loss at epoch " + std::to_string(epoch));
    if (cfg.record_time)
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.val_loss < best_loss) {
      best_loss = rec.val_loss;
      best = params;
      report.best_epoch = epoch;
      report.best_val_loss = best_loss;
      since_best = 0;
    } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
      report.stopped_early = true;
      break;
    }
  }
  problem.set_parameters(best);
  return report;
}

/// UPN forecasting problem over fixed task lists.
class UpnProblem {
public:
  UpnProblem(UpnModel& model, const std::vector<ForecastTask>& train, const std::vector<ForecastTask>& val,
             SolverConfig solver, GradMode mode)
      : model_(model), train_(train), val_(val), solver_(solver), mode_(mode) {}

  Vec parameters() const { return model_.parameters(); }
  void set_parameters(const Vec& p) { model_.set_parameters(p); }
  std::size_t train_size() const { return train_.size(); }
  std::size_t val_size() const { return val_.size(); }
  double train_loss_grad(std::size_t i, Vec& g) { return upn_task_loss(model_, train_[i], solver_, mode_, &g); }
  double val_loss(std::size_t i) { return upn_task_loss(model_, val_[i], solver_, GradMode::unrolled, nullptr); }

private:
  UpnModel& model_;
  const std::vector<ForecastTask>& train_;
  const std::vector<ForecastTask>& val_;
  SolverConfig solver_;
  GradMode mode_;
};

}  // namespace upn
