#pragma once

// Mean-only neural ODE and its seed ensemble.

#include <cstdint>
#include <vector>

#include "upn/dynamics.hpp"
#include "upn/errors.hpp"
#include "upn/net.hpp"
#include "upn/ode.hpp"
#include "upn/training.hpp"

namespace upn {

struct DeterministicNode {
  MlpNet net;  // [x; t] -> n

  // Same layer dims and initialization stream as UpnModel::create's dynamics net.
  static DeterministicNode create(int n, const std::vector<int>& hidden, std::uint64_t seed) {
    detail::require_dims(n >= 1, "DeterministicNode: state dimension must be positive");
    std::vector<int> dims{n + 1};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(n);
    return {MlpNet::random(dims, derive_seed(seed, 0))};
  }

  int state_dim() const { return net.state_dim(); }
};

/// Mean trajectory at `times` (relative to x0 at t = 0, not included).
inline std::vector<Vec> node_predict(const DeterministicNode& node, const Vec& x0, const std::vector<double>& times,
                                     const SolverConfig& cfg) {
  std::vector<double> grid{0.0};
  grid.insert(grid.end(), times.begin(), times.end());
  const auto rhs = [&node](const Vec& x, double t) { return forward(node.net, x, t); };
  Solution sol = integrate(rhs, x0, grid, cfg);
  return {sol.states.begin() + 1, sol.states.end()};
}

/// Mean squared error over targets and dimensions; gradient via taped RK4.
inline double node_task_loss(const DeterministicNode& node, const ForecastTask& task, const SolverConfig& cfg,
                             Vec* grad) {
  const int n = node.state_dim();
  const std::vector<double> grid = task.grid();
  const double weight = 1.0 / (static_cast<double>(task.times.size()) * n);
  const auto rhs = [&node](const Vec& x, double t) { return forward(node.net, x, t); };
  SolverConfig rk = cfg;
  rk.method = Method::rk4_fixed;
  auto [sol, tape] = integrate_with_tape(rhs, task.mu0, grid, rk);
  double loss = 0.0;
  std::vector<Vec> cot(grid.size());
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const Vec r = sol.states[i] - task.targets[i - 1];
    loss += weight * r.squaredNorm();
    cot[i] = 2.0 * weight * r;
  }
  if (grad != nullptr) {
    grad->setZero(static_cast<Eigen::Index>(node.net.param_count()));
    const auto vjp = [&node](const Vec& x, double t, const Vec& a, double* g) {
      return GradTape::record(node.net, x, t, false).backward(node.net, a, nullptr, g);
    };
    tape.backward(vjp, cot, grad->data());
  }
  return loss;
}

class NodeProblem {
public:
  NodeProblem(DeterministicNode& node, const std::vector<ForecastTask>& train, const std::vector<ForecastTask>& val,
              SolverConfig solver)
      : node_(node), train_(train), val_(val), solver_(solver) {}

  Vec parameters() const { return node_.net.flatten(); }
  void set_parameters(const Vec& p) { node_.net.unflatten(p); }
  std::size_t train_size() const { return train_.size(); }
  std::size_t val_size() const { return val_.size(); }
  double train_loss_grad(std::size_t i, Vec& g) { return node_task_loss(node_, train_[i], solver_, &g); }
  double val_loss(std::size_t i) { return node_task_loss(node_, val_[i], solver_, nullptr); }

private:
  DeterministicNode& node_;
  const std::vector<ForecastTask>& train_;
  const std::vector<ForecastTask>& val_;
  SolverConfig solver_;
};

struct EnsembleNode {
  std::vector<DeterministicNode> members;

  static EnsembleNode create(int n, const std::vector<int>& hidden, int size, std::uint64_t seed) {
    if (size < 2) throw ConfigError("ensemble size must be >= 2");
    EnsembleNode e;
    for (int k = 0; k < size; ++k) e.members.push_back(DeterministicNode::create(n, hidden, member_seed(seed, k)));
    return e;
  }

  static std::uint64_t member_seed(std::uint64_t seed, int k) {
    return derive_seed(seed, 1000 + static_cast<std::uint64_t>(k));
  }
};

struct EnsemblePrediction {
  std::vector<Vec> mean;
  std::vector<Vec> variance;  // unbiased sample variance per dimension
};

/// Pointwise mean and unbiased sample variance of member trajectories.
inline EnsemblePrediction ensemble_moments(const std::vector<std::vector<Vec>>& member_paths) {
  if (member_paths.size() < 2) throw ConfigError("ensemble_predict: need at least 2 members");
  const std::size_t steps = member_paths.front().size();
  const double m = static_cast<double>(member_paths.size());
  EnsemblePrediction out;
  for (std::size_t s = 0; s < steps; ++s) {
    Vec mean = Vec::Zero(member_paths.front()[s].size());
    for (const auto& p : member_paths) {
      detail::require_dims(p.size() == steps && p[s].size() == mean.size(), "ensemble_predict: member shape mismatch");
      mean += p[s];
    }
    mean /= m;
    Vec var = Vec::Zero(mean.size());
    for (const auto& p : member_paths) var += (p[s] - mean).cwiseAbs2();
    var /= (m - 1.0);
    out.mean.push_back(std::move(mean));
    out.variance.push_back(std::move(var));
  }
  return out;
}

inline EnsemblePrediction ensemble_predict(const EnsembleNode& ens, const Vec& x0, const std::vector<double>& times,
                                           const SolverConfig& cfg) {
  std::vector<std::vector<Vec>> paths;
  for (const auto& m : ens.members) paths.push_back(node_predict(m, x0, times, cfg));
  return ensemble_moments(paths);
}

}  // namespace upn
