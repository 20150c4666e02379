#include <gtest/gtest.h>

#include "test_util.hpp"
#include "upn/baselines.hpp"

namespace upn {
namespace {

using testing::coupled_linear_a;
using testing::expm;
using testing::random_vector;

DeterministicNode linear_node(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  DeterministicNode node{MlpNet({n + 1, n}, {Activation::identity})};
  node.net.weight(0).leftCols(n) = a;
  return node;
}

SolverConfig tight() {
  SolverConfig c;
  c.rtol = 1e-10;
  c.atol = 1e-12;
  return c;
}

TEST(Node, ZeroNetKeepsInitialState) {
  DeterministicNode node = DeterministicNode::create(2, {16}, 1);
  node.net.unflatten(Vec::Zero(static_cast<Eigen::Index>(node.net.param_count())));
  Vec x0(2);
  x0 << 0.3, -1.2;
  for (const Vec& x : node_predict(node, x0, {0.5, 1.0, 3.0}, {})) EXPECT_EQ(x, x0);
}

TEST(Node, LinearNetMatchesMatrixExponential) {
  const Mat a = coupled_linear_a();
  const DeterministicNode node = linear_node(a);
  Vec x0(2);
  x0 << 1.0, 0.5;
  const std::vector<double> times{0.5, 2.0, 10.0};
  const auto path = node_predict(node, x0, times, tight());
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_LT((path[i] - expm(a * times[i]) * x0).norm(), 1e-7);
}

TEST(Node, CreateMatchesUpnDynamicsNet) {
  const DeterministicNode node = DeterministicNode::create(3, {32, 32}, 17);
  const UpnModel m = UpnModel::create(3, {32, 32}, CovMode::full, 17);
  EXPECT_EQ(node.net.flatten(), m.dynamics.flatten());
}

TEST(Node, MeanAgreesWithUpnMean) {
  const UpnModel m = UpnModel::create(2, {16}, CovMode::full, 4);
  const DeterministicNode node = DeterministicNode::create(2, {16}, 4);
  Vec x0(2);
  x0 << 0.7, -0.4;
  const std::vector<double> times{0.25, 1.0, 2.0};
  const auto upn = upn_forecast(m, x0, times, tight());
  const auto det = node_predict(node, x0, times, tight());
  for (std::size_t i = 0; i < times.size(); ++i) EXPECT_LT((upn[i].mu - det[i]).norm(), 1e-7);
}

TEST(Node, TaskLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(6);
  DeterministicNode node = DeterministicNode::create(2, {8}, 2);
  ForecastTask task;
  task.mu0 = random_vector(2, gen);
  for (int k = 1; k <= 5; ++k) {
    task.times.push_back(0.1 * k);
    task.targets.push_back(random_vector(2, gen));
  }
  SolverConfig cfg;
  cfg.step = 0.05;
  Vec g;
  const double loss = node_task_loss(node, task, cfg, &g);
  EXPECT_GT(loss, 0.0);
  const Vec p0 = node.net.flatten();
  const Vec fd = testing::fd_gradient(
      [&](const Vec& p) {
        node.net.unflatten(p);
        return node_task_loss(node, task, cfg, nullptr);
      },
      p0, 1e-6);
  node.net.unflatten(p0);
  EXPECT_LT(testing::rel_error(g, fd), 1e-6);
}

TEST(Node, TrainingReducesLoss) {
  const Mat a = coupled_linear_a();
  std::mt19937_64 gen(9);
  std::vector<ForecastTask> tasks;
  for (int k = 0; k < 24; ++k) {
    ForecastTask t;
    t.mu0 = random_vector(2, gen);
    for (int s = 1; s <= 10; ++s) {
      t.times.push_back(0.1 * s);
      t.targets.push_back(expm(a * t.times.back()) * t.mu0);
    }
    tasks.push_back(t);
  }
  const std::vector<ForecastTask> train(tasks.begin(), tasks.begin() + 16), val(tasks.begin() + 16, tasks.end());
  DeterministicNode node = DeterministicNode::create(2, {16}, 3);
  SolverConfig solver;
  solver.method = Method::rk4_fixed;
  NodeProblem prob(node, train, val, solver);
  double before = 0.0;
  for (std::size_t i = 0; i < val.size(); ++i) before += prob.val_loss(i);
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.epochs = 30;
  cfg.batch_size = 4;
  const TrainReport r = fit(prob, cfg);
  EXPECT_LT(r.best_val_loss, 0.5 * before / val.size());
}

TEST(Ensemble, MomentsHandExample) {
  Vec a(1), b(1), c(1);
  a << 1.0;
  b << 3.0;
  c << 5.0;
  const auto e = ensemble_moments({{a}, {b}, {c}});
  EXPECT_DOUBLE_EQ(e.mean[0](0), 3.0);
  EXPECT_DOUBLE_EQ(e.variance[0](0), 4.0);
  EXPECT_THROW(ensemble_moments({{a}}), ConfigError);
}

TEST(Ensemble, MembersDifferAndAreReproducible) {
  EXPECT_THROW(EnsembleNode::create(2, {8}, 1, 0), ConfigError);
  const EnsembleNode e = EnsembleNode::create(2, {8}, 3, 5);
  const EnsembleNode f = EnsembleNode::create(2, {8}, 3, 5);
  EXPECT_NE(e.members[0].net.flatten(), e.members[1].net.flatten());
  EXPECT_EQ(e.members[2].net.flatten(), f.members[2].net.flatten());
  Vec x0(2);
  x0 << 0.5, 0.5;
  const auto p = ensemble_predict(e, x0, {0.5, 1.0}, {});
  ASSERT_EQ(p.mean.size(), 2u);
  EXPECT_GT(p.variance[1].minCoeff(), 0.0);
}

TEST(Ensemble, IdenticalMembersHaveZeroVariance) {
  EnsembleNode e = EnsembleNode::create(2, {8}, 3, 5);
  for (auto& m : e.members) m.net = e.members.front().net;
  const auto p = ensemble_predict(e, Vec::Ones(2), {0.1, 0.5, 1.0}, {});
  const auto single = node_predict(e.members.front(), Vec::Ones(2), {0.1, 0.5, 1.0}, {});
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(p.variance[s], Vec::Zero(2));
    EXPECT_LT((p.mean[s] - single[s]).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Ensemble, VarianceMatchesTwoPassLoop) {
  std::mt19937_64 gen(21);
  std::vector<std::vector<Vec>> paths(6, std::vector<Vec>(4));
  for (auto& p : paths)
    for (auto& v : p) v = random_vector(3, gen, 2.0);
  const auto got = ensemble_moments(paths);
  for (std::size_t s = 0; s < 4; ++s)
    for (int i = 0; i < 3; ++i) {
      double mean = 0.0;
      for (const auto& p : paths) mean += p[s](i);
      mean /= 6.0;
      double ss = 0.0;
      for (const auto& p : paths) ss += (p[s](i) - mean) * (p[s](i) - mean);
      EXPECT_NEAR(got.mean[s](i), mean, 1e-14);
      EXPECT_NEAR(got.variance[s](i), ss / 5.0, 1e-13);
    }
}

}  // namespace
}  // namespace upn
