#include <gtest/gtest.h>

#include "test_util.hpp"
#include "upn/dynamics.hpp"
#include "upn/ode.hpp"

namespace upn {
namespace {

using testing::coupled_linear_a;
using testing::rel_error;

UpnModel zero_noise_model(int n, double eps) {
  UpnModel m = UpnModel::create(n, {8}, CovMode::full, 1);
  m.noise = MlpNet({n + 1, triangular_number(n)}, {Activation::identity});
  m.eps_noise = eps;
  return m;
}

TEST(ProcessNoise, ZeroOutputGivesEpsIdentity) {
  const UpnModel m = zero_noise_model(3, 1e-4);
  EXPECT_EQ(process_noise(m, Vec::Ones(3), 0.5).matrix(), 1e-4 * Mat::Identity(3, 3));
}

TEST(ProcessNoise, HandMultiplication) {
  UpnModel m = UpnModel::create(2, {4}, CovMode::full, 1);
  m.eps_noise = 1e-300;
  const Mat q = process_noise_matrix(m, (Vec(3) << 1.0, 2.0, 3.0).finished());
  EXPECT_NEAR(q(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(q(1, 0), 2.0, 1e-15);
  EXPECT_NEAR(q(0, 1), 2.0, 1e-15);
  EXPECT_NEAR(q(1, 1), 13.0, 1e-15);
}

TEST(ProcessNoise, EigenvalueFloor) {
  std::mt19937_64 gen(2);
  for (CovMode mode : {CovMode::full, CovMode::diagonal}) {
    for (int rep = 0; rep < 30; ++rep) {
      UpnModel m = UpnModel::create(3, {16}, mode, gen());
      m.eps_noise = 1e-3;
      const SymMatrix q = process_noise(m, testing::random_vector(3, gen, 2.0), 0.3 * rep);
      Eigen::SelfAdjointEigenSolver<Mat> es(q.matrix());
      EXPECT_GE(es.eigenvalues().minCoeff(), 1e-3 * (1 - 1e-9));
    }
  }
}

TEST(ProcessNoise, InitialNoiseIsSmall) {
  for (CovMode mode : {CovMode::full, CovMode::diagonal}) {
    const UpnModel m = UpnModel::create(2, {32}, mode, 11);
    const Mat q = process_noise(m, Vec::Zero(2), 0.0).matrix();
    EXPECT_LT(q.cwiseAbs().maxCoeff(), 0.05);
    EXPECT_GT(q.diagonal().minCoeff(), 1e-3);
  }
}

TEST(CovarianceRhs, PureNoiseGrowth) {
  std::mt19937_64 gen(3);
  const SymMatrix sigma(testing::random_spd(2, gen));
  EXPECT_EQ(covariance_rhs(Mat::Zero(2, 2), sigma, SymMatrix::identity(2)).matrix(), Mat::Identity(2, 2));
}

TEST(CovarianceRhs, CoupledLinearSystem) {
  const Mat expected = (Mat(2, 2) << -0.2, 0.0, 0.0, -0.2).finished();
  EXPECT_LT((covariance_rhs(coupled_linear_a(), SymMatrix::identity(2), SymMatrix::zero(2)).matrix() - expected)
                .cwiseAbs()
                .maxCoeff(),
            1e-15);
}

TEST(CovarianceRhs, ScalarJacobianCommutes) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int rep = 0; rep < 20; ++rep) {
    const double a = u(gen);
    const Mat s = testing::random_spd(3, gen), q = testing::random_spd(3, gen);
    const Mat got = covariance_rhs(a * Mat::Identity(3, 3), SymMatrix(s), SymMatrix(q)).matrix();
    EXPECT_LT((got - (2 * a * s + q)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(CovarianceRhs, DimensionMismatch) {
  EXPECT_THROW(covariance_rhs(Mat::Zero(2, 2), SymMatrix::identity(3), SymMatrix::identity(3)), DimensionError);
}

TEST(UpnRhs, LinearClosedForm) {
  const Mat a = coupled_linear_a();
  const double eps = 1e-3;
  const UpnModel m = testing::linear_upn(a, Mat::Zero(2, 2), eps);
  const Vec mu = (Vec(2) << 0.7, -1.2).finished();
  const Vec z = pack(GaussianState{mu, SymMatrix::identity(2), 0.0}, CovMode::full);
  const Vec dz = upn_rhs(m, z, 0.0);
  EXPECT_LT((dz.head(2) - a * mu).cwiseAbs().maxCoeff(), 1e-15);
  const Mat expected = a + a.transpose() + eps * Mat::Identity(2, 2);
  EXPECT_LT((dz.tail(3) - vech(expected).data).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(UpnRhs, ZeroCovarianceZeroNoise) {
  const UpnModel m = zero_noise_model(3, 1e-5);
  const Vec z = pack(GaussianState{Vec::Ones(3), SymMatrix::zero(3), 0.0}, CovMode::full);
  EXPECT_EQ(upn_rhs(m, z, 0.0).tail(6), vech(1e-5 * Mat::Identity(3, 3)).data);
}

TEST(UpnRhs, MatchesExplicitDuplicationPinv) {
  std::mt19937_64 gen(5);
  for (int n = 2; n <= 4; ++n) {
    const DuplicationPinv dp = duplication_pinv(n);
    for (int rep = 0; rep < 10; ++rep) {
      const UpnModel m = UpnModel::create(n, {16}, CovMode::full, gen());
      const Vec mu = testing::random_vector(n, gen);
      const Mat sigma = testing::random_spd(n, gen);
      const Vec z = pack(GaussianState{mu, SymMatrix(sigma), 0.0}, CovMode::full);
      const Mat j = input_jacobian(m.dynamics, mu, 0.4);
      const Mat q = process_noise(m, mu, 0.4).matrix();
      const Vec via_dp = dp.matrix * vec(j * sigma + sigma * j.transpose() + q);
      EXPECT_LT((upn_rhs(m, z, 0.4).tail(triangular_number(n)) - via_dp).cwiseAbs().maxCoeff(),
                tolerance::duplication);
    }
  }
}

TEST(UpnRhs, CovariancePartIsSymmetricByConstruction) {
  std::mt19937_64 gen(6);
  const UpnModel m = UpnModel::create(3, {8}, CovMode::full, 3);
  const Vec z = pack(GaussianState{Vec::Ones(3), SymMatrix(testing::random_spd(3, gen)), 0.0}, CovMode::full);
  const SymMatrix ds = unvech(Vec(upn_rhs(m, z, 0.0).tail(6)));
  EXPECT_EQ(ds.matrix(), ds.matrix().transpose());
}

TEST(UpnRhs, NonFiniteInputIsNumericalError) {
  const UpnModel m = UpnModel::create(2, {8}, CovMode::full, 3);
  Vec z = Vec::Ones(5);
  z(3) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(upn_rhs(m, z, 0.0), NumericalError);
  EXPECT_THROW(upn_rhs(m, Vec::Ones(4), 0.0), DimensionError);
}

TEST(UpnRhs, DiagonalModeAgreesWithFullWhenDiagonal) {
  const Mat a = (Mat(2, 2) << -0.3, 0.0, 0.0, 0.2).finished();
  UpnModel full = testing::linear_upn(a, (Mat(2, 2) << 0.4, 0.0, 0.0, 0.7).finished(), 1e-4);
  UpnModel diag = full;
  diag.cov_mode = CovMode::diagonal;
  diag.noise = MlpNet({3, 2}, {Activation::identity});
  // softplus(raw) = L_ii
  diag.noise.bias(0) << std::log(std::expm1(0.4)), std::log(std::expm1(0.7));
  const Vec mu = (Vec(2) << 1.0, 2.0).finished();
  const SymMatrix sigma = SymMatrix::diagonal((Vec(2) << 0.5, 1.5).finished());
  const Vec df = upn_rhs(full, pack(GaussianState{mu, sigma, 0}, CovMode::full), 0.0);
  const Vec dd = upn_rhs(diag, pack(GaussianState{mu, sigma, 0}, CovMode::diagonal), 0.0);
  EXPECT_EQ(df.head(2), dd.head(2));
  EXPECT_NEAR(df(2), dd(2), 1e-15);
  EXPECT_EQ(df(3), 0.0);
  EXPECT_NEAR(df(4), dd(3), 1e-15);
}

TEST(UpnRhsVjp, MatchesFiniteDifferences) {
  std::mt19937_64 gen(7);
  const double h = 1e-6;
  for (CovMode mode : {CovMode::full, CovMode::diagonal}) {
    for (int n = 1; n <= 3; ++n) {
      for (int rep = 0; rep < 5; ++rep) {
        UpnModel m = UpnModel::create(n, {8, 8}, mode, gen());
        m.noise_gain = 0.7;
        const Vec mu = testing::random_vector(n, gen);
        const GaussianState s{mu, SymMatrix(testing::random_spd(n, gen)), 0.0};
        const Vec z = pack(s, mode);
        const Vec a = testing::random_vector(static_cast<int>(z.size()), gen);
        const double t = 0.3;
        const auto np = static_cast<Eigen::Index>(m.dynamics_param_count() + m.noise_param_count());
        Vec grad = Vec::Zero(np);
        const Vec zb = upn_rhs_vjp(m, z, t, a, grad.data());
        const Vec fd_z = testing::fd_gradient([&](const Vec& zz) { return a.dot(upn_rhs(m, zz, t)); }, z, h);
        const Vec p0 = m.parameters();
        const Vec fd_p = testing::fd_gradient(
            [&](const Vec& p) {
              UpnModel mm = m;
              Vec full = p0;
              full.head(np) = p;
              mm.set_parameters(full);
              return a.dot(upn_rhs(mm, z, t));
            },
            Vec(p0.head(np)), h);
        EXPECT_LT(rel_error(zb, fd_z), 1e-5) << to_string(mode) << " n=" << n;
        EXPECT_LT(rel_error(grad, fd_p), 1e-5) << to_string(mode) << " n=" << n;
      }
    }
  }
}

// Differential Lyapunov equation: integrated covariance vs the closed form.
TEST(Lyapunov, LinearCovarianceMatchesClosedForm) {
  const Mat a = coupled_linear_a();
  const Mat l = (Mat(2, 2) << 0.3, 0.0, 0.1, 0.2).finished();
  const double eps = 1e-4;
  const UpnModel m = testing::linear_upn(a, l, eps);
  const Mat q = l * l.transpose() + eps * Mat::Identity(2, 2);
  const Mat s0 = (Mat(2, 2) << 0.5, 0.1, 0.1, 0.3).finished();
  const std::vector<double> times = linspace(0.0, 5.0, 26);
  SolverConfig cfg;
  cfg.rtol = 1e-10;
  cfg.atol = 1e-12;
  const auto rhs = [&](const Vec& z, double t) { return upn_rhs(m, z, t); };
  const Solution sol = integrate(rhs, pack(GaussianState{Vec::Ones(2), SymMatrix(s0), 0.0}, CovMode::full), times, cfg);
  double worst = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const Mat expected = testing::lyapunov_solution(a, s0, q, times[i]);
    const Mat got = unvech_matrix(sol.states[i].tail(3), 2);
    worst = std::max(worst, (got - expected).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Lyapunov, TraceNonIncreasingWithoutNoise) {
  const UpnModel m = testing::linear_upn(coupled_linear_a(), Mat::Zero(2, 2), 1e-300);
  const std::vector<double> times = linspace(0.0, 20.0, 201);
  const auto rhs = [&](const Vec& z, double t) { return upn_rhs(m, z, t); };
  const Mat s0 = (Mat(2, 2) << 2.0, 0.5, 0.5, 1.0).finished();
  const Solution sol = integrate(rhs, pack(GaussianState{Vec::Ones(2), SymMatrix(s0), 0.0}, CovMode::full), times, {});
  for (std::size_t i = 1; i < times.size(); ++i)
    EXPECT_LE(unvech_matrix(sol.states[i].tail(3), 2).trace(), unvech_matrix(sol.states[i - 1].tail(3), 2).trace());
}

TEST(Packing, RoundTrip) {
  std::mt19937_64 gen(8);
  const GaussianState s{testing::random_vector(3, gen), SymMatrix(testing::random_spd(3, gen)), 1.5};
  const GaussianState back = unpack(pack(s, CovMode::full), 3, CovMode::full, 1.5);
  EXPECT_EQ(back.mu, s.mu);
  EXPECT_EQ(back.sigma.matrix(), s.sigma.matrix());
  EXPECT_EQ(pack(s, CovMode::diagonal).size(), 6);
  EXPECT_THROW(unpack(Vec::Zero(5), 3, CovMode::full, 0.0), DimensionError);
}

TEST(UpnModel, ParametersRoundTripAndValidate) {
  UpnModel m = UpnModel::create(2, {8}, CovMode::diagonal, 4);
  Vec p = m.parameters();
  EXPECT_EQ(static_cast<std::size_t>(p.size()), m.param_count());
  p(p.size() - 1) = -1.0;
  m.set_parameters(p);
  EXPECT_EQ(m.init_log_scale, -1.0);
  EXPECT_EQ(m.parameters(), p);
  m.eps_noise = 0.0;
  EXPECT_THROW(m.validate(), DomainError);
}

}  // namespace
}  // namespace upn
