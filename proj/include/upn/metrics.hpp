#pragma once

// Forecast metrics: MSE, MAE, Gaussian NLL, CRPS, interval coverage and
// calibration errors, with per-horizon-step profiles.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/erf.hpp>

#include "upn/errors.hpp"
#include "upn/io.hpp"
#include "upn/linalg.hpp"
#include "upn/training.hpp"

namespace upn {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }
inline double normal_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi); }

/// Two-sided standard-normal quantile: P(|Z| <= z) = level.
inline double central_z(double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("coverage level must be in (0, 1)");
  return std::numbers::sqrt2 * boost::math::erf_inv(level);
}

inline double crps_gaussian(double y, double mu, double sigma) {
  if (!(sigma > 0.0)) throw DomainError("crps_gaussian: sigma must be > 0");
  const double z = (y - mu) / sigma;
  return sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - 1.0 / std::sqrt(std::numbers::pi));
}

/// Mean of per-dimension CRPS using marginal standard deviations.
inline double crps_gaussian(const Vec& y, const Vec& mu, const Vec& sigma) {
  detail::require_dims(y.size() == mu.size() && y.size() == sigma.size(), "crps_gaussian: length mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) s += crps_gaussian(y(i), mu(i), sigma(i));
  return s / static_cast<double>(y.size());
}

/// Fraction of |residual| <= z_level * sigma (closed interval).
inline double interval_coverage(const std::vector<double>& residuals, const std::vector<double>& sigmas, double level) {
  detail::require_dims(residuals.size() == sigmas.size(), "interval_coverage: length mismatch");
  if (residuals.empty()) throw DomainError("interval_coverage: empty input");
  const double z = central_z(level);
  std::size_t inside = 0;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw DomainError("interval_coverage: sigmas must be > 0");
    if (std::abs(residuals[i]) <= z * sigmas[i]) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(residuals.size());
}

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double observed = 0.0;  // fraction of points in the bin
  double expected = 0.0;  // standard-normal mass of the bin
};

struct Calibration {
  double ece = 0.0;
  double mce = 0.0;
  std::vector<CalibrationBin> bins;
};

/// Standardized residuals r / sigma binned into `bins` half-open equal-width
/// bins over [-3, 3]; values outside fall into the edge bins, whose expected
/// mass includes the tails. ECE weights each gap by the bin's observed share;
/// MCE is the largest gap over non-empty bins.
inline Calibration calibration_errors(const std::vector<double>& residuals, const std::vector<double>& sigmas,
                                      int bins = 12) {
  detail::require_dims(residuals.size() == sigmas.size(), "calibration_errors: length mismatch");
  if (bins < 2) throw DomainError("calibration_errors: bins must be >= 2");
  if (residuals.empty()) throw DomainError("calibration_errors: empty input");
  const double lo = -3.0, hi = 3.0, width = (hi - lo) / bins;
  Calibration out;
  out.bins.resize(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    auto& bin = out.bins[static_cast<std::size_t>(b)];
    bin.lo = lo + b * width;
    bin.hi = lo + (b + 1) * width;
    const double clo = b == 0 ? 0.0 : normal_cdf(bin.lo);
    const double chi = b == bins - 1 ? 1.0 : normal_cdf(bin.hi);
    bin.expected = chi - clo;
  }
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    if (!(sigmas[i] > 0.0)) throw DomainError("calibration_errors: sigmas must be > 0");
    const double z = residuals[i] / sigmas[i];
    const int b = std::clamp(static_cast<int>(std::floor((z - lo) / width)), 0, bins - 1);
    ++out.bins[static_cast<std::size_t>(b)].count;
  }
  const double total = static_cast<double>(residuals.size());
  for (auto& bin : out.bins) {
    bin.observed = static_cast<double>(bin.count) / total;
    if (bin.count == 0) continue;
    const double gap = std::abs(bin.observed - bin.expected);
    out.ece += bin.observed * gap;
    out.mce = std::max(out.mce, gap);
  }
  return out;
}

/// Predictive Gaussian at one forecast step.
struct PredictivePoint {
  Vec mean;
  Mat cov;
};

using PredictedPath = std::vector<PredictivePoint>;

inline const std::vector<double>& default_levels() {
  static const std::vector<double> levels{0.5, 0.8, 0.9, 0.95, 0.99};
  return levels;
}

struct HorizonProfile {
  std::vector<double> mse, nll, coverage;  // coverage at 0.95
  std::vector<double> mean_variance;       // mean predicted marginal variance
};

struct MetricsReport {
  double mse = 0.0, mae = 0.0, nll = 0.0, crps = 0.0;
  std::vector<std::pair<double, double>> coverage;        // level -> per-dimension marginal coverage
  std::vector<std::pair<double, double>> joint_coverage;  // level -> Mahalanobis-ellipsoid coverage
  double ece = 0.0, mce = 0.0;
  std::vector<CalibrationBin> calibration;
  HorizonProfile horizon;
  std::size_t points = 0;

  double coverage_at(double level) const {
    for (const auto& [l, c] : coverage)
      if (std::abs(l - level) < 1e-12) return c;
    throw ConfigError("coverage level " + format_double(level) + " was not evaluated");
  }
};

/// NLL is per dimension (gaussian_nll / n), matching the training loss.
inline MetricsReport evaluate(const std::vector<PredictedPath>& predictions, const std::vector<std::vector<Vec>>& truth,
                              const std::vector<double>& levels = default_levels()) {
  detail::require_dims(predictions.size() == truth.size() && !predictions.empty(),
                       "evaluate: predictions and truth must have the same (non-zero) number of windows");
  const std::size_t steps = predictions.front().size();
  const auto n = truth.front().front().size();
  MetricsReport rep;
  rep.horizon.mse.assign(steps, 0.0);
  rep.horizon.nll.assign(steps, 0.0);
  rep.horizon.coverage.assign(steps, 0.0);
  rep.horizon.mean_variance.assign(steps, 0.0);
  std::vector<double> residuals, sigmas;
  std::vector<double> mahalanobis;
  const double z95 = central_z(0.95);
  for (std::size_t w = 0; w < predictions.size(); ++w) {
    detail::require_dims(predictions[w].size() == steps && truth[w].size() == steps, "evaluate: horizon mismatch");
    for (std::size_t s = 0; s < steps; ++s) {
      const PredictivePoint& p = predictions[w][s];
      const Vec& y = truth[w][s];
      detail::require_dims(p.mean.size() == n && y.size() == n && p.cov.rows() == n && p.cov.cols() == n,
                           "evaluate: state dimension mismatch");
      const Vec r = y - p.mean;
      const double nll = gaussian_nll(y, p.mean, p.cov) / static_cast<double>(n);
      const Vec sd = p.cov.diagonal().cwiseMax(1e-300).cwiseSqrt();
      rep.mse += r.squaredNorm();
      rep.mae += r.cwiseAbs().sum();
      rep.nll += nll;
      rep.crps += crps_gaussian(y, p.mean, sd);
      rep.horizon.mse[s] += r.squaredNorm() / static_cast<double>(n);
      rep.horizon.nll[s] += nll;
      rep.horizon.mean_variance[s] += p.cov.diagonal().mean();
      for (Eigen::Index i = 0; i < n; ++i) {
        residuals.push_back(r(i));
        sigmas.push_back(sd(i));
        if (std::abs(r(i)) <= z95 * sd(i)) rep.horizon.coverage[s] += 1.0 / static_cast<double>(n);
      }
      Eigen::LLT<Mat> llt(p.cov);
      mahalanobis.push_back(llt.info() == Eigen::Success ? r.dot(llt.solve(r)) : std::numeric_limits<double>::infinity());
    }
  }
  const double windows = static_cast<double>(predictions.size());
  const double pts = windows * static_cast<double>(steps);
  rep.points = static_cast<std::size_t>(pts);
  rep.mse /= pts * static_cast<double>(n);
  rep.mae /= pts * static_cast<double>(n);
  rep.nll /= pts;
  rep.crps /= pts;
  for (std::size_t s = 0; s < steps; ++s) {
    rep.horizon.mse[s] /= windows;
    rep.horizon.nll[s] /= windows;
    rep.horizon.coverage[s] /= windows;
    rep.horizon.mean_variance[s] /= windows;
  }
  const boost::math::chi_squared chi2(static_cast<double>(n));
  for (double level : levels) {
    rep.coverage.emplace_back(level, interval_coverage(residuals, sigmas, level));
    const double q = boost::math::quantile(chi2, level);
    const auto inside = std::count_if(mahalanobis.begin(), mahalanobis.end(), [q](double d) { return d <= q; });
    rep.joint_coverage.emplace_back(level, static_cast<double>(inside) / static_cast<double>(mahalanobis.size()));
  }
  const Calibration cal = calibration_errors(residuals, sigmas);
  rep.ece = cal.ece;
  rep.mce = cal.mce;
  rep.calibration = cal.bins;
  return rep;
}

/// Long format: model, system, metric, value.
inline void append_metrics_rows(CsvWriter& w, const std::string& model, const std::string& system,
                                const MetricsReport& r) {
  auto row = [&](const std::string& metric, double v) { w.row_strings({model, system, metric, format_double(v)}); };
  row("mse", r.mse);
  row("mae", r.mae);
  row("nll", r.nll);
  row("crps", r.crps);
  for (const auto& [l, c] : r.coverage) row("coverage_" + format_double(l), c);
  for (const auto& [l, c] : r.joint_coverage) row("joint_coverage_" + format_double(l), c);
  row("ece", r.ece);
  row("mce", r.mce);
  row("points", static_cast<double>(r.points));
}

inline CsvWriter metrics_writer() { return CsvWriter({"model", "system", "metric", "value"}); }

inline std::string horizon_csv(const MetricsReport& r) {
  CsvWriter w({"step", "mse", "nll", "coverage", "mean_variance"});
  for (std::size_t s = 0; s < r.horizon.mse.size(); ++s)
    w.row({static_cast<double>(s + 1), r.horizon.mse[s], r.horizon.nll[s], r.horizon.coverage[s],
           r.horizon.mean_variance[s]});
  return w.str();
}

inline std::string calibration_csv(const MetricsReport& r) {
  CsvWriter w({"bin_lo", "bin_hi", "count", "observed", "expected"});
  for (const auto& b : r.calibration)
    w.row({b.lo, b.hi, static_cast<double>(b.count), b.observed, b.expected});
  return w.str();
}

}  // namespace upn
