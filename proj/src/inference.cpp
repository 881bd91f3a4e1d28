#include "cfkit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "cfkit/errors.hpp"
#include "cfkit/random.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr std::uint64_t kRateBootTag = 21;
constexpr std::uint64_t kBlpBootTag = 22;

struct OlsFit {
  Eigen::VectorXd coef;
  Eigen::VectorXd se;  // HC1 sandwich
};

// Least squares with heteroskedasticity-robust (HC1) standard errors.
OlsFit ols_hc1(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const auto n = X.rows();
  const auto k = X.cols();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < k) {
    throw NumericError(ErrorCode::RankDeficient, "design matrix is rank deficient");
  }
  OlsFit fit;
  fit.coef = qr.solve(y);
  Eigen::VectorXd u = y - X * fit.coef;
  Eigen::MatrixXd xtx_inv =
      (X.transpose() * X).ldlt().solve(Eigen::MatrixXd::Identity(k, k));
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    meat.noalias() += u[i] * u[i] * X.row(i).transpose() * X.row(i);
  }
  double dof_adjust = n > k ? static_cast<double>(n) / static_cast<double>(n - k) : 1.0;
  Eigen::MatrixXd cov = xtx_inv * meat * xtx_inv * dof_adjust;
  fit.se = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  return fit;
}

}  // namespace

DrScores dr_scores(const Dataset& data, const CenteredData& centered,
                   std::span<const double> oob_tau) {
  const std::size_t n = data.n();
  if (centered.y_res.size() != n || oob_tau.size() != n) {
    throw UsageError(ErrorCode::InvalidParams, "score inputs must share the dataset's rows");
  }
  DrScores scores;
  scores.gamma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double e = centered.e_hat[i];
    if (!(e > 0.0 && e < 1.0)) {
      throw DataError(ErrorCode::PropensityOutOfBounds,
                      "propensity outside (0,1) at row " + std::to_string(i + 1));
    }
    if (!std::isfinite(oob_tau[i])) {
      throw UsageError(ErrorCode::InvalidParams,
                       "out-of-bag CATE is not finite at row " + std::to_string(i + 1));
    }
    double wres = centered.w_res[i];
    double resid = centered.y_res[i] - wres * oob_tau[i];
    scores.gamma[i] = oob_tau[i] + wres / (e * (1.0 - e)) * resid;
  }
  scores.provenance = centered.fingerprint;
  return scores;
}

AteResult ate_aipw(const DrScores& scores) {
  if (scores.gamma.empty()) {
    throw UsageError(ErrorCode::InvalidParams, "cannot average an empty score vector");
  }
  AteResult r;
  r.point = mean(scores.gamma);
  r.se = sd(scores.gamma) / std::sqrt(static_cast<double>(scores.gamma.size()));
  return r;
}

LinearProjection blp(const DrScores& scores, const Matrix& A,
                     const std::vector<std::string>& names, int bootstrap_reps,
                     std::uint64_t seed) {
  const std::size_t n = scores.n();
  if (A.rows() != 0 && A.rows() != n) {
    throw UsageError(ErrorCode::InvalidParams, "projection covariates must match score rows");
  }
  if (names.size() != A.cols()) {
    throw UsageError(ErrorCode::InvalidParams, "projection names must match covariate columns");
  }
  const std::size_t k = A.cols() + 1;
  Eigen::MatrixXd X(n, k);
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    for (std::size_t j = 0; j < A.cols(); ++j) X(i, j + 1) = A(i, j);
    y(i) = scores.gamma[i];
  }
  OlsFit fit = ols_hc1(X, y);

  LinearProjection out;
  out.names.push_back("intercept");
  for (const auto& nm : names) out.names.push_back(nm);
  for (std::size_t j = 0; j < k; ++j) {
    out.coef.push_back(fit.coef[j]);
    out.se.push_back(fit.se[j]);
    double t = fit.se[j] > 0 ? fit.coef[j] / fit.se[j] : kNaN;
    out.t.push_back(t);
    out.p.push_back(std::isfinite(t) ? 2.0 * (1.0 - normal_cdf(std::fabs(t))) : kNaN);
  }

  if (bootstrap_reps > 0) {
    // Resampling path: rows of (gamma, A) are redrawn with replacement and the
    // projection refitted; reported error is the spread across replicates.
    Rng rng(derive_seed(seed, kBlpBootTag));
    std::vector<std::vector<double>> coef_reps(k);
    for (int rep = 0; rep < bootstrap_reps; ++rep) {
      Eigen::MatrixXd Xb(n, k);
      Eigen::VectorXd yb(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = rng.uniform_index(n);
        Xb.row(i) = X.row(r);
        yb(i) = y(r);
      }
      try {
        OlsFit f = ols_hc1(Xb, yb);
        for (std::size_t j = 0; j < k; ++j) coef_reps[j].push_back(f.coef[j]);
      } catch (const NumericError&) {
        // degenerate resample; skip
      }
    }
    if (!coef_reps[0].empty() && coef_reps[0].size() >= 2) {
      for (std::size_t j = 0; j < k; ++j) out.bootstrap_se.push_back(sd(coef_reps[j]));
    }
  }
  return out;
}

RateResult rate(const Priority& priority, const DrScores& scores_holdout,
                RateWeighting weighting, int bootstrap_reps, std::uint64_t seed) {
  const std::size_t n = scores_holdout.n();
  if (priority.values.size() != n) {
    throw UsageError(ErrorCode::InvalidParams, "priority and scores must share rows");
  }
  if (n < 2) throw UsageError(ErrorCode::InvalidParams, "need at least 2 rows");
  if (priority.provenance != 0 && priority.provenance == scores_holdout.provenance) {
    throw DataError(ErrorCode::NotHeldOut,
                    "priority was computed from the same fit as the evaluation scores; "
                    "rank targeting must be evaluated on held-out rows");
  }

  auto toc_curve = [&](const std::vector<int>& rows, std::vector<double>* grid_out,
                       std::vector<double>* toc_out) {
    std::vector<int> order = rows;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return priority.values[a] > priority.values[b] ||
             (priority.values[a] == priority.values[b] && a < b);
    });
    const std::size_t m = order.size();
    std::vector<double> cum(m + 1, 0.0);
    for (std::size_t i = 0; i < m; ++i) cum[i + 1] = cum[i] + scores_holdout.gamma[order[i]];
    double overall = cum[m] / static_cast<double>(m);
    double estimate = 0.0;
    for (int j = 1; j <= 100; ++j) {
      double p = static_cast<double>(j) / 100.0;
      std::size_t kx = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::floor(p * static_cast<double>(m) + 1e-9)));
      if (kx > m) kx = m;
      double toc = cum[kx] / static_cast<double>(kx) - overall;
      if (grid_out) grid_out->push_back(p);
      if (toc_out) toc_out->push_back(toc);
      estimate += (weighting == RateWeighting::Qini ? p : 1.0) * toc;
    }
    return estimate / 100.0;
  };

  RateResult result;
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  result.estimate = toc_curve(all, &result.grid, &result.toc);

  if (bootstrap_reps >= 2) {
    Rng rng(derive_seed(seed, kRateBootTag));
    std::size_t half = n / 2;
    if (half >= 2) {
      std::vector<double> reps;
      reps.reserve(bootstrap_reps);
      for (int rep = 0; rep < bootstrap_reps; ++rep) {
        std::vector<int> rows =
            rng.sample_without_replacement(static_cast<int>(n), static_cast<int>(half));
        reps.push_back(toc_curve(rows, nullptr, nullptr));
      }
      result.se = sd(reps);
    }
  }
  return result;
}

CalibrationResult calibration_test(std::span<const double> oob_tau, const DrScores& scores) {
  const std::size_t n = scores.n();
  if (oob_tau.size() != n || n < 3) {
    throw UsageError(ErrorCode::InvalidParams, "calibration needs matching rows and n >= 3");
  }
  double mean_pred = mean(oob_tau);
  double max_dev = 0.0;
  for (double t : oob_tau) max_dev = std::max(max_dev, std::fabs(t - mean_pred));
  bool degenerate = max_dev <= 1e-12 * std::max(1.0, std::fabs(mean_pred));

  CalibrationResult out;
  out.degenerate_heterogeneity = degenerate;
  Eigen::VectorXd y(n);
  for (std::size_t i = 0; i < n; ++i) y(i) = scores.gamma[i];

  if (degenerate) {
    out.diff_coef = out.diff_se = out.diff_t = out.diff_p = kNaN;
    if (std::fabs(mean_pred) < 1e-300) {
      out.mean_coef = out.mean_se = out.mean_t = out.mean_p = kNaN;
      return out;
    }
    Eigen::MatrixXd X = Eigen::MatrixXd::Constant(n, 1, mean_pred);
    OlsFit fit = ols_hc1(X, y);
    out.mean_coef = fit.coef[0];
    out.mean_se = fit.se[0];
    out.mean_t = fit.se[0] > 0 ? fit.coef[0] / fit.se[0] : kNaN;
    out.mean_p = std::isfinite(out.mean_t) ? 1.0 - normal_cdf(out.mean_t) : kNaN;
    return out;
  }

  Eigen::MatrixXd X(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = mean_pred;
    X(i, 1) = oob_tau[i] - mean_pred;
  }
  OlsFit fit = ols_hc1(X, y);
  out.mean_coef = fit.coef[0];
  out.mean_se = fit.se[0];
  out.mean_t = fit.se[0] > 0 ? fit.coef[0] / fit.se[0] : kNaN;
  out.mean_p = std::isfinite(out.mean_t) ? 1.0 - normal_cdf(out.mean_t) : kNaN;
  out.diff_coef = fit.coef[1];
  out.diff_se = fit.se[1];
  out.diff_t = fit.se[1] > 0 ? fit.coef[1] / fit.se[1] : kNaN;
  out.diff_p = std::isfinite(out.diff_t) ? 1.0 - normal_cdf(out.diff_t) : kNaN;
  return out;
}

}  // namespace cfkit
