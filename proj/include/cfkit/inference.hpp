#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfkit/centering.hpp"
#include "cfkit/dataset.hpp"

namespace cfkit {

// Doubly robust scores. Gamma averages to the AIPW ATE by construction and the
// provenance tag (centering fingerprint) lets held-out checks detect reuse of
// the same rows.
struct DrScores {
  std::vector<double> gamma;
  std::uint64_t provenance = 0;

  std::size_t n() const { return gamma.size(); }
};

// gamma_i = tau_oob_i + (W_i - e_i) / (e_i (1 - e_i)) *
//           (Y_i - m_i - (W_i - e_i) * tau_oob_i)
DrScores dr_scores(const Dataset& data, const CenteredData& centered,
                   std::span<const double> oob_tau);

struct AteResult {
  double point = 0.0;
  double se = 0.0;  // sd(gamma) / sqrt(n)
};

AteResult ate_aipw(const DrScores& scores);

struct LinearProjection {
  std::vector<std::string> names;  // "intercept" first
  std::vector<double> coef;
  std::vector<double> se;  // heteroskedasticity-robust (HC1)
  std::vector<double> t;
  std::vector<double> p;  // two-sided, normal approximation
  std::vector<double> bootstrap_se;  // empty unless bootstrap_reps > 0
};

// Least squares of the scores on [1, A]. Analytic sandwich errors by default;
// bootstrap_reps > 0 adds observation-resampling bootstrap errors.
LinearProjection blp(const DrScores& scores, const Matrix& A,
                     const std::vector<std::string>& names, int bootstrap_reps = 0,
                     std::uint64_t seed = 0);

// Priority scores for targeting rules; the provenance tag must come from a
// fit on rows disjoint from the evaluation scores.
struct Priority {
  std::vector<double> values;
  std::uint64_t provenance = 0;
};

enum class RateWeighting { Autoc, Qini };

struct RateResult {
  double estimate = 0.0;
  double se = 0.0;
  std::vector<double> grid;  // treated fractions 0.01 .. 1.00
  std::vector<double> toc;   // TOC at each grid point; exactly 0 at p = 1
};

// Targeting operator characteristic: TOC(p) = mean(gamma | priority rank <=
// p*n) - mean(gamma), integrated with uniform weight (AUTOC) or weight p
// (QINI). se from a half-sample bootstrap over rows.
RateResult rate(const Priority& priority, const DrScores& scores_holdout,
                RateWeighting weighting, int bootstrap_reps = 200, std::uint64_t seed = 0);

struct CalibrationResult {
  double mean_coef = 0.0;
  double mean_se = 0.0;
  double mean_t = 0.0;
  double mean_p = 0.0;  // one-sided P(Z > t)
  double diff_coef = 0.0;
  double diff_se = 0.0;
  double diff_t = 0.0;
  double diff_p = 0.0;
  // Set when the predictions are numerically constant; the differential
  // fields are NaN and only mean_coef is meaningful.
  bool degenerate_heterogeneity = false;
};

// Regresses scores on [mean(tau) * 1, tau - mean(tau)] without intercept.
// mean_coef near 1 indicates a calibrated average effect; diff_coef > 0 with a
// significant t indicates real heterogeneity.
CalibrationResult calibration_test(std::span<const double> oob_tau, const DrScores& scores);

}  // namespace cfkit
