#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfkit/centering.hpp"
#include "cfkit/dataset.hpp"
#include "cfkit/forest.hpp"

namespace cfkit {

struct OverlapReport {
  std::vector<double> bin_edges;  // bins + 1 edges spanning [0, 1]
  std::vector<int> treated_counts;
  std::vector<int> control_counts;
  double treated_min = 0.0;
  double treated_max = 0.0;
  double control_min = 0.0;
  double control_max = 0.0;
  double trim_lo = 0.0;
  double trim_hi = 0.0;
  double share_outside = 0.0;  // share of rows with e_hat outside [lo, hi]
  // Raised when one arm has zero mass in a bin where the other holds at least
  // 5% of its own mass.
  bool flagged = false;
};

inline constexpr double kDefaultTrimLo = 0.05;
inline constexpr double kDefaultTrimHi = 0.95;

OverlapReport overlap_report(const CenteredData& centered, int bins = 20,
                             double trim_lo = kDefaultTrimLo, double trim_hi = kDefaultTrimHi);

struct TrimResult {
  Dataset data;
  std::vector<int> kept_rows;  // indices into the original dataset, ascending
  std::size_t removed = 0;
};

// Drops rows whose fitted propensity falls outside [lo, hi].
TrimResult trim_by_propensity(const Dataset& data, const CenteredData& centered,
                              double lo = kDefaultTrimLo, double hi = kDefaultTrimHi);

// Shared result shape for the falsification reruns: each entry is one full
// center -> forest -> AIPW pipeline on synthetic inputs where the true effect
// is zero by construction.
struct FalsificationRun {
  double ate = 0.0;
  double se = 0.0;
  bool reject_at_05 = false;  // |ate / se| > 1.96
};

struct PlaceboResult {
  std::vector<FalsificationRun> runs;
  double rejection_share = 0.0;
};

// Replaces W with independent Bernoulli(mean(W)) draws and reruns the whole
// pipeline with estimated propensities. The input dataset is never modified.
PlaceboResult placebo_treatment_test(const Dataset& data, const ForestParams& params,
                                     int reps, std::uint64_t seed);

struct DummyOutcomeSpec {
  bool random_noise = true;  // standard normal outcome
  std::string column;        // pre-treatment column to use instead of noise
};

// Swaps Y for an outcome the treatment cannot have affected and reruns the
// pipeline; a significant ATE signals an identification problem. A named
// column is taken from X (or the reserved extras) and removed from the
// covariates for the rerun.
FalsificationRun dummy_outcome_test(const Dataset& data, const DummyOutcomeSpec& outcome,
                                    const ForestParams& params, std::uint64_t seed);

struct TrendPoint {
  double gap = 0.0;  // kernel-weighted treated-vs-control pre-period gap
  double se = 0.0;   // little-bags standard error
  bool flagged = false;  // |gap| > 1.96 se
};

// First-differences designs only: evaluates the pre-period placebo outcome
// through the fitted forest's kernel at each x. The estimator reuses the
// Robinson weighting on the placebo outcome; treat results as experimental.
std::vector<TrendPoint> parallel_trends_check(const Forest& forest,
                                              const CenteredData& centered_pre,
                                              const Matrix& x_points);

}  // namespace cfkit
