#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfkit/centering.hpp"
#include "cfkit/dataset.hpp"
#include "cfkit/forest.hpp"
#include "cfkit/inference.hpp"

namespace cfkit {

struct ImportanceVector {
  std::vector<double> weights;  // per feature, nonnegative, sums to 1
  // Forest without a single split: weights fall back to uniform 1/p.
  bool no_splits = false;
};

// Depth-weighted split counts: a split at depth d (root = 0) contributes
// decay^d while d < max_depth, aggregated over all trees and normalized.
ImportanceVector variable_importance(const Forest& forest, double decay = 0.5,
                                     int max_depth = 4);

struct BasuSelection {
  std::vector<int> features;  // ascending indices
  bool fallback = false;      // no feature above the mean; argmax used instead
};

// Features with strictly above-average importance; never empty.
BasuSelection basu_select(const ImportanceVector& importance);

struct CateHistogram {
  std::vector<double> edges;  // bins + 1, equal width over [min, max]
  std::vector<int> counts;
};

CateHistogram cate_histogram(std::span<const double> taus, int bins);

struct RankedRow {
  int row = 0;  // index into the input vectors
  double tau = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
};

// Rows sorted ascending by point estimate with normal (1 - alpha) intervals.
std::vector<RankedRow> ranked_cate_table(std::span<const double> taus,
                                         std::span<const double> ses, double alpha = 0.05);

struct QuantileBin {
  double lo = 0.0;  // -inf / +inf at the outer edges
  double hi = 0.0;
  int n = 0;
  double estimate = 0.0;  // mean holdout DR score; NaN when empty
  double se = 0.0;
  bool empty = false;
};

struct QuantileBinReport {
  std::vector<double> thresholds;  // k - 1 train-side quantiles, nondecreasing
  std::vector<QuantileBin> bins;
  double top_vs_rest = 0.0;  // top-bin estimate minus pooled remainder
  double top_vs_rest_se = 0.0;
  double wald_z = 0.0;
};

// Thresholds come from the training-side CATEs; holdout rows are binned by
// their own predictions and summarized by held-out DR scores. Ties at a
// threshold go to the lower bin.
QuantileBinReport quantile_bins(std::span<const double> train_taus,
                                const DrScores& holdout_scores,
                                std::span<const double> holdout_taus, int k);

// Bin index for each tau against nondecreasing thresholds; ties go low.
std::vector<int> assign_quantile_bins(std::span<const double> taus,
                                      std::span<const double> thresholds);

struct CovariateProfile {
  std::vector<int> bin_n;
  std::vector<std::vector<double>> bin_means;  // [bin][feature]
  std::vector<bool> sparse;                    // bins with fewer than 2 rows
};

CovariateProfile covariate_profile_by_quantile(const Dataset& data,
                                               std::span<const int> bin_assignment, int k);

struct CurvePoint {
  double x = 0.0;
  double value = 0.0;
  double spread = 0.0;  // bin sd (binned mode); 0 for smoothed points
  int n = 0;
};

struct CateCurve {
  std::vector<CurvePoint> points;
  bool bins_merged = false;  // fewer distinct values than requested bins
};

// Equal-count bins of tau against one covariate.
CateCurve cate_by_variable_binned(std::span<const double> taus, std::span<const double> x_col,
                                  int k);

// Local-linear smoother with a tricube kernel at 50 evaluation points;
// bandwidth is a fraction of the covariate range.
CateCurve cate_by_variable_smoothed(std::span<const double> taus,
                                    std::span<const double> x_col,
                                    double bandwidth_frac = 0.3);

struct GroupCate {
  std::string label;
  int n = 0;
  double estimate = 0.0;
  double se = 0.0;
  bool flagged = false;  // single-row group, se undefined
};

// Per-label mean DR score; labels ordered by first appearance.
std::vector<GroupCate> group_cates(const DrScores& scores,
                                   const std::vector<std::string>& groups);

// Index of the tree with the lowest out-of-sample R-loss
// sum_i (y_res_i - tau_leaf(i) * w_res_i)^2 over rows outside the tree's
// subsample; ties resolve to the lowest index.
struct BestTree {
  int index = 0;
  double r_loss = 0.0;
};

BestTree best_tree(const Forest& forest, const CenteredData& centered, const Matrix& X);

// pi(x) = 1{tau(x) >= threshold}; the boundary is treated.
std::vector<int> derive_policy(std::span<const double> taus, double threshold);

enum class PolicyBaseline { TreatNone, TreatAll };

struct PolicyValue {
  double value = 0.0;
  double se = 0.0;
  std::vector<double> qini_p;      // treated fractions 0.01 .. 1.00
  std::vector<double> qini_value;  // cumulative mean DR score of the top p
};

// Mean DR score under the policy relative to the baseline, on held-out
// scores. The priority ranking (training-fit predictions on the holdout rows)
// orders the Qini points and must not share provenance with the scores.
PolicyValue policy_value(std::span<const int> policy, const DrScores& scores_holdout,
                         PolicyBaseline baseline, const Priority& priority);

}  // namespace cfkit
