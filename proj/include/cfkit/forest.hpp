#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfkit/matrix.hpp"

namespace cfkit {

struct ForestParams {
  int num_trees = 2000;
  double sample_fraction = 0.5;   // in (0, 1], drawn without replacement
  double honesty_fraction = 0.5;  // share of each subsample used for splitting
  int mtry = 0;                   // 0 resolves to min(p, ceil(sqrt(p) + 20))
  int min_node_size = 5;          // minimum split-half count per child
  int ci_group_size = 2;          // trees per little bag; must divide num_trees
  std::uint64_t seed = 42;
};

// Throws when fields are out of range; num_trees that is not a multiple of
// ci_group_size is rejected outright rather than rounded.
void validate_params(const ForestParams& params, std::size_t p);
int resolve_mtry(const ForestParams& params, std::size_t p);

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  std::vector<int> rows;  // estimate-half rows, leaves only
  double value = 0.0;     // regression leaf mean over estimate-half rows
};

struct Tree {
  std::vector<int> subsample;      // sorted global row ids
  std::vector<int> estimate_half;  // sorted; disjoint from the split half
  std::vector<TreeNode> nodes;     // preorder, nodes[0] is the root

  int locate(const double* x) const {
    int id = 0;
    while (nodes[id].feature >= 0) {
      id = x[nodes[id].feature] <= nodes[id].threshold ? nodes[id].left : nodes[id].right;
    }
    return id;
  }
  int locate(std::span<const double> x) const { return locate(x.data()); }
  bool contains(int row) const;  // row in subsample
};

enum class ForestKind { Regression, Causal };

struct Forest {
  ForestKind kind = ForestKind::Regression;
  ForestParams params;
  std::size_t n_rows = 0;
  std::size_t n_features = 0;
  std::uint64_t data_fingerprint = 0;
  std::vector<Tree> trees;

  int num_groups() const { return static_cast<int>(trees.size()) / params.ci_group_size; }
};

// Honest regression forest: variance-reduction splits on the split half,
// leaf means from the estimate half.
Forest grow_regression_forest(const Matrix& X, std::span<const double> target,
                              const ForestParams& params);

// Honest causal forest on centered residuals: splits maximize
// sum over children of n_child * tau_child^2, where tau_child is the Robinson
// estimate within the child on the split half.
Forest grow_causal_forest(const Matrix& X, std::span<const double> y_res,
                          std::span<const double> w_res, const ForestParams& params);

// Adaptive kernel around x. Trees whose subsample contains exclude_for are
// skipped; each remaining tree spreads mass 1/|leaf| over the estimate-half
// rows of its leaf at x, and the total is divided by the number of
// contributing trees, so the weights sum to one.
std::vector<double> kernel_weights(const Forest& forest, std::span<const double> x,
                                   std::optional<int> exclude_for = std::nullopt);

struct OobPrediction {
  std::vector<double> values;     // NaN where no eligible tree exists
  std::vector<int> missing_rows;  // rows contained in every tree's subsample
};

// Out-of-bag predictions for regression forests: row i averages leaf means
// over trees whose subsample excludes i.
OobPrediction predict_oob(const Forest& forest, const Matrix& X);

// Plain prediction at new rows (regression forests, all trees).
std::vector<double> predict(const Forest& forest, const Matrix& X);

// Precomputed per-leaf moments of the centered residuals, shared by every
// kernel-based estimate so repeated queries stay cheap.
class CausalKernel {
 public:
  CausalKernel(const Forest& forest, std::span<const double> y_res,
               std::span<const double> w_res);

  // Robinson estimate at x; throws NoEligibleTrees / DegenerateKernel.
  double point(std::span<const double> x, std::optional<int> exclude_for = std::nullopt) const;

  struct OobResult {
    std::vector<double> tau;          // NaN for failed rows
    std::vector<int> no_tree_rows;    // no eligible trees
    std::vector<int> degenerate_rows; // kernel denominator below threshold
  };
  OobResult oob_all(const Matrix& X) const;

  // Per-tree / per-little-bag Robinson estimates at x; NaN where degenerate.
  std::vector<double> tree_estimates(std::span<const double> x) const;
  std::vector<double> group_estimates(std::span<const double> x) const;

  const Forest& forest() const { return forest_; }

 private:
  const Forest& forest_;
  std::span<const double> y_res_;
  std::span<const double> w_res_;
  // per tree, per node: sums over estimate-half leaf rows
  struct LeafStat {
    double syw = 0;  // sum of y_res * w_res
    double sww = 0;  // sum of w_res^2
  };
  std::vector<std::vector<LeafStat>> stats_;
};

// Kernel denominators below this threshold are treated as degenerate.
inline constexpr double kDegenerateKernelEps = 1e-10;

// Monte Carlo variance of the ensemble estimate at x attributable to the
// finite number of trees: empirical variance across little-bag group
// estimates divided by the number of groups.
double excess_error(const Forest& forest, std::span<const double> y_res,
                    std::span<const double> w_res, std::span<const double> x);
double excess_error(const CausalKernel& kernel, std::span<const double> x);

void save_forest(const Forest& forest, const std::string& path);
Forest load_forest(const std::string& path);

struct TuneSearchSpace {
  int min_node_size_lo = 2;
  int min_node_size_hi = 50;  // drawn log-uniform
  double sample_fraction_lo = 0.25;
  double sample_fraction_hi = 0.5;
  double honesty_fraction_lo = 0.4;
  double honesty_fraction_hi = 0.7;
  int mtry_lo = 1;
  int mtry_hi = 0;  // 0 resolves to p
};

struct TuneTrial {
  ForestParams params;
  double r_loss = 0.0;
};

struct TuneResult {
  ForestParams best;
  std::vector<TuneTrial> trials;
};

// Random search over (min_node_size, sample_fraction, mtry, honesty_fraction).
// Each candidate fits a small forest (max(200, base.num_trees / 10) trees,
// same derived seed for every candidate so duplicates score identically) and
// is scored by out-of-bag R-loss; ties prefer the larger min_node_size.
TuneResult tune_params(const Matrix& X, std::span<const double> y_res,
                       std::span<const double> w_res, const ForestParams& base,
                       const TuneSearchSpace& space, int budget, std::uint64_t seed);

}  // namespace cfkit
