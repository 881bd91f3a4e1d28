#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfkit/centering.hpp"
#include "cfkit/forest.hpp"

namespace cfkit {

struct CateEstimate {
  double point = 0.0;
  double se = 0.0;
  double excess_error = 0.0;
};

// Robinson ratio estimate at x under the forest kernel. exclude_for drops
// trees whose subsample contains that row (out-of-bag evaluation).
double estimate_cate(const Forest& forest, const CenteredData& centered,
                     std::span<const double> x, std::optional<int> exclude_for = std::nullopt);

struct OobCates {
  std::vector<double> tau;           // NaN for failed rows
  std::vector<int> no_tree_rows;     // rows inside every tree's subsample
  std::vector<int> degenerate_rows;  // kernel denominator below threshold
};

// Row-wise out-of-bag CATEs: identical to estimate_cate(forest, centered,
// X.row(i), i) for every row, evaluated in one pass.
OobCates oob_cates(const Forest& forest, const CenteredData& centered, const Matrix& X);

// Bootstrap-of-little-bags standard error at x: between-group variance of the
// per-bag estimates, debiased by the within-bag Monte Carlo noise, with a
// positive Bayes shrinkage so the result never drops below the floor.
double cate_se_little_bags(const Forest& forest, const CenteredData& centered,
                           std::span<const double> x);
double cate_se_little_bags(const CausalKernel& kernel, std::span<const double> x);

inline constexpr double kVarianceFloor = 1e-12;

// point + se + excess error in one evaluation (batch exports).
CateEstimate estimate_with_uncertainty(const CausalKernel& kernel, std::span<const double> x);

// Batch export: row_id, tau_hat, se, excess_error.
void write_cate_csv(const std::string& path, std::span<const CateEstimate> estimates);

}  // namespace cfkit
