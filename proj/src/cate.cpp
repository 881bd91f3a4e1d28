#include "cfkit/cate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "cfkit/errors.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

double estimate_cate(const Forest& forest, const CenteredData& centered,
                     std::span<const double> x, std::optional<int> exclude_for) {
  CausalKernel kernel(forest, centered.y_res, centered.w_res);
  return kernel.point(x, exclude_for);
}

OobCates oob_cates(const Forest& forest, const CenteredData& centered, const Matrix& X) {
  CausalKernel kernel(forest, centered.y_res, centered.w_res);
  CausalKernel::OobResult r = kernel.oob_all(X);
  return {std::move(r.tau), std::move(r.no_tree_rows), std::move(r.degenerate_rows)};
}

namespace {

// Posterior mean of the variance under a non-informative prior restricted to
// nonnegative values: initial + se * phi(r) / Phi(r). Strictly positive, and
// converges to the plain debiased value as the number of bags grows.
double debias_variance(double var_between, double group_noise, double n_groups) {
  double initial = var_between - group_noise;
  double scale = std::max(var_between, group_noise) * std::sqrt(2.0 / n_groups);
  if (!(scale > 0.0)) return initial;
  double ratio = initial / scale;
  double phi = std::exp(-0.5 * ratio * ratio) / std::sqrt(2.0 * std::numbers::pi);
  double cdf = normal_cdf(ratio);
  if (cdf < 1e-300) return 0.0;
  return initial + scale * phi / cdf;
}

double se_from_kernel(const CausalKernel& kernel, std::span<const double> x, double full) {
  const Forest& forest = kernel.forest();
  const int ell = forest.params.ci_group_size;
  if (forest.num_groups() < 2) {
    throw NumericError(ErrorCode::TooFewGroups,
                       "num_trees / ci_group_size must be at least 2 for variance estimation");
  }
  std::vector<double> groups = kernel.group_estimates(x);
  std::vector<double> trees = kernel.tree_estimates(x);

  double var_between = 0.0, var_total = 0.0;
  int good_groups = 0;
  for (int g = 0; g < static_cast<int>(groups.size()); ++g) {
    if (!std::isfinite(groups[g])) continue;
    ++good_groups;
    var_between += (groups[g] - full) * (groups[g] - full);
    for (int t = g * ell; t < (g + 1) * ell; ++t) {
      if (!std::isfinite(trees[t])) continue;
      var_total += (trees[t] - full) * (trees[t] - full);
    }
  }
  if (good_groups < 2) {
    throw NumericError(ErrorCode::TooFewGroups,
                       "fewer than 2 little bags produced a usable estimate at this point");
  }
  var_between /= static_cast<double>(good_groups);
  var_total /= static_cast<double>(good_groups) * ell;
  double group_noise = ell > 1 ? (var_total - var_between) / (ell - 1) : 0.0;
  double var = debias_variance(var_between, group_noise, good_groups);
  return std::sqrt(std::max(var, kVarianceFloor));
}

}  // namespace

double cate_se_little_bags(const CausalKernel& kernel, std::span<const double> x) {
  double full = kernel.point(x);
  return se_from_kernel(kernel, x, full);
}

double cate_se_little_bags(const Forest& forest, const CenteredData& centered,
                           std::span<const double> x) {
  CausalKernel kernel(forest, centered.y_res, centered.w_res);
  return cate_se_little_bags(kernel, x);
}

CateEstimate estimate_with_uncertainty(const CausalKernel& kernel, std::span<const double> x) {
  CateEstimate est;
  est.point = kernel.point(x);
  est.se = se_from_kernel(kernel, x, est.point);
  std::vector<double> groups = kernel.group_estimates(x);
  std::vector<double> good;
  good.reserve(groups.size());
  for (double g : groups) {
    if (std::isfinite(g)) good.push_back(g);
  }
  est.excess_error = good.size() < 2 ? 0.0 : variance(good) / static_cast<double>(good.size());
  return est;
}

void write_cate_csv(const std::string& path, std::span<const CateEstimate> estimates) {
  std::ofstream out(path);
  if (!out) throw DataError(ErrorCode::EmptyFile, "cannot write " + path);
  out << "row_id,tau_hat,se,excess_error\n";
  char buf[128];
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g", i, estimates[i].point,
                  estimates[i].se, estimates[i].excess_error);
    out << buf << '\n';
  }
}

}  // namespace cfkit
