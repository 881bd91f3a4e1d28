#include "cfkit/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cfkit/cate.hpp"
#include "cfkit/errors.hpp"
#include "cfkit/inference.hpp"
#include "cfkit/random.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {

constexpr std::uint64_t kPlaceboTag = 31;
constexpr std::uint64_t kDummyTag = 32;

// One center -> forest -> AIPW pass with estimated propensities.
FalsificationRun run_null_pipeline(const Dataset& data, const ForestParams& params) {
  CenteredData centered = local_center(data, params, /*use_oracle=*/false);
  Forest forest = grow_causal_forest(data.X, centered.y_res, centered.w_res, params);
  OobCates oob = oob_cates(forest, centered, data.X);
  DrScores scores = dr_scores(data, centered, oob.tau);
  AteResult ate = ate_aipw(scores);
  FalsificationRun run;
  run.ate = ate.point;
  run.se = ate.se;
  run.reject_at_05 = ate.se > 0 && std::fabs(ate.point / ate.se) > 1.96;
  return run;
}

}  // namespace

OverlapReport overlap_report(const CenteredData& centered, int bins, double trim_lo,
                             double trim_hi) {
  if (bins < 1) throw UsageError(ErrorCode::InvalidParams, "bins must be >= 1");
  if (!(trim_lo > 0.0 && trim_lo < trim_hi && trim_hi < 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "trim bounds must satisfy 0 < lo < hi < 1");
  }
  OverlapReport rep;
  rep.trim_lo = trim_lo;
  rep.trim_hi = trim_hi;
  rep.bin_edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b) rep.bin_edges[b] = static_cast<double>(b) / bins;
  rep.treated_counts.assign(bins, 0);
  rep.control_counts.assign(bins, 0);

  const std::size_t n = centered.e_hat.size();
  rep.treated_min = rep.control_min = std::numeric_limits<double>::infinity();
  rep.treated_max = rep.control_max = -std::numeric_limits<double>::infinity();
  int n_treated = 0, n_control = 0;
  std::size_t outside = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double e = centered.e_hat[i];
    int bin = std::min(bins - 1, static_cast<int>(e * bins));
    // W is recoverable from the residual: w_res = W - e_hat with W in {0, 1}.
    bool treated = centered.w_res[i] + e > 0.5;
    if (treated) {
      rep.treated_counts[bin]++;
      n_treated++;
      rep.treated_min = std::min(rep.treated_min, e);
      rep.treated_max = std::max(rep.treated_max, e);
    } else {
      rep.control_counts[bin]++;
      n_control++;
      rep.control_min = std::min(rep.control_min, e);
      rep.control_max = std::max(rep.control_max, e);
    }
    if (e < trim_lo || e > trim_hi) outside++;
  }
  rep.share_outside = n == 0 ? 0.0 : static_cast<double>(outside) / static_cast<double>(n);

  for (int b = 0; b < bins; ++b) {
    double t_share = n_treated ? static_cast<double>(rep.treated_counts[b]) / n_treated : 0.0;
    double c_share = n_control ? static_cast<double>(rep.control_counts[b]) / n_control : 0.0;
    if ((rep.treated_counts[b] == 0 && c_share >= 0.05) ||
        (rep.control_counts[b] == 0 && t_share >= 0.05)) {
      rep.flagged = true;
    }
  }
  return rep;
}

TrimResult trim_by_propensity(const Dataset& data, const CenteredData& centered, double lo,
                              double hi) {
  if (centered.e_hat.size() != data.n()) {
    throw UsageError(ErrorCode::InvalidParams, "centering does not match the dataset");
  }
  if (!(lo < hi)) throw UsageError(ErrorCode::InvalidParams, "trim bounds must satisfy lo < hi");
  TrimResult result;
  for (std::size_t i = 0; i < data.n(); ++i) {
    double e = centered.e_hat[i];
    if (e >= lo && e <= hi) result.kept_rows.push_back(static_cast<int>(i));
  }
  result.removed = data.n() - result.kept_rows.size();
  if (result.kept_rows.empty()) {
    throw DataError(ErrorCode::EmptyAfterTrim, "no rows remain inside the trim bounds");
  }
  result.data = subset_rows(data, result.kept_rows);
  return result;
}

PlaceboResult placebo_treatment_test(const Dataset& data, const ForestParams& params, int reps,
                                     std::uint64_t seed) {
  if (reps < 1) throw UsageError(ErrorCode::InvalidParams, "reps must be >= 1");
  validate_for_estimation(data);
  double p_treat = mean(data.W);

  PlaceboResult result;
  result.runs.reserve(reps);
  int rejections = 0;
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(derive_seed(seed, kPlaceboTag, static_cast<std::uint64_t>(rep)));
    Dataset placebo = data;
    placebo.e_oracle.reset();  // the synthetic treatment goes through the estimated path
    // Redraw until both classes appear; a draw with a single class carries no
    // information about the null.
    for (int attempt = 0;; ++attempt) {
      bool any0 = false, any1 = false;
      for (std::size_t i = 0; i < placebo.W.size(); ++i) {
        placebo.W[i] = rng.uniform01() < p_treat ? 1.0 : 0.0;
        (placebo.W[i] > 0.5 ? any1 : any0) = true;
      }
      if (any0 && any1) break;
      if (attempt >= 100) {
        throw DataError(ErrorCode::ZeroTreatmentVariation,
                        "placebo draws produced a single treatment class repeatedly");
      }
    }
    ForestParams rep_params = params;
    rep_params.seed = derive_seed(params.seed, kPlaceboTag, static_cast<std::uint64_t>(rep));
    FalsificationRun run = run_null_pipeline(placebo, rep_params);
    if (run.reject_at_05) rejections++;
    result.runs.push_back(run);
  }
  result.rejection_share = static_cast<double>(rejections) / static_cast<double>(reps);
  return result;
}

FalsificationRun dummy_outcome_test(const Dataset& data, const DummyOutcomeSpec& outcome,
                                    const ForestParams& params, std::uint64_t seed) {
  validate_for_estimation(data);
  Dataset dummy = data;
  if (outcome.random_noise) {
    Rng rng(derive_seed(seed, kDummyTag));
    for (std::size_t i = 0; i < dummy.Y.size(); ++i) dummy.Y[i] = rng.normal();
  } else {
    auto feat = std::find(dummy.feature_names.begin(), dummy.feature_names.end(), outcome.column);
    if (feat != dummy.feature_names.end()) {
      // The dummy outcome must not stay in X, or the outcome model reproduces
      // it exactly and the test trivially passes.
      std::size_t j = static_cast<std::size_t>(feat - dummy.feature_names.begin());
      dummy.Y = std::vector<double>(dummy.X.col(j).begin(), dummy.X.col(j).end());
      Matrix reduced(dummy.X.rows(), dummy.X.cols() - 1);
      std::vector<std::string> names;
      std::size_t out = 0;
      for (std::size_t c = 0; c < dummy.X.cols(); ++c) {
        if (c == j) continue;
        for (std::size_t i = 0; i < dummy.X.rows(); ++i) reduced(i, out) = dummy.X(i, c);
        names.push_back(dummy.feature_names[c]);
        out++;
      }
      dummy.X = std::move(reduced);
      dummy.feature_names = std::move(names);
      if (dummy.X.cols() == 0) {
        throw UsageError(ErrorCode::InvalidParams,
                         "dummy outcome consumed the only covariate");
      }
    } else if (auto it = dummy.extras.find(outcome.column); it != dummy.extras.end()) {
      dummy.Y = it->second;
    } else {
      throw DataError(ErrorCode::MissingColumn, "dummy outcome column '" + outcome.column +
                                                    "' not found");
    }
  }
  ForestParams rep_params = params;
  rep_params.seed = derive_seed(params.seed, kDummyTag, seed);
  return run_null_pipeline(dummy, rep_params);
}

std::vector<TrendPoint> parallel_trends_check(const Forest& forest,
                                              const CenteredData& centered_pre,
                                              const Matrix& x_points) {
  if (forest.kind != ForestKind::Causal) {
    throw UsageError(ErrorCode::InvalidParams, "parallel-trends check needs a causal forest");
  }
  if (centered_pre.y_res.size() != forest.n_rows) {
    throw UsageError(ErrorCode::InvalidParams,
                     "pre-period centering does not match the forest's training rows");
  }
  CausalKernel kernel(forest, centered_pre.y_res, centered_pre.w_res);
  std::vector<TrendPoint> out;
  out.reserve(x_points.rows());
  std::vector<double> row(x_points.cols());
  for (std::size_t i = 0; i < x_points.rows(); ++i) {
    for (std::size_t j = 0; j < x_points.cols(); ++j) row[j] = x_points(i, j);
    TrendPoint pt;
    pt.gap = kernel.point(row);
    pt.se = cate_se_little_bags(kernel, row);
    pt.flagged = std::fabs(pt.gap) > 1.96 * pt.se;
    out.push_back(pt);
  }
  return out;
}

}  // namespace cfkit
