#include "cfkit/presentation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cfkit/errors.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kLeafEps = 1e-12;
}  // namespace

ImportanceVector variable_importance(const Forest& forest, double decay, int max_depth) {
  if (!(decay > 0.0) || max_depth < 1) {
    throw UsageError(ErrorCode::InvalidParams, "importance needs decay > 0 and max_depth >= 1");
  }
  ImportanceVector out;
  out.weights.assign(forest.n_features, 0.0);
  std::vector<std::pair<int, int>> stack;  // node id, depth
  for (const Tree& tree : forest.trees) {
    if (tree.nodes.empty()) continue;
    stack.push_back({0, 0});
    while (!stack.empty()) {
      auto [id, depth] = stack.back();
      stack.pop_back();
      const TreeNode& node = tree.nodes[id];
      if (node.feature < 0) continue;
      if (depth < max_depth) {
        out.weights[node.feature] += std::pow(decay, depth);
        stack.push_back({node.left, depth + 1});
        stack.push_back({node.right, depth + 1});
      }
    }
  }
  double total = std::accumulate(out.weights.begin(), out.weights.end(), 0.0);
  if (total <= 0.0) {
    out.no_splits = true;
    double u = 1.0 / static_cast<double>(forest.n_features);
    std::fill(out.weights.begin(), out.weights.end(), u);
  } else {
    for (double& w : out.weights) w /= total;
  }
  return out;
}

BasuSelection basu_select(const ImportanceVector& importance) {
  BasuSelection sel;
  double m = mean(importance.weights);
  for (std::size_t j = 0; j < importance.weights.size(); ++j) {
    if (importance.weights[j] > m) sel.features.push_back(static_cast<int>(j));
  }
  if (sel.features.empty()) {
    sel.fallback = true;
    std::size_t best = 0;
    for (std::size_t j = 1; j < importance.weights.size(); ++j) {
      if (importance.weights[j] > importance.weights[best]) best = j;
    }
    sel.features.push_back(static_cast<int>(best));
  }
  return sel;
}

CateHistogram cate_histogram(std::span<const double> taus, int bins) {
  if (bins < 1 || taus.empty()) {
    throw UsageError(ErrorCode::InvalidParams, "histogram needs bins >= 1 and data");
  }
  auto [lo_it, hi_it] = std::minmax_element(taus.begin(), taus.end());
  double lo = *lo_it, hi = *hi_it;
  CateHistogram h;
  h.edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b) {
    h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / bins;
  }
  h.counts.assign(bins, 0);
  double width = (hi - lo) / bins;
  for (double t : taus) {
    int b = width > 0 ? std::min(bins - 1, static_cast<int>((t - lo) / width)) : 0;
    h.counts[b]++;
  }
  return h;
}

std::vector<RankedRow> ranked_cate_table(std::span<const double> taus,
                                         std::span<const double> ses, double alpha) {
  if (taus.size() != ses.size() || !(alpha > 0.0 && alpha < 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "ranked table needs matching rows, 0 < alpha < 1");
  }
  double z = normal_quantile(1.0 - alpha / 2.0);
  std::vector<int> order(taus.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return taus[a] < taus[b] || (taus[a] == taus[b] && a < b);
  });
  std::vector<RankedRow> rows;
  rows.reserve(taus.size());
  for (int i : order) {
    RankedRow r;
    r.row = i;
    r.tau = taus[i];
    r.se = ses[i];
    r.ci_lo = taus[i] - z * ses[i];
    r.ci_hi = taus[i] + z * ses[i];
    rows.push_back(r);
  }
  return rows;
}

std::vector<int> assign_quantile_bins(std::span<const double> taus,
                                      std::span<const double> thresholds) {
  std::vector<int> bins(taus.size());
  for (std::size_t i = 0; i < taus.size(); ++i) {
    int b = static_cast<int>(thresholds.size());
    for (std::size_t j = 0; j < thresholds.size(); ++j) {
      if (taus[i] <= thresholds[j]) {
        b = static_cast<int>(j);
        break;
      }
    }
    bins[i] = b;
  }
  return bins;
}

QuantileBinReport quantile_bins(std::span<const double> train_taus,
                                const DrScores& holdout_scores,
                                std::span<const double> holdout_taus, int k) {
  if (k < 2 || train_taus.empty() || holdout_taus.size() != holdout_scores.n()) {
    throw UsageError(ErrorCode::InvalidParams,
                     "quantile bins need k >= 2, train CATEs, and matching holdout rows");
  }
  QuantileBinReport rep;
  std::vector<double> sorted(train_taus.begin(), train_taus.end());
  std::sort(sorted.begin(), sorted.end());
  for (int j = 1; j < k; ++j) {
    rep.thresholds.push_back(quantile_type7(sorted, static_cast<double>(j) / k));
  }

  std::vector<int> assignment = assign_quantile_bins(holdout_taus, rep.thresholds);
  std::vector<std::vector<double>> gamma_by_bin(k);
  for (std::size_t i = 0; i < holdout_taus.size(); ++i) {
    gamma_by_bin[assignment[i]].push_back(holdout_scores.gamma[i]);
  }

  const double inf = std::numeric_limits<double>::infinity();
  for (int b = 0; b < k; ++b) {
    QuantileBin bin;
    bin.lo = b == 0 ? -inf : rep.thresholds[b - 1];
    bin.hi = b == k - 1 ? inf : rep.thresholds[b];
    bin.n = static_cast<int>(gamma_by_bin[b].size());
    if (bin.n == 0) {
      bin.empty = true;
      bin.estimate = kNaN;
      bin.se = kNaN;
    } else {
      bin.estimate = mean(gamma_by_bin[b]);
      bin.se = sd(gamma_by_bin[b]) / std::sqrt(static_cast<double>(bin.n));
    }
    rep.bins.push_back(bin);
  }

  std::vector<double> rest;
  for (int b = 0; b < k - 1; ++b) {
    rest.insert(rest.end(), gamma_by_bin[b].begin(), gamma_by_bin[b].end());
  }
  const auto& top = gamma_by_bin[k - 1];
  if (top.empty() || rest.empty()) {
    rep.top_vs_rest = kNaN;
    rep.top_vs_rest_se = kNaN;
    rep.wald_z = kNaN;
  } else {
    rep.top_vs_rest = mean(top) - mean(rest);
    rep.top_vs_rest_se = std::sqrt(variance(top) / static_cast<double>(top.size()) +
                                   variance(rest) / static_cast<double>(rest.size()));
    rep.wald_z = rep.top_vs_rest_se > 0 ? rep.top_vs_rest / rep.top_vs_rest_se : kNaN;
  }
  return rep;
}

CovariateProfile covariate_profile_by_quantile(const Dataset& data,
                                               std::span<const int> bin_assignment, int k) {
  if (bin_assignment.size() != data.n() || k < 1) {
    throw UsageError(ErrorCode::InvalidParams, "profile needs one bin per row and k >= 1");
  }
  CovariateProfile prof;
  prof.bin_n.assign(k, 0);
  prof.bin_means.assign(k, std::vector<double>(data.p(), 0.0));
  prof.sparse.assign(k, false);
  for (std::size_t i = 0; i < data.n(); ++i) {
    int b = bin_assignment[i];
    if (b < 0 || b >= k) throw UsageError(ErrorCode::InvalidParams, "bin index out of range");
    prof.bin_n[b]++;
    for (std::size_t j = 0; j < data.p(); ++j) prof.bin_means[b][j] += data.X(i, j);
  }
  for (int b = 0; b < k; ++b) {
    if (prof.bin_n[b] < 2) prof.sparse[b] = true;
    if (prof.bin_n[b] > 0) {
      for (double& v : prof.bin_means[b]) v /= static_cast<double>(prof.bin_n[b]);
    }
  }
  return prof;
}

CateCurve cate_by_variable_binned(std::span<const double> taus, std::span<const double> x_col,
                                  int k) {
  if (taus.size() != x_col.size() || taus.empty() || k < 1) {
    throw UsageError(ErrorCode::InvalidParams, "curve needs matching nonempty inputs, k >= 1");
  }
  const std::size_t n = taus.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return x_col[a] < x_col[b] || (x_col[a] == x_col[b] && a < b);
  });

  std::size_t distinct = 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (x_col[order[i]] != x_col[order[i - 1]]) distinct++;
  }

  CateCurve curve;
  auto emit = [&](std::size_t lo, std::size_t hi) {
    std::vector<double> xs, ts;
    for (std::size_t i = lo; i < hi; ++i) {
      xs.push_back(x_col[order[i]]);
      ts.push_back(taus[order[i]]);
    }
    CurvePoint pt;
    pt.x = mean(xs);
    pt.value = mean(ts);
    pt.spread = sd(ts);
    pt.n = static_cast<int>(hi - lo);
    curve.points.push_back(pt);
  };

  if (distinct < static_cast<std::size_t>(k)) {
    // Fewer distinct values than bins: one bin per distinct value.
    curve.bins_merged = true;
    std::size_t start = 0;
    for (std::size_t i = 1; i <= n; ++i) {
      if (i == n || x_col[order[i]] != x_col[order[start]]) {
        emit(start, i);
        start = i;
      }
    }
  } else {
    for (int b = 0; b < k; ++b) {
      std::size_t lo = n * b / k;
      std::size_t hi = n * (b + 1) / k;
      if (hi > lo) emit(lo, hi);
    }
  }
  return curve;
}

CateCurve cate_by_variable_smoothed(std::span<const double> taus,
                                    std::span<const double> x_col, double bandwidth_frac) {
  if (taus.size() != x_col.size() || taus.empty() || !(bandwidth_frac > 0.0)) {
    throw UsageError(ErrorCode::InvalidParams, "smoother needs matching inputs, bandwidth > 0");
  }
  const std::size_t n = taus.size();
  auto [lo_it, hi_it] = std::minmax_element(x_col.begin(), x_col.end());
  double lo = *lo_it, hi = *hi_it;
  double h = bandwidth_frac * (hi - lo);

  CateCurve curve;
  const int n_eval = 50;
  for (int e = 0; e < n_eval; ++e) {
    double x0 = lo + (hi - lo) * static_cast<double>(e) / (n_eval - 1);
    CurvePoint pt;
    pt.x = x0;
    if (h <= 0.0) {
      pt.value = mean(taus);
      pt.n = static_cast<int>(n);
      curve.points.push_back(pt);
      continue;
    }
    double sw = 0, swx = 0, swxx = 0, swy = 0, swxy = 0;
    int used = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double u = std::fabs(x_col[i] - x0) / h;
      if (u >= 1.0) continue;
      double t = 1.0 - u * u * u;
      double w = t * t * t;
      double xc = x_col[i] - x0;
      sw += w;
      swx += w * xc;
      swxx += w * xc * xc;
      swy += w * taus[i];
      swxy += w * xc * taus[i];
      used++;
    }
    if (sw <= 0.0) {
      // Empty window: take the nearest observation.
      std::size_t nearest = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (std::fabs(x_col[i] - x0) < std::fabs(x_col[nearest] - x0)) nearest = i;
      }
      pt.value = taus[nearest];
      pt.n = 1;
    } else {
      double det = sw * swxx - swx * swx;
      // Intercept of the weighted local line at x0; a collapsed design falls
      // back to the weighted mean.
      pt.value = std::fabs(det) > 1e-300 ? (swxx * swy - swx * swxy) / det : swy / sw;
      pt.n = used;
    }
    curve.points.push_back(pt);
  }
  return curve;
}

std::vector<GroupCate> group_cates(const DrScores& scores,
                                   const std::vector<std::string>& groups) {
  if (groups.size() != scores.n()) {
    throw UsageError(ErrorCode::InvalidParams, "one group label per score required");
  }
  std::vector<GroupCate> out;
  std::vector<std::vector<double>> members;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::size_t g = 0;
    for (; g < out.size(); ++g) {
      if (out[g].label == groups[i]) break;
    }
    if (g == out.size()) {
      out.push_back({groups[i], 0, 0.0, 0.0, false});
      members.emplace_back();
    }
    members[g].push_back(scores.gamma[i]);
  }
  for (std::size_t g = 0; g < out.size(); ++g) {
    out[g].n = static_cast<int>(members[g].size());
    out[g].estimate = mean(members[g]);
    if (out[g].n < 2) {
      out[g].se = kNaN;
      out[g].flagged = true;
    } else {
      out[g].se = sd(members[g]) / std::sqrt(static_cast<double>(out[g].n));
    }
  }
  return out;
}

BestTree best_tree(const Forest& forest, const CenteredData& centered, const Matrix& X) {
  if (forest.kind != ForestKind::Causal || forest.trees.empty()) {
    throw UsageError(ErrorCode::InvalidParams, "tree selection needs a fitted causal forest");
  }
  if (X.rows() != forest.n_rows || centered.y_res.size() != forest.n_rows) {
    throw UsageError(ErrorCode::InvalidParams, "tree selection needs the training data");
  }
  BestTree best;
  best.index = -1;
  std::vector<double> row(X.cols());
  std::vector<double> leaf_tau;
  for (std::size_t b = 0; b < forest.trees.size(); ++b) {
    const Tree& tree = forest.trees[b];
    leaf_tau.assign(tree.nodes.size(), 0.0);
    for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
      const TreeNode& node = tree.nodes[id];
      if (node.feature >= 0) continue;
      double syw = 0, sww = 0;
      for (int r : node.rows) {
        syw += centered.y_res[r] * centered.w_res[r];
        sww += centered.w_res[r] * centered.w_res[r];
      }
      leaf_tau[id] = sww > kLeafEps ? syw / sww : 0.0;
    }
    double loss = 0.0;
    std::size_t next = 0;  // cursor into the sorted subsample
    for (std::size_t i = 0; i < forest.n_rows; ++i) {
      int ri = static_cast<int>(i);
      while (next < tree.subsample.size() && tree.subsample[next] < ri) next++;
      if (next < tree.subsample.size() && tree.subsample[next] == ri) continue;
      for (std::size_t j = 0; j < X.cols(); ++j) row[j] = X(i, j);
      double tau = leaf_tau[tree.locate(row.data())];
      double resid = centered.y_res[i] - tau * centered.w_res[i];
      loss += resid * resid;
    }
    if (best.index < 0 || loss < best.r_loss) {
      best.index = static_cast<int>(b);
      best.r_loss = loss;
    }
  }
  return best;
}

std::vector<int> derive_policy(std::span<const double> taus, double threshold) {
  std::vector<int> policy(taus.size());
  for (std::size_t i = 0; i < taus.size(); ++i) policy[i] = taus[i] >= threshold ? 1 : 0;
  return policy;
}

PolicyValue policy_value(std::span<const int> policy, const DrScores& scores_holdout,
                         PolicyBaseline baseline, const Priority& priority) {
  const std::size_t n = scores_holdout.n();
  if (policy.size() != n || priority.values.size() != n || n == 0) {
    throw UsageError(ErrorCode::InvalidParams, "policy, scores, and priority must share rows");
  }
  if (priority.provenance != 0 && priority.provenance == scores_holdout.provenance) {
    throw DataError(ErrorCode::NotHeldOut,
                    "policy evaluation scores come from the same fit that produced the policy; "
                    "use held-out rows");
  }
  double base = baseline == PolicyBaseline::TreatAll ? 1.0 : 0.0;
  std::vector<double> contrib(n);
  for (std::size_t i = 0; i < n; ++i) {
    contrib[i] = (static_cast<double>(policy[i]) - base) * scores_holdout.gamma[i];
  }
  PolicyValue out;
  out.value = mean(contrib);
  out.se = sd(contrib) / std::sqrt(static_cast<double>(n));

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return priority.values[a] > priority.values[b] ||
           (priority.values[a] == priority.values[b] && a < b);
  });
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) cum[i + 1] = cum[i] + scores_holdout.gamma[order[i]];
  for (int j = 1; j <= 100; ++j) {
    double p = static_cast<double>(j) / 100.0;
    std::size_t k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(p * static_cast<double>(n) + 1e-9)));
    if (k > n) k = n;
    out.qini_p.push_back(p);
    out.qini_value.push_back(cum[k] / static_cast<double>(k));
  }
  return out;
}

}  // namespace cfkit
