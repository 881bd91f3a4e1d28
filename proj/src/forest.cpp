#include "cfkit/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>

#include <nlohmann/json.hpp>

#include "cfkit/errors.hpp"
#include "cfkit/random.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {

constexpr std::uint64_t kGroupTag = 1;
constexpr std::uint64_t kTreeTag = 2;
constexpr std::uint64_t kTuneDrawTag = 3;
constexpr std::uint64_t kTuneFitTag = 4;

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

}  // namespace

void validate_params(const ForestParams& params, std::size_t p) {
  if (params.num_trees < 1) {
    throw UsageError(ErrorCode::InvalidParams, "num_trees must be positive");
  }
  if (params.ci_group_size < 1) {
    throw UsageError(ErrorCode::InvalidParams, "ci_group_size must be positive");
  }
  if (params.num_trees % params.ci_group_size != 0) {
    throw UsageError(ErrorCode::InvalidParams,
                     "num_trees (" + std::to_string(params.num_trees) +
                         ") must be a multiple of ci_group_size (" +
                         std::to_string(params.ci_group_size) + ")");
  }
  if (!(params.sample_fraction > 0.0 && params.sample_fraction <= 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "sample_fraction must lie in (0,1]");
  }
  if (!(params.honesty_fraction > 0.0 && params.honesty_fraction < 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "honesty_fraction must lie in (0,1)");
  }
  if (params.min_node_size < 1) {
    throw UsageError(ErrorCode::InvalidParams, "min_node_size must be positive");
  }
  if (params.mtry < 0 || (params.mtry > 0 && static_cast<std::size_t>(params.mtry) > p)) {
    throw UsageError(ErrorCode::InvalidParams, "mtry must lie in [1, p]");
  }
}

int resolve_mtry(const ForestParams& params, std::size_t p) {
  if (params.mtry > 0) return params.mtry;
  int def = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p)) + 20.0));
  return std::min(static_cast<int>(p), def);
}

bool Tree::contains(int row) const {
  return std::binary_search(subsample.begin(), subsample.end(), row);
}

namespace {

// Scratch state reused across trees of one forest.
struct GrowBuffers {
  std::vector<int> feat_idx;      // mtry-agnostic: p segments of split-half rows, each sorted by feature
  std::vector<int> left_buf, right_buf;
  std::vector<std::uint8_t> in_split;  // size n
  std::vector<std::uint8_t> go_left;   // size n
  std::vector<int> feature_pool;
};

struct NodeTask {
  int id;
  int lo, hi;  // range into each feature segment
};

struct GrowContext {
  ForestKind kind;
  const Matrix& X;
  std::span<const double> y;   // regression target or y_res
  std::span<const double> yw;  // causal: y_res * w_res
  std::span<const double> ww;  // causal: w_res^2
  std::span<const double> w;   // causal: w_res
  int mtry;
  int min_node_size;
  int sign_min;  // causal: per-child minimum count of each treatment-residual sign
  const std::vector<std::vector<int>>& presorted;
};

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double score = -kInf;
};

// Candidates whose scores agree to this relative tolerance count as tied and
// keep the incumbent. Different features often induce the same row partition
// in small nodes; their scores are equal in real arithmetic but accumulate in
// different orders, and without the band the winner would flip under outcome
// rescaling.
constexpr double kSplitTieRel = 1e-9;

inline bool beats(double score, double incumbent) {
  return score > incumbent * (1.0 + kSplitTieRel);
}

// Scans one feature's sorted segment; candidate thresholds are midpoints of
// consecutive distinct values. Returns the best strictly-improving candidate
// for this feature (caller keeps the first feature achieving the max, so ties
// resolve to the lowest feature index, then the lowest threshold).
void scan_feature_causal(const GrowContext& ctx, const int* idx, int n_node, int feature,
                         double node_syw, double node_sww, int node_pos, int node_neg,
                         SplitChoice& best) {
  const double* xv = ctx.X.col(feature).data();
  double syw_l = 0, sww_l = 0;
  int pos_l = 0, neg_l = 0;
  for (int k = 0; k + 1 < n_node; ++k) {
    int i = idx[k];
    syw_l += ctx.yw[i];
    sww_l += ctx.ww[i];
    pos_l += ctx.w[i] > 0.0;
    neg_l += ctx.w[i] < 0.0;
    double xl = xv[i];
    double xr = xv[idx[k + 1]];
    if (!(xr > xl)) continue;
    int cnt_l = k + 1;
    int cnt_r = n_node - cnt_l;
    if (cnt_l < ctx.min_node_size || cnt_r < ctx.min_node_size) continue;
    if (pos_l < ctx.sign_min || neg_l < ctx.sign_min) continue;
    if (node_pos - pos_l < ctx.sign_min || node_neg - neg_l < ctx.sign_min) continue;
    double sww_r = node_sww - sww_l;
    if (sww_l <= 1e-12 || sww_r <= 1e-12) continue;
    double tau_l = syw_l / sww_l;
    double tau_r = (node_syw - syw_l) / sww_r;
    double score = cnt_l * tau_l * tau_l + cnt_r * tau_r * tau_r;
    if (beats(score, best.score)) {
      best.found = true;
      best.feature = feature;
      best.threshold = xl + 0.5 * (xr - xl);
      best.score = score;
    }
  }
}

void scan_feature_regression(const GrowContext& ctx, const int* idx, int n_node, int feature,
                             double node_sum, SplitChoice& best) {
  const double* xv = ctx.X.col(feature).data();
  double sum_l = 0;
  for (int k = 0; k + 1 < n_node; ++k) {
    int i = idx[k];
    sum_l += ctx.y[i];
    double xl = xv[i];
    double xr = xv[idx[k + 1]];
    if (!(xr > xl)) continue;
    int cnt_l = k + 1;
    int cnt_r = n_node - cnt_l;
    if (cnt_l < ctx.min_node_size || cnt_r < ctx.min_node_size) continue;
    double sum_r = node_sum - sum_l;
    double score = sum_l * sum_l / cnt_l + sum_r * sum_r / cnt_r;
    if (beats(score, best.score)) {
      best.found = true;
      best.feature = feature;
      best.threshold = xl + 0.5 * (xr - xl);
      best.score = score;
    }
  }
}

void grow_tree(const GrowContext& ctx, Tree& tree, const std::vector<int>& subsample,
               double honesty_fraction, Rng& rng, GrowBuffers& buf) {
  const std::size_t n = ctx.X.rows();
  const std::size_t p = ctx.X.cols();
  const int s_sub = static_cast<int>(subsample.size());

  tree.subsample = subsample;
  std::vector<int> order = subsample;
  rng.shuffle(order);
  int s_split = static_cast<int>(std::floor(honesty_fraction * s_sub + 0.5));
  s_split = std::clamp(s_split, 1, s_sub - 1);
  tree.estimate_half.assign(order.begin() + s_split, order.end());
  std::sort(tree.estimate_half.begin(), tree.estimate_half.end());

  for (int k = 0; k < s_split; ++k) buf.in_split[order[k]] = 1;

  // Split-half rows per feature in ascending feature order, preserving the
  // forest-level presort.
  buf.feat_idx.resize(p * s_split);
  for (std::size_t j = 0; j < p; ++j) {
    int* seg = buf.feat_idx.data() + j * s_split;
    int k = 0;
    for (int i : ctx.presorted[j]) {
      if (buf.in_split[i]) seg[k++] = i;
    }
  }
  buf.left_buf.resize(s_split);
  buf.right_buf.resize(s_split);
  if (buf.go_left.size() != n) buf.go_left.assign(n, 0);
  buf.feature_pool.resize(p);

  tree.nodes.clear();
  tree.nodes.emplace_back();
  std::vector<NodeTask> stack;
  stack.push_back({0, 0, s_split});

  while (!stack.empty()) {
    NodeTask task = stack.back();
    stack.pop_back();
    const int n_node = task.hi - task.lo;

    // Node-level sums from the first feature's segment (all segments hold the
    // same row set).
    const int* rows0 = buf.feat_idx.data() + task.lo;
    double parent_score;
    double node_syw = 0, node_sww = 0, node_sum = 0;
    int node_pos = 0, node_neg = 0;
    if (ctx.kind == ForestKind::Causal) {
      for (int k = 0; k < n_node; ++k) {
        int i = rows0[k];
        node_syw += ctx.yw[i];
        node_sww += ctx.ww[i];
        node_pos += ctx.w[i] > 0.0;
        node_neg += ctx.w[i] < 0.0;
      }
      if (node_sww <= 1e-12) continue;  // no identifiable effect in this node
      double tau = node_syw / node_sww;
      parent_score = n_node * tau * tau;
    } else {
      for (int k = 0; k < n_node; ++k) node_sum += ctx.y[rows0[k]];
      parent_score = node_sum * node_sum / n_node;
    }
    if (n_node < 2 * ctx.min_node_size) continue;

    // mtry candidate features, drawn without replacement, scanned in
    // ascending index order so ties go to the lowest feature.
    for (std::size_t j = 0; j < p; ++j) buf.feature_pool[j] = static_cast<int>(j);
    int m = std::min<int>(ctx.mtry, static_cast<int>(p));
    for (int k = 0; k < m; ++k) {
      std::size_t j = k + rng.uniform_index(p - k);
      std::swap(buf.feature_pool[k], buf.feature_pool[j]);
    }
    std::sort(buf.feature_pool.begin(), buf.feature_pool.begin() + m);

    SplitChoice best;
    best.score = parent_score;  // require strict improvement
    for (int k = 0; k < m; ++k) {
      int feature = buf.feature_pool[k];
      const int* idx =
          buf.feat_idx.data() + static_cast<std::size_t>(feature) * s_split + task.lo;
      if (ctx.kind == ForestKind::Causal) {
        scan_feature_causal(ctx, idx, n_node, feature, node_syw, node_sww, node_pos, node_neg, best);
      } else {
        scan_feature_regression(ctx, idx, n_node, feature, node_sum, best);
      }
    }
    if (!best.found) continue;

    // Partition every feature segment stably by the chosen split.
    const double* xbest = ctx.X.col(best.feature).data();
    for (int k = 0; k < n_node; ++k) {
      int i = rows0[k];
      buf.go_left[i] = xbest[i] <= best.threshold;
    }
    int n_left = 0;
    for (std::size_t j = 0; j < p; ++j) {
      int* seg = buf.feat_idx.data() + j * static_cast<std::size_t>(s_split);
      int nl = 0, nr = 0;
      for (int k = task.lo; k < task.hi; ++k) {
        int i = seg[k];
        if (buf.go_left[i]) {
          buf.left_buf[nl++] = i;
        } else {
          buf.right_buf[nr++] = i;
        }
      }
      std::copy(buf.left_buf.begin(), buf.left_buf.begin() + nl, seg + task.lo);
      std::copy(buf.right_buf.begin(), buf.right_buf.begin() + nr, seg + task.lo + nl);
      n_left = nl;
    }

    int left_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    TreeNode& nd = tree.nodes[task.id];  // re-reference: vector may have reallocated
    nd.feature = best.feature;
    nd.threshold = best.threshold;
    nd.left = left_id;
    nd.right = left_id + 1;
    stack.push_back({left_id + 1, task.lo + n_left, task.hi});
    stack.push_back({left_id, task.lo, task.lo + n_left});
  }

  // Honesty: route estimate-half rows through the grown structure.
  for (int r : tree.estimate_half) {
    int id = 0;
    while (tree.nodes[id].feature >= 0) {
      id = ctx.X(r, tree.nodes[id].feature) <= tree.nodes[id].threshold ? tree.nodes[id].left
                                                                        : tree.nodes[id].right;
    }
    tree.nodes[id].rows.push_back(r);
  }

  // Drop leaves that received no estimate-half rows, collapsing their parents,
  // so every surviving leaf is nonempty.
  std::function<int(int)> prune = [&](int id) -> int {
    TreeNode& nd = tree.nodes[id];
    if (nd.feature < 0) return nd.rows.empty() ? -1 : id;
    int l = prune(nd.left);
    int r = prune(nd.right);
    if (l < 0 && r < 0) return -1;
    if (l < 0) return r;
    if (r < 0) return l;
    nd.left = l;
    nd.right = r;
    return id;
  };
  int root = prune(0);
  if (root < 0) {
    throw DataError(ErrorCode::InsufficientData, "tree has no estimate-half rows in any leaf");
  }

  // Compact to preorder over surviving nodes.
  struct CompactTask {
    int old_id;
    int parent_new;  // -1 for the root
    int slot;        // 0 = left child of parent, 1 = right child
  };
  std::vector<TreeNode> compact;
  compact.reserve(tree.nodes.size());
  std::vector<CompactTask> cstack;
  cstack.push_back({root, -1, 0});
  while (!cstack.empty()) {
    CompactTask t = cstack.back();
    cstack.pop_back();
    int new_id = static_cast<int>(compact.size());
    int old_left = tree.nodes[t.old_id].left;
    int old_right = tree.nodes[t.old_id].right;
    compact.push_back(std::move(tree.nodes[t.old_id]));
    if (t.parent_new >= 0) {
      if (t.slot == 0) {
        compact[t.parent_new].left = new_id;
      } else {
        compact[t.parent_new].right = new_id;
      }
    }
    if (compact[new_id].feature >= 0) {
      cstack.push_back({old_right, new_id, 1});
      cstack.push_back({old_left, new_id, 0});
    }
  }
  tree.nodes = std::move(compact);

  if (ctx.kind == ForestKind::Regression) {
    for (auto& nd : tree.nodes) {
      if (nd.feature >= 0) continue;
      double s = 0;
      for (int r : nd.rows) s += ctx.y[r];
      nd.value = s / static_cast<double>(nd.rows.size());
    }
  }

  for (int i : subsample) buf.in_split[i] = 0;
}

Forest grow_impl(ForestKind kind, const Matrix& X, std::span<const double> y,
                 std::span<const double> w_res, const ForestParams& params) {
  const std::size_t n = X.rows();
  const std::size_t p = X.cols();
  validate_params(params, p);
  if (p < 1) throw UsageError(ErrorCode::InvalidParams, "X must have at least one column");
  if (y.size() != n || (kind == ForestKind::Causal && w_res.size() != n)) {
    throw UsageError(ErrorCode::InvalidParams, "target length must match X rows");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(y[i]) || (kind == ForestKind::Causal && !std::isfinite(w_res[i]))) {
      throw DataError(ErrorCode::NonFiniteValue,
                      "non-finite target at row " + std::to_string(i + 1));
    }
  }
  if (n < 2 || n < 2 * static_cast<std::size_t>(params.min_node_size)) {
    throw DataError(ErrorCode::InsufficientData,
                    "need at least max(2, 2*min_node_size) rows to fit");
  }
  int s_sub = static_cast<int>(std::floor(params.sample_fraction * static_cast<double>(n) + 0.5));
  if (s_sub < 2) {
    throw DataError(ErrorCode::InsufficientData, "subsample would hold fewer than 2 rows");
  }
  s_sub = std::min<int>(s_sub, static_cast<int>(n));

  if (kind == ForestKind::Causal) {
    double lo = w_res[0], hi = w_res[0];
    for (double v : w_res) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo <= 1e-12) {
      throw DataError(ErrorCode::ZeroTreatmentVariation,
                      "treatment residuals are numerically constant");
    }
  }

  Forest forest;
  forest.kind = kind;
  forest.params = params;
  forest.n_rows = n;
  forest.n_features = p;
  {
    std::uint64_t h = fnv1a(X.data().data(), X.data().size() * sizeof(double));
    h = fnv1a(&n, sizeof(n), h);
    h = fnv1a(&p, sizeof(p), h);
    forest.data_fingerprint = h;
  }

  // Presort each feature once; ties break by row id so the order is total.
  std::vector<std::vector<int>> presorted(p);
  for (std::size_t j = 0; j < p; ++j) {
    auto col = X.col(j);
    auto& ord = presorted[j];
    ord.resize(n);
    for (std::size_t i = 0; i < n; ++i) ord[i] = static_cast<int>(i);
    std::sort(ord.begin(), ord.end(), [&](int a, int b) {
      return col[a] < col[b] || (col[a] == col[b] && a < b);
    });
  }

  std::vector<double> yw, ww;
  if (kind == ForestKind::Causal) {
    yw.resize(n);
    ww.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      yw[i] = y[i] * w_res[i];
      ww[i] = w_res[i] * w_res[i];
    }
  }

  GrowContext ctx{kind, X, y, yw, ww, w_res, resolve_mtry(params, p), params.min_node_size,
                  std::max(2, params.min_node_size / 2), presorted};

  forest.trees.resize(params.num_trees);
  GrowBuffers buf;
  buf.in_split.assign(n, 0);
  buf.go_left.assign(n, 0);
  const int groups = params.num_trees / params.ci_group_size;
  for (int g = 0; g < groups; ++g) {
    // One subsample per little bag; every tree in the bag shares it and
    // redraws only its honest split. Streams are derived from (seed, index)
    // so results do not depend on evaluation order.
    Rng group_rng(derive_seed(params.seed, kGroupTag, static_cast<std::uint64_t>(g)));
    std::vector<int> subsample = group_rng.sample_without_replacement(static_cast<int>(n), s_sub);
    for (int t = 0; t < params.ci_group_size; ++t) {
      int tree_idx = g * params.ci_group_size + t;
      Rng tree_rng(derive_seed(params.seed, kTreeTag, static_cast<std::uint64_t>(tree_idx)));
      grow_tree(ctx, forest.trees[tree_idx], subsample, params.honesty_fraction, tree_rng, buf);
    }
  }
  return forest;
}

}  // namespace

Forest grow_regression_forest(const Matrix& X, std::span<const double> target,
                              const ForestParams& params) {
  return grow_impl(ForestKind::Regression, X, target, {}, params);
}

Forest grow_causal_forest(const Matrix& X, std::span<const double> y_res,
                          std::span<const double> w_res, const ForestParams& params) {
  return grow_impl(ForestKind::Causal, X, y_res, w_res, params);
}

std::vector<double> kernel_weights(const Forest& forest, std::span<const double> x,
                                   std::optional<int> exclude_for) {
  if (x.size() != forest.n_features) {
    throw UsageError(ErrorCode::InvalidParams, "query point dimension mismatch");
  }
  std::vector<double> weights(forest.n_rows, 0.0);
  int eligible = 0;
  for (const Tree& tree : forest.trees) {
    if (exclude_for && tree.contains(*exclude_for)) continue;
    ++eligible;
    const TreeNode& leaf = tree.nodes[tree.locate(x)];
    double share = 1.0 / static_cast<double>(leaf.rows.size());
    for (int r : leaf.rows) weights[r] += share;
  }
  if (eligible == 0) {
    throw NumericError(ErrorCode::NoEligibleTrees, "every tree contains the excluded row");
  }
  double inv = 1.0 / static_cast<double>(eligible);
  for (double& w : weights) w *= inv;
  return weights;
}

OobPrediction predict_oob(const Forest& forest, const Matrix& X) {
  if (forest.kind != ForestKind::Regression) {
    throw UsageError(ErrorCode::InvalidParams, "predict_oob expects a regression forest");
  }
  if (X.rows() != forest.n_rows || X.cols() != forest.n_features) {
    throw UsageError(ErrorCode::InvalidParams, "predict_oob expects the training matrix");
  }
  const std::size_t n = X.rows();
  OobPrediction out;
  out.values.assign(n, 0.0);
  std::vector<int> counts(n, 0);
  std::vector<std::uint8_t> in_tree(n, 0);
  for (const Tree& tree : forest.trees) {
    for (int i : tree.subsample) in_tree[i] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (in_tree[i]) continue;
      int id = 0;
      while (tree.nodes[id].feature >= 0) {
        id = X(i, tree.nodes[id].feature) <= tree.nodes[id].threshold ? tree.nodes[id].left
                                                                      : tree.nodes[id].right;
      }
      out.values[i] += tree.nodes[id].value;
      ++counts[i];
    }
    for (int i : tree.subsample) in_tree[i] = 0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[i] == 0) {
      out.values[i] = kNaN;
      out.missing_rows.push_back(static_cast<int>(i));
    } else {
      out.values[i] /= counts[i];
    }
  }
  return out;
}

std::vector<double> predict(const Forest& forest, const Matrix& X) {
  if (forest.kind != ForestKind::Regression) {
    throw UsageError(ErrorCode::InvalidParams, "predict expects a regression forest");
  }
  if (X.cols() != forest.n_features) {
    throw UsageError(ErrorCode::InvalidParams, "prediction matrix dimension mismatch");
  }
  std::vector<double> out(X.rows(), 0.0);
  for (const Tree& tree : forest.trees) {
    for (std::size_t i = 0; i < X.rows(); ++i) {
      int id = 0;
      while (tree.nodes[id].feature >= 0) {
        id = X(i, tree.nodes[id].feature) <= tree.nodes[id].threshold ? tree.nodes[id].left
                                                                      : tree.nodes[id].right;
      }
      out[i] += tree.nodes[id].value;
    }
  }
  for (double& v : out) v /= static_cast<double>(forest.trees.size());
  return out;
}

CausalKernel::CausalKernel(const Forest& forest, std::span<const double> y_res,
                           std::span<const double> w_res)
    : forest_(forest), y_res_(y_res), w_res_(w_res) {
  if (forest.kind != ForestKind::Causal) {
    throw UsageError(ErrorCode::InvalidParams, "causal kernel requires a causal forest");
  }
  if (y_res.size() != forest.n_rows || w_res.size() != forest.n_rows) {
    throw UsageError(ErrorCode::InvalidParams, "residual length must match the fitted forest");
  }
  stats_.resize(forest.trees.size());
  for (std::size_t t = 0; t < forest.trees.size(); ++t) {
    const Tree& tree = forest.trees[t];
    stats_[t].resize(tree.nodes.size());
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
      const TreeNode& nd = tree.nodes[k];
      if (nd.feature >= 0) continue;
      LeafStat& st = stats_[t][k];
      for (int r : nd.rows) {
        st.syw += y_res[r] * w_res[r];
        st.sww += w_res[r] * w_res[r];
      }
    }
  }
}

double CausalKernel::point(std::span<const double> x, std::optional<int> exclude_for) const {
  double num = 0, den = 0;
  int eligible = 0;
  for (std::size_t t = 0; t < forest_.trees.size(); ++t) {
    const Tree& tree = forest_.trees[t];
    if (exclude_for && tree.contains(*exclude_for)) continue;
    ++eligible;
    int leaf = tree.locate(x);
    double cnt = static_cast<double>(tree.nodes[leaf].rows.size());
    num += stats_[t][leaf].syw / cnt;
    den += stats_[t][leaf].sww / cnt;
  }
  if (eligible == 0) {
    throw NumericError(ErrorCode::NoEligibleTrees, "every tree contains the excluded row");
  }
  if (den / eligible < kDegenerateKernelEps) {
    throw NumericError(ErrorCode::DegenerateKernel,
                       "kernel-weighted treatment variation below threshold");
  }
  return num / den;
}

CausalKernel::OobResult CausalKernel::oob_all(const Matrix& X) const {
  if (X.rows() != forest_.n_rows || X.cols() != forest_.n_features) {
    throw UsageError(ErrorCode::InvalidParams, "oob estimates expect the training matrix");
  }
  const std::size_t n = X.rows();
  std::vector<double> num(n, 0.0), den(n, 0.0);
  std::vector<int> counts(n, 0);
  std::vector<std::uint8_t> in_tree(n, 0);
  for (std::size_t t = 0; t < forest_.trees.size(); ++t) {
    const Tree& tree = forest_.trees[t];
    for (int i : tree.subsample) in_tree[i] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      if (in_tree[i]) continue;
      int id = 0;
      while (tree.nodes[id].feature >= 0) {
        id = X(i, tree.nodes[id].feature) <= tree.nodes[id].threshold ? tree.nodes[id].left
                                                                      : tree.nodes[id].right;
      }
      double cnt = static_cast<double>(tree.nodes[id].rows.size());
      num[i] += stats_[t][id].syw / cnt;
      den[i] += stats_[t][id].sww / cnt;
      ++counts[i];
    }
    for (int i : tree.subsample) in_tree[i] = 0;
  }
  OobResult out;
  out.tau.assign(n, kNaN);
  for (std::size_t i = 0; i < n; ++i) {
    if (counts[i] == 0) {
      out.no_tree_rows.push_back(static_cast<int>(i));
    } else if (den[i] / counts[i] < kDegenerateKernelEps) {
      out.degenerate_rows.push_back(static_cast<int>(i));
    } else {
      out.tau[i] = num[i] / den[i];
    }
  }
  return out;
}

std::vector<double> CausalKernel::tree_estimates(std::span<const double> x) const {
  std::vector<double> out(forest_.trees.size(), kNaN);
  for (std::size_t t = 0; t < forest_.trees.size(); ++t) {
    const Tree& tree = forest_.trees[t];
    int leaf = tree.locate(x);
    double cnt = static_cast<double>(tree.nodes[leaf].rows.size());
    double den = stats_[t][leaf].sww / cnt;
    if (den < kDegenerateKernelEps) continue;
    out[t] = (stats_[t][leaf].syw / cnt) / den;
  }
  return out;
}

std::vector<double> CausalKernel::group_estimates(std::span<const double> x) const {
  const int ell = forest_.params.ci_group_size;
  const int groups = forest_.num_groups();
  std::vector<double> out(groups, kNaN);
  for (int g = 0; g < groups; ++g) {
    double num = 0, den = 0;
    for (int t = g * ell; t < (g + 1) * ell; ++t) {
      const Tree& tree = forest_.trees[t];
      int leaf = tree.locate(x);
      double cnt = static_cast<double>(tree.nodes[leaf].rows.size());
      num += stats_[t][leaf].syw / cnt;
      den += stats_[t][leaf].sww / cnt;
    }
    if (den / ell < kDegenerateKernelEps) continue;
    out[g] = num / den;
  }
  return out;
}

double excess_error(const Forest& forest, std::span<const double> y_res,
                    std::span<const double> w_res, std::span<const double> x) {
  return excess_error(CausalKernel(forest, y_res, w_res), x);
}

double excess_error(const CausalKernel& kernel, std::span<const double> x) {
  std::vector<double> groups = kernel.group_estimates(x);
  std::vector<double> good;
  good.reserve(groups.size());
  for (double g : groups) {
    if (std::isfinite(g)) good.push_back(g);
  }
  if (good.size() < 2) return 0.0;
  return variance(good) / static_cast<double>(good.size());
}

namespace {

nlohmann::json params_to_json(const ForestParams& p) {
  return {{"num_trees", p.num_trees},
          {"sample_fraction", p.sample_fraction},
          {"honesty_fraction", p.honesty_fraction},
          {"mtry", p.mtry},
          {"min_node_size", p.min_node_size},
          {"ci_group_size", p.ci_group_size},
          {"seed", p.seed}};
}

ForestParams params_from_json(const nlohmann::json& j) {
  ForestParams p;
  p.num_trees = j.at("num_trees").get<int>();
  p.sample_fraction = j.at("sample_fraction").get<double>();
  p.honesty_fraction = j.at("honesty_fraction").get<double>();
  p.mtry = j.at("mtry").get<int>();
  p.min_node_size = j.at("min_node_size").get<int>();
  p.ci_group_size = j.at("ci_group_size").get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

constexpr int kFormatVersion = 1;

}  // namespace

void save_forest(const Forest& forest, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = kFormatVersion;
  j["kind"] = forest.kind == ForestKind::Causal ? "causal" : "regression";
  j["params"] = params_to_json(forest.params);
  j["n_rows"] = forest.n_rows;
  j["n_features"] = forest.n_features;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(forest.data_fingerprint));
    j["data_fingerprint"] = buf;
  }
  nlohmann::json trees = nlohmann::json::array();
  for (const Tree& tree : forest.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& nd : tree.nodes) {
      if (nd.feature >= 0) {
        nodes.push_back({{"f", nd.feature}, {"t", nd.threshold}, {"l", nd.left}, {"r", nd.right}});
      } else if (forest.kind == ForestKind::Regression) {
        nodes.push_back({{"rows", nd.rows}, {"v", nd.value}});
      } else {
        nodes.push_back({{"rows", nd.rows}});
      }
    }
    trees.push_back({{"subsample", tree.subsample},
                     {"estimate_half", tree.estimate_half},
                     {"nodes", std::move(nodes)}});
  }
  j["trees"] = std::move(trees);
  std::ofstream out(path);
  if (!out) throw DataError(ErrorCode::EmptyFile, "cannot write " + path);
  out << j.dump() << '\n';
}

Forest load_forest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(ErrorCode::EmptyFile, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(ErrorCode::BadFormatVersion,
                     std::string("cannot parse forest file: ") + e.what());
  }
  if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion) {
    throw UsageError(ErrorCode::BadFormatVersion,
                    "unsupported forest format_version; expected " + std::to_string(kFormatVersion));
  }
  Forest forest;
  forest.kind = j.at("kind").get<std::string>() == "causal" ? ForestKind::Causal
                                                            : ForestKind::Regression;
  forest.params = params_from_json(j.at("params"));
  forest.n_rows = j.at("n_rows").get<std::size_t>();
  forest.n_features = j.at("n_features").get<std::size_t>();
  forest.data_fingerprint =
      std::stoull(j.at("data_fingerprint").get<std::string>(), nullptr, 16);
  for (const auto& jt : j.at("trees")) {
    Tree tree;
    tree.subsample = jt.at("subsample").get<std::vector<int>>();
    tree.estimate_half = jt.at("estimate_half").get<std::vector<int>>();
    for (const auto& jn : jt.at("nodes")) {
      TreeNode nd;
      if (jn.contains("f")) {
        nd.feature = jn.at("f").get<int>();
        nd.threshold = jn.at("t").get<double>();
        nd.left = jn.at("l").get<int>();
        nd.right = jn.at("r").get<int>();
      } else {
        nd.rows = jn.at("rows").get<std::vector<int>>();
        if (jn.contains("v")) nd.value = jn.at("v").get<double>();
      }
      tree.nodes.push_back(std::move(nd));
    }
    forest.trees.push_back(std::move(tree));
  }
  return forest;
}

TuneResult tune_params(const Matrix& X, std::span<const double> y_res,
                       std::span<const double> w_res, const ForestParams& base,
                       const TuneSearchSpace& space, int budget, std::uint64_t seed) {
  validate_params(base, X.cols());
  if (budget < 1) throw UsageError(ErrorCode::InvalidParams, "tuning budget must be positive");
  const int p = static_cast<int>(X.cols());
  const int mtry_hi = space.mtry_hi > 0 ? std::min(space.mtry_hi, p) : p;
  const int mtry_lo = std::clamp(space.mtry_lo, 1, mtry_hi);

  int nt = std::max(200, base.num_trees / 10);
  nt = ((nt + base.ci_group_size - 1) / base.ci_group_size) * base.ci_group_size;
  const std::uint64_t fit_seed = derive_seed(seed, kTuneFitTag);

  Rng rng(derive_seed(seed, kTuneDrawTag));
  TuneResult result;
  result.best = base;
  double best_score = kInf;
  bool any_feasible = false;

  for (int c = 0; c < budget; ++c) {
    ForestParams cand = base;
    double lg = std::log(static_cast<double>(space.min_node_size_lo));
    double hg = std::log(static_cast<double>(space.min_node_size_hi) + 1.0);
    cand.min_node_size = std::clamp(
        static_cast<int>(std::floor(std::exp(rng.uniform(lg, hg)))), space.min_node_size_lo,
        space.min_node_size_hi);
    cand.sample_fraction = rng.uniform(space.sample_fraction_lo, space.sample_fraction_hi);
    cand.honesty_fraction = rng.uniform(space.honesty_fraction_lo, space.honesty_fraction_hi);
    cand.mtry = mtry_lo + static_cast<int>(rng.uniform_index(mtry_hi - mtry_lo + 1));
    cand.num_trees = nt;
    cand.seed = fit_seed;

    double score = kInf;
    try {
      Forest forest = grow_causal_forest(X, y_res, w_res, cand);
      CausalKernel kernel(forest, y_res, w_res);
      CausalKernel::OobResult oob = kernel.oob_all(X);
      double loss = 0;
      std::size_t used = 0;
      for (std::size_t i = 0; i < X.rows(); ++i) {
        if (!std::isfinite(oob.tau[i])) continue;
        double r = y_res[i] - oob.tau[i] * w_res[i];
        loss += r * r;
        ++used;
      }
      if (used > 0) score = loss / static_cast<double>(used);
    } catch (const Error&) {
      // infeasible candidate (e.g. subsample too small); keep score at infinity
    }
    result.trials.push_back({cand, score});
    if (!std::isfinite(score)) continue;
    any_feasible = true;
    bool better = score < best_score ||
                  (score == best_score && cand.min_node_size > result.best.min_node_size);
    if (better) {
      best_score = score;
      result.best = cand;
      result.best.num_trees = base.num_trees;
      result.best.seed = base.seed;
    }
  }
  if (!any_feasible) {
    throw DataError(ErrorCode::InsufficientData, "no tuning candidate could be fitted");
  }
  return result;
}

}  // namespace cfkit
