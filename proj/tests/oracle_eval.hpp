#pragma once

// Brute-force re-evaluation of the forest kernel and the Robinson ratio.
// Leaf membership is re-derived by filtering the estimate half down the
// stored split path, so node row lists and locate() are never trusted.

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include <cfkit/forest.hpp>
#include <cfkit/matrix.hpp>

namespace oracle {

inline bool in_subsample(const cfkit::Tree& tree, int row) {
  return std::binary_search(tree.subsample.begin(), tree.subsample.end(), row);
}

// alpha_i(x) from the definition; empty result means no eligible tree.
inline std::vector<double> alpha(const cfkit::Forest& forest, const cfkit::Matrix& X,
                                 std::span<const double> x,
                                 std::optional<int> exclude_for = std::nullopt) {
  std::vector<double> out(forest.n_rows, 0.0);
  int eligible = 0;
  for (const auto& tree : forest.trees) {
    if (exclude_for && in_subsample(tree, *exclude_for)) continue;
    ++eligible;
    std::vector<int> members = tree.estimate_half;
    int id = 0;
    while (tree.nodes[id].feature >= 0) {
      const auto& node = tree.nodes[id];
      bool go_left = x[node.feature] <= node.threshold;
      std::vector<int> kept;
      for (int r : members) {
        if ((X(r, node.feature) <= node.threshold) == go_left) kept.push_back(r);
      }
      members = std::move(kept);
      id = go_left ? node.left : node.right;
    }
    if (members.empty()) continue;  // pruning should make this unreachable
    double share = 1.0 / static_cast<double>(members.size());
    for (int r : members) out[r] += share;
  }
  if (eligible == 0) return {};
  for (double& v : out) v /= static_cast<double>(eligible);
  return out;
}

inline double tau(const cfkit::Forest& forest, const cfkit::Matrix& X,
                  std::span<const double> y_res, std::span<const double> w_res,
                  std::span<const double> x,
                  std::optional<int> exclude_for = std::nullopt) {
  auto a = alpha(forest, X, x, exclude_for);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += a[i] * y_res[i] * w_res[i];
    den += a[i] * w_res[i] * w_res[i];
  }
  return num / den;
}

}  // namespace oracle
