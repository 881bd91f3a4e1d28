#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <cfkit/centering.hpp>
#include <cfkit/forest.hpp>
#include <cfkit/matrix.hpp>
#include <cfkit/random.hpp>
#include <cfkit/stats.hpp>

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cfkit_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Single-node tree whose leaf holds the given estimate rows.
inline cfkit::Tree leaf_tree(std::vector<int> subsample, std::vector<int> estimate) {
  cfkit::Tree tree;
  tree.subsample = std::move(subsample);
  tree.estimate_half = estimate;
  cfkit::TreeNode leaf;
  leaf.rows = std::move(estimate);
  tree.nodes.push_back(std::move(leaf));
  return tree;
}

inline cfkit::Forest hand_forest(std::vector<cfkit::Tree> trees, std::size_t n_rows,
                                 std::size_t n_features) {
  cfkit::Forest forest;
  forest.kind = cfkit::ForestKind::Causal;
  forest.n_rows = n_rows;
  forest.n_features = n_features;
  forest.params.num_trees = static_cast<int>(trees.size());
  forest.params.ci_group_size = 1;
  forest.trees = std::move(trees);
  return forest;
}

// Centered data with the residual fields set directly (unit fixtures).
inline cfkit::CenteredData manual_centered(std::vector<double> y_res,
                                           std::vector<double> w_res) {
  cfkit::CenteredData c;
  std::size_t n = y_res.size();
  c.m_hat.assign(n, 0.0);
  c.e_hat.assign(n, 0.5);
  c.y_res = std::move(y_res);
  c.w_res = std::move(w_res);
  c.nuisance_fits = 1;
  c.fingerprint = cfkit::fnv1a(c.w_res.data(), c.w_res.size() * sizeof(double),
                               cfkit::fnv1a(c.y_res.data(), c.y_res.size() * sizeof(double)));
  return c;
}

// Random residual-scale problem for kernel and estimator cross-checks.
struct SmallProblem {
  cfkit::Matrix X;
  std::vector<double> y_res;
  std::vector<double> w_res;
};

inline SmallProblem small_problem(std::size_t n, std::size_t p, std::uint64_t seed) {
  cfkit::Rng rng(seed);
  SmallProblem prob;
  prob.X = cfkit::Matrix(n, p);
  prob.y_res.resize(n);
  prob.w_res.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) prob.X(i, j) = rng.uniform01();
    prob.w_res[i] = rng.uniform01() < 0.5 ? 0.5 : -0.5;
    prob.y_res[i] = prob.X(i, 0) * prob.w_res[i] + 0.3 * rng.normal();
  }
  return prob;
}

inline double checksum(std::span<const double> v) {
  return static_cast<double>(cfkit::fnv1a(v.data(), v.size() * sizeof(double)));
}

}  // namespace testutil
