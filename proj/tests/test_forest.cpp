#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include <cfkit/errors.hpp>
#include <cfkit/forest.hpp>
#include <cfkit/random.hpp>
#include <cfkit/simulate.hpp>
#include <cfkit/stats.hpp>

#include "helpers.hpp"

using namespace cfkit;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double oob_r_loss(const Forest& forest, const testutil::SmallProblem& prob) {
  CausalKernel kernel(forest, prob.y_res, prob.w_res);
  auto oob = kernel.oob_all(prob.X);
  double loss = 0;
  for (std::size_t i = 0; i < prob.y_res.size(); ++i) {
    double r = prob.y_res[i] - oob.tau[i] * prob.w_res[i];
    loss += r * r;
  }
  return loss;
}

}  // namespace

TEST_CASE("parameter defaults and mtry resolution") {
  ForestParams params;
  CHECK(params.num_trees == 2000);
  CHECK(params.sample_fraction == 0.5);
  CHECK(params.honesty_fraction == 0.5);
  CHECK(params.min_node_size == 5);
  CHECK(params.ci_group_size == 2);
  CHECK(params.mtry == 0);
  // ceil(sqrt(p) + 20), capped at p
  CHECK(resolve_mtry(params, 100) == 30);
  CHECK(resolve_mtry(params, 4) == 4);
  CHECK(resolve_mtry(params, 1) == 1);
  ForestParams explicit_m = params;
  explicit_m.mtry = 3;
  CHECK(resolve_mtry(explicit_m, 10) == 3);
}

TEST_CASE("tree count must be a multiple of the little-bag size") {
  ForestParams params;
  params.num_trees = 3;
  params.ci_group_size = 2;
  try {
    validate_params(params, 4);
    FAIL("expected InvalidParams");
  } catch (const UsageError& e) {
    CHECK(e.code() == ErrorCode::InvalidParams);
  }
}

TEST_CASE("honesty: split and estimate halves are disjoint in every tree") {
  auto prob = testutil::small_problem(150, 3, 21);
  ForestParams params;
  params.num_trees = 60;
  params.seed = 4;
  Forest forest = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  REQUIRE(forest.trees.size() == 60);
  for (const auto& tree : forest.trees) {
    std::set<int> est(tree.estimate_half.begin(), tree.estimate_half.end());
    std::set<int> sub(tree.subsample.begin(), tree.subsample.end());
    std::size_t split_count = tree.subsample.size() - tree.estimate_half.size();
    CHECK(split_count > 0);
    for (int r : tree.estimate_half) CHECK(sub.count(r) == 1);
    // every leaf is nonempty and drawn from the estimate half
    for (const auto& node : tree.nodes) {
      if (node.feature >= 0) continue;
      CHECK_FALSE(node.rows.empty());
      for (int r : node.rows) CHECK(est.count(r) == 1);
    }
  }
}

TEST_CASE("growth is bit deterministic for a fixed seed") {
  auto prob = testutil::small_problem(200, 3, 8);
  ForestParams params;
  params.num_trees = 100;
  params.seed = 31;
  Forest a = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  Forest b = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  auto dir = testutil::temp_dir("forest_det");
  save_forest(a, (dir / "a.json").string());
  save_forest(b, (dir / "b.json").string());
  CHECK(slurp((dir / "a.json").string()) == slurp((dir / "b.json").string()));
}

TEST_CASE("kernel weights match hand evaluation on fixed leaves") {
  std::vector<double> x{0.4};

  SUBCASE("one tree, leaf {3,8}") {
    auto forest = testutil::hand_forest({testutil::leaf_tree({1, 3, 8}, {3, 8})}, 10, 1);
    auto alpha = kernel_weights(forest, x);
    CHECK(alpha[3] == 0.5);
    CHECK(alpha[8] == 0.5);
    double total = 0;
    for (double a : alpha) total += a;
    CHECK(total == 1.0);
  }
  SUBCASE("two trees, leaves {3,8} and {8}") {
    auto forest = testutil::hand_forest(
        {testutil::leaf_tree({1, 3, 8}, {3, 8}), testutil::leaf_tree({2, 8}, {8})}, 10, 1);
    auto alpha = kernel_weights(forest, x);
    CHECK(alpha[8] == 0.75);
    CHECK(alpha[3] == 0.25);
    for (std::size_t i = 0; i < alpha.size(); ++i) {
      if (i != 3 && i != 8) CHECK(alpha[i] == 0.0);
    }
  }
}

TEST_CASE("kernel weights normalize at random points") {
  auto prob = testutil::small_problem(400, 4, 77);
  ForestParams params;
  params.num_trees = 200;
  params.seed = 12;
  Forest forest = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  Rng rng(5);
  std::vector<double> x(4);
  for (int rep = 0; rep < 100; ++rep) {
    for (auto& v : x) v = rng.uniform01();
    auto alpha = kernel_weights(forest, x);
    double total = 0;
    for (double a : alpha) {
      CHECK(a >= 0.0);
      total += a;
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("full-sample trees leave no room for out-of-bag evaluation") {
  auto prob = testutil::small_problem(60, 2, 3);
  ForestParams params;
  params.num_trees = 10;
  params.ci_group_size = 1;
  params.sample_fraction = 1.0;
  Forest forest = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  std::vector<double> x{0.5, 0.5};
  try {
    kernel_weights(forest, x, 0);
    FAIL("expected NoEligibleTrees");
  } catch (const NumericError& e) {
    CHECK(e.code() == ErrorCode::NoEligibleTrees);
  }
}

TEST_CASE("regression forest reproduces a constant target exactly") {
  Rng rng(9);
  Matrix X(80, 2);
  for (std::size_t i = 0; i < 80; ++i) {
    X(i, 0) = rng.uniform01();
    X(i, 1) = rng.uniform01();
  }
  std::vector<double> target(80, 3.25);
  ForestParams params;
  params.num_trees = 50;
  Forest forest = grow_regression_forest(X, target, params);
  auto oob = predict_oob(forest, X);
  CHECK(oob.missing_rows.empty());
  for (double v : oob.values) CHECK(v == 3.25);
}

TEST_CASE("regression forest separates a binary feature into group means") {
  Rng rng(14);
  std::size_t n = 200;
  Matrix X(n, 1);
  std::vector<double> target(n);
  double sum0 = 0, sum1 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = i < n / 2 ? 0.0 : 1.0;
    target[i] = 10.0 * X(i, 0) + 0.5 * rng.normal();
    (X(i, 0) == 0.0 ? sum0 : sum1) += target[i];
  }
  double mean0 = sum0 / (n / 2.0), mean1 = sum1 / (n / 2.0);
  ForestParams params;
  params.num_trees = 500;
  params.seed = 2;
  Forest forest = grow_regression_forest(X, target, params);
  auto oob = predict_oob(forest, X);
  for (std::size_t i = 0; i < n; ++i) {
    double truth = X(i, 0) == 0.0 ? mean0 : mean1;
    CHECK(std::abs(oob.values[i] - truth) <= 0.5);
  }
}

TEST_CASE("proportional residuals pin the causal estimate to the ratio") {
  Rng rng(5);
  std::size_t n = 150;
  Matrix X(n, 2);
  std::vector<double> w_res(n), y_res(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = rng.uniform01();
    X(i, 1) = rng.uniform01();
    w_res[i] = rng.uniform01() < 0.5 ? 0.5 : -0.5;
    y_res[i] = 1.5 * w_res[i];
  }
  ForestParams params;
  params.num_trees = 40;
  Forest forest = grow_causal_forest(X, y_res, w_res, params);
  CausalKernel kernel(forest, y_res, w_res);
  auto oob = kernel.oob_all(X);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(oob.tau[i] == doctest::Approx(1.5).epsilon(1e-12));
  }
}

TEST_CASE("constant treatment residuals are rejected") {
  auto prob = testutil::small_problem(50, 2, 6);
  std::vector<double> zero(50, 0.0);
  ForestParams params;
  params.num_trees = 10;
  try {
    grow_causal_forest(prob.X, prob.y_res, zero, params);
    FAIL("expected ZeroTreatmentVariation");
  } catch (const DataError& e) {
    CHECK(e.code() == ErrorCode::ZeroTreatmentVariation);
  }
}

TEST_CASE("two-group effect shows up as the out-of-bag group gap") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 2000;
  spec.p = 5;
  spec.tau_level = 2.0;
  spec.seed = 17;
  auto sim = generate(spec);
  // residualize against the exact nuisance functions
  std::vector<double> y_res(spec.n), w_res(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    double m = 2.0 * sim.data.X(i, 1) + 0.5 * sim.true_tau[i];
    y_res[i] = sim.data.Y[i] - m;
    w_res[i] = sim.data.W[i] - 0.5;
  }
  ForestParams params;
  params.num_trees = 1000;
  params.seed = 3;
  Forest forest = grow_causal_forest(sim.data.X, y_res, w_res, params);
  CausalKernel kernel(forest, y_res, w_res);
  auto oob = kernel.oob_all(sim.data.X);

  double g0 = 0, g1 = 0, n0 = 0, n1 = 0;
  double num0 = 0, den0 = 0, num1 = 0, den1 = 0;
  for (std::size_t i = 0; i < spec.n; ++i) {
    if (sim.data.X(i, 0) > 0.5) {
      g1 += oob.tau[i];
      ++n1;
      num1 += y_res[i] * w_res[i];
      den1 += w_res[i] * w_res[i];
    } else {
      g0 += oob.tau[i];
      ++n0;
      num0 += y_res[i] * w_res[i];
      den0 += w_res[i] * w_res[i];
    }
  }
  double gap = g1 / n1 - g0 / n0;
  double robinson_gap = num1 / den1 - num0 / den0;
  CHECK(std::abs(gap - 2.0) <= 0.3);
  CHECK(std::abs(gap - robinson_gap) <= 0.3);
}

TEST_CASE("roughly half the trees are eligible per out-of-bag row") {
  auto prob = testutil::small_problem(300, 3, 30);
  ForestParams params;
  params.num_trees = 400;
  Forest forest = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  double share_sum = 0;
  for (std::size_t i = 0; i < 300; ++i) {
    int eligible = 0;
    for (const auto& tree : forest.trees) {
      if (!tree.contains(static_cast<int>(i))) ++eligible;
    }
    share_sum += eligible / 400.0;
  }
  CHECK(share_sum / 300.0 == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("out-of-bag error is comparable to a cross-fit baseline") {
  Rng rng(23);
  std::size_t n = 50;
  Matrix X(n, 2);
  std::vector<double> target(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = rng.uniform01();
    X(i, 1) = rng.uniform01();
    target[i] = X(i, 0) + 0.1 * rng.normal();
  }
  ForestParams params;
  params.num_trees = 1000;
  params.seed = 5;
  Forest full = grow_regression_forest(X, target, params);
  auto oob = predict_oob(full, X);
  double oob_mse = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = oob.values[i] - target[i];
    oob_mse += d * d;
  }
  oob_mse /= static_cast<double>(n);

  // 5-fold cross-fit: predict each fold from a forest grown on the rest
  double cf_mse = 0;
  for (int fold = 0; fold < 5; ++fold) {
    std::vector<std::size_t> in_fold, out_fold;
    for (std::size_t i = 0; i < n; ++i) {
      (static_cast<int>(i) % 5 == fold ? in_fold : out_fold).push_back(i);
    }
    Matrix Xtr(out_fold.size(), 2), Xte(in_fold.size(), 2);
    std::vector<double> ytr(out_fold.size());
    for (std::size_t r = 0; r < out_fold.size(); ++r) {
      Xtr(r, 0) = X(out_fold[r], 0);
      Xtr(r, 1) = X(out_fold[r], 1);
      ytr[r] = target[out_fold[r]];
    }
    for (std::size_t r = 0; r < in_fold.size(); ++r) {
      Xte(r, 0) = X(in_fold[r], 0);
      Xte(r, 1) = X(in_fold[r], 1);
    }
    Forest part = grow_regression_forest(Xtr, ytr, params);
    auto pred = predict(part, Xte);
    for (std::size_t r = 0; r < in_fold.size(); ++r) {
      double d = pred[r] - target[in_fold[r]];
      cf_mse += d * d;
    }
  }
  cf_mse /= static_cast<double>(n);
  CHECK(oob_mse <= 2.0 * cf_mse);
  CHECK(oob_mse >= 0.5 * cf_mse);
}

TEST_CASE("tuning with a single candidate returns that candidate") {
  auto prob = testutil::small_problem(120, 2, 44);
  ForestParams base;
  base.num_trees = 200;
  base.seed = 6;
  TuneSearchSpace space;
  auto result = tune_params(prob.X, prob.y_res, prob.w_res, base, space, 1, 9);
  REQUIRE(result.trials.size() == 1);
  CHECK(result.best.min_node_size == result.trials[0].params.min_node_size);
  CHECK(result.best.sample_fraction == result.trials[0].params.sample_fraction);
}

TEST_CASE("duplicate tuning candidates score identically and resolve deterministically") {
  auto prob = testutil::small_problem(120, 2, 45);
  ForestParams base;
  base.num_trees = 200;
  base.seed = 6;
  TuneSearchSpace space;
  space.min_node_size_lo = space.min_node_size_hi = 10;
  space.sample_fraction_lo = space.sample_fraction_hi = 0.4;
  space.honesty_fraction_lo = space.honesty_fraction_hi = 0.5;
  space.mtry_lo = 2;
  space.mtry_hi = 2;
  auto a = tune_params(prob.X, prob.y_res, prob.w_res, base, space, 4, 9);
  REQUIRE(a.trials.size() == 4);
  for (const auto& trial : a.trials) {
    CHECK(trial.params.min_node_size == 10);
    CHECK(trial.r_loss == a.trials[0].r_loss);
  }
  auto b = tune_params(prob.X, prob.y_res, prob.w_res, base, space, 4, 9);
  CHECK(a.best.min_node_size == b.best.min_node_size);
  CHECK(a.trials[0].r_loss == b.trials[0].r_loss);
}

TEST_CASE("tuning on pure noise prefers larger leaves") {
  int at_least_default = 0;
  for (int s = 1; s <= 20; ++s) {
    Rng rng(1000 + s);
    std::size_t n = 300;
    Matrix X(n, 3);
    std::vector<double> y_res(n), w_res(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int j = 0; j < 3; ++j) X(i, j) = rng.uniform01();
      w_res[i] = rng.uniform01() < 0.5 ? 0.5 : -0.5;
      y_res[i] = rng.normal();
    }
    ForestParams base;
    base.num_trees = 2000;
    base.seed = 100 + s;
    auto result = tune_params(X, y_res, w_res, base, TuneSearchSpace{}, 8, 200 + s);
    if (result.best.min_node_size >= 5) ++at_least_default;
  }
  CHECK(at_least_default >= 14);
}

TEST_CASE("identical trees have zero finite-ensemble error") {
  auto tree = testutil::leaf_tree({1, 3, 8}, {3, 8});
  auto forest = testutil::hand_forest({tree, tree, tree, tree}, 10, 1);
  std::vector<double> y_res(10, 1.0), w_res(10, 0.0);
  w_res[3] = 0.5;
  w_res[8] = -0.5;
  y_res[3] = 0.7;
  y_res[8] = -0.7;
  std::vector<double> x{0.5};
  CHECK(excess_error(forest, y_res, w_res, x) == 0.0);
}

TEST_CASE("finite-ensemble error is nonnegative and shrinks with more trees") {
  auto prob = testutil::small_problem(400, 3, 61);
  ForestParams small;
  small.num_trees = 2000;
  small.seed = 10;
  ForestParams big = small;
  big.num_trees = 20000;
  Forest f_small = grow_causal_forest(prob.X, prob.y_res, prob.w_res, small);
  Forest f_big = grow_causal_forest(prob.X, prob.y_res, prob.w_res, big);
  CausalKernel k_small(f_small, prob.y_res, prob.w_res);
  CausalKernel k_big(f_big, prob.y_res, prob.w_res);
  std::vector<double> x(3);
  double sum_small = 0, sum_big = 0;
  Rng rng(19);
  for (int rep = 0; rep < 5; ++rep) {
    for (auto& v : x) v = rng.uniform01();
    double es = excess_error(k_small, x);
    double eb = excess_error(k_big, x);
    CHECK(es >= 0.0);
    CHECK(eb >= 0.0);
    sum_small += es;
    sum_big += eb;
  }
  double ratio = sum_small / sum_big;
  // 10x more trees should cut the Monte Carlo error ~10x (factor-3 slack)
  CHECK(ratio >= 10.0 / 3.0);
  CHECK(ratio <= 30.0);
}

TEST_CASE("bigger ensembles do not hurt the out-of-bag loss on average") {
  double loss_small = 0, loss_big = 0;
  for (int s = 1; s <= 20; ++s) {
    auto prob = testutil::small_problem(300, 3, 500 + s);
    ForestParams params;
    params.seed = 40 + s;
    params.num_trees = 200;
    loss_small += oob_r_loss(grow_causal_forest(prob.X, prob.y_res, prob.w_res, params), prob);
    params.num_trees = 4000;
    loss_big += oob_r_loss(grow_causal_forest(prob.X, prob.y_res, prob.w_res, params), prob);
  }
  CHECK(loss_big / 20.0 <= loss_small / 20.0);
}

TEST_CASE("forest persistence round-trips and rejects foreign versions") {
  auto prob = testutil::small_problem(100, 2, 37);
  ForestParams params;
  params.num_trees = 20;
  params.seed = 55;
  Forest forest = grow_causal_forest(prob.X, prob.y_res, prob.w_res, params);
  auto dir = testutil::temp_dir("forest_io");
  auto path = (dir / "forest.json").string();
  save_forest(forest, path);
  Forest back = load_forest(path);
  CHECK(back.n_rows == forest.n_rows);
  CHECK(back.n_features == forest.n_features);
  CHECK(back.params.num_trees == forest.params.num_trees);
  CHECK(back.data_fingerprint == forest.data_fingerprint);
  REQUIRE(back.trees.size() == forest.trees.size());
  auto second = (dir / "again.json").string();
  save_forest(back, second);
  CHECK(slurp(path) == slurp(second));

  auto doc = nlohmann::json::parse(slurp(path));
  doc["format_version"] = 99;
  std::ofstream(path) << doc.dump(2) << '\n';
  try {
    load_forest(path);
    FAIL("expected BadFormatVersion");
  } catch (const UsageError& e) {
    CHECK(e.code() == ErrorCode::BadFormatVersion);
  }
}
