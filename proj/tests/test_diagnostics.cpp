#include <doctest.h>

#include <cmath>
#include <cstddef>
#include <vector>

#include <cfkit/centering.hpp>
#include <cfkit/diagnostics.hpp>
#include <cfkit/errors.hpp>
#include <cfkit/forest.hpp>
#include <cfkit/random.hpp>
#include <cfkit/simulate.hpp>

#include "helpers.hpp"

using namespace cfkit;

namespace {

// Hand-built centering with explicit propensities; residuals follow the
// defining subtractions so W is recoverable downstream.
CenteredData centered_with_e(const std::vector<double>& e, const std::vector<double>& w) {
  CenteredData c;
  c.e_hat = e;
  c.m_hat.assign(e.size(), 0.0);
  c.y_res.assign(e.size(), 0.0);
  c.w_res.resize(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) c.w_res[i] = w[i] - e[i];
  c.nuisance_fits = 2;
  return c;
}

Dataset dataset_with(const CenteredData& c) {
  Dataset d;
  std::size_t n = c.e_hat.size();
  d.X = Matrix(n, 1);
  d.feature_names = {"x1"};
  d.W.resize(n);
  d.Y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.X(i, 0) = static_cast<double>(i);
    d.W[i] = c.w_res[i] + c.e_hat[i];
    d.Y[i] = static_cast<double>(i % 3);
  }
  return d;
}

}  // namespace

TEST_CASE("overlap report puts a single shared propensity in one bin") {
  std::size_t n = 40;
  std::vector<double> e(n, 0.5), w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = (i % 2 == 0) ? 1.0 : 0.0;
  auto c = centered_with_e(e, w);

  OverlapReport rep = overlap_report(c, 20);
  REQUIRE(rep.treated_counts.size() == 20);
  REQUIRE(rep.bin_edges.size() == 21);
  CHECK(rep.bin_edges.front() == 0.0);
  CHECK(rep.bin_edges.back() == 1.0);
  int treated_total = 0, control_total = 0;
  for (int b = 0; b < 20; ++b) {
    treated_total += rep.treated_counts[b];
    control_total += rep.control_counts[b];
    if (b != 10) {
      CHECK(rep.treated_counts[b] == 0);
      CHECK(rep.control_counts[b] == 0);
    }
  }
  CHECK(rep.treated_counts[10] == 20);
  CHECK(rep.control_counts[10] == 20);
  CHECK(treated_total + control_total == static_cast<int>(n));
  CHECK(rep.treated_min == 0.5);
  CHECK(rep.treated_max == 0.5);
  CHECK(rep.control_min == 0.5);
  CHECK(rep.control_max == 0.5);
  CHECK(rep.share_outside == 0.0);
  CHECK_FALSE(rep.flagged);
}

TEST_CASE("overlap report flags fully separated arms") {
  std::size_t n = 40;
  std::vector<double> e(n), w(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool treated = i < 20;
    w[i] = treated ? 1.0 : 0.0;
    e[i] = treated ? 0.99 : 0.01;
  }
  auto c = centered_with_e(e, w);

  OverlapReport rep = overlap_report(c, 20);
  CHECK(rep.flagged);
  CHECK(rep.share_outside == 1.0);
  CHECK(rep.treated_counts[19] == 20);
  CHECK(rep.control_counts[0] == 20);
  CHECK(rep.treated_min == 0.99);
  CHECK(rep.control_max == 0.01);

  // Widening the trim band empties the outside share but the gap between the
  // arms still trips the flag.
  OverlapReport wide = overlap_report(c, 20, 0.001, 0.999);
  CHECK(wide.share_outside == 0.0);
  CHECK(wide.flagged);
}

TEST_CASE("overlap share matches a direct recount after a confounded fit") {
  DgpSpec spec;
  spec.name = "confounded";
  spec.n = 400;
  spec.p = 3;
  spec.seed = 31;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 80;
  params.seed = 17;
  CenteredData centered = local_center(sim.data, params, false);

  OverlapReport rep = overlap_report(centered, 20, 0.05, 0.95);
  std::size_t outside = 0;
  std::vector<int> treated_direct(20, 0);
  for (std::size_t i = 0; i < spec.n; ++i) {
    double e = centered.e_hat[i];
    if (e < 0.05 || e > 0.95) outside++;
    if (sim.data.W[i] > 0.5) {
      int b = std::min(19, static_cast<int>(e * 20));
      treated_direct[b]++;
    }
  }
  CHECK(rep.share_outside == static_cast<double>(outside) / static_cast<double>(spec.n));
  for (int b = 0; b < 20; ++b) CHECK(rep.treated_counts[b] == treated_direct[b]);
  int total = 0;
  for (int b = 0; b < 20; ++b) total += rep.treated_counts[b] + rep.control_counts[b];
  CHECK(total == static_cast<int>(spec.n));
}

TEST_CASE("overlap report rejects bad bins and bounds") {
  auto c = centered_with_e({0.5, 0.5}, {1.0, 0.0});
  CHECK_THROWS_AS(overlap_report(c, 0), UsageError);
  CHECK_THROWS_AS(overlap_report(c, 20, 0.0, 0.95), UsageError);
  CHECK_THROWS_AS(overlap_report(c, 20, 0.5, 0.5), UsageError);
  CHECK_THROWS_AS(overlap_report(c, 20, 0.05, 1.0), UsageError);
}

TEST_CASE("trim keeps everything when all propensities sit inside the bounds") {
  std::size_t n = 12;
  std::vector<double> e(n, 0.5), w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = (i % 2 == 0) ? 1.0 : 0.0;
  auto c = centered_with_e(e, w);
  Dataset d = dataset_with(c);

  TrimResult t = trim_by_propensity(d, c);
  CHECK(t.removed == 0);
  REQUIRE(t.kept_rows.size() == n);
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(t.kept_rows[i] == static_cast<int>(i));
    CHECK(t.data.W[i] == d.W[i]);
    CHECK(t.data.Y[i] == d.Y[i]);
    CHECK(t.data.X(i, 0) == d.X(i, 0));
  }
}

TEST_CASE("trim bounds are inclusive and kept rows stay ascending") {
  auto c = centered_with_e({0.05, 0.7, 0.95, 0.04, 0.96}, {0.0, 1.0, 1.0, 0.0, 1.0});
  Dataset d = dataset_with(c);

  TrimResult t = trim_by_propensity(d, c, 0.05, 0.95);
  CHECK(t.removed == 2);
  REQUIRE(t.kept_rows.size() == 3);
  CHECK(t.kept_rows[0] == 0);
  CHECK(t.kept_rows[1] == 1);
  CHECK(t.kept_rows[2] == 2);
  // Subset rows carry the original values across.
  CHECK(t.data.X(0, 0) == 0.0);
  CHECK(t.data.X(2, 0) == 2.0);
  CHECK(t.data.W[2] == 1.0);
}

TEST_CASE("trim with nothing left inside the bounds is a data error") {
  std::size_t n = 8;
  std::vector<double> e(n, 0.99), w(n, 1.0);
  w[0] = 0.0;
  auto c = centered_with_e(e, w);
  Dataset d = dataset_with(c);
  CHECK_THROWS_AS(trim_by_propensity(d, c, 0.4, 0.6), DataError);
  CHECK_THROWS_AS(trim_by_propensity(d, c, 0.6, 0.4), UsageError);
}

TEST_CASE("trim count matches a direct recount and clears the outside share") {
  DgpSpec spec;
  spec.name = "confounded";
  spec.n = 300;
  spec.p = 3;
  spec.seed = 5;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 80;
  params.seed = 23;
  CenteredData centered = local_center(sim.data, params, false);

  double lo = 0.2, hi = 0.8;
  std::size_t inside = 0;
  for (double e : centered.e_hat)
    if (e >= lo && e <= hi) inside++;
  TrimResult t = trim_by_propensity(sim.data, centered, lo, hi);
  CHECK(t.kept_rows.size() == inside);
  CHECK(t.removed == spec.n - inside);
  for (std::size_t i = 1; i < t.kept_rows.size(); ++i) CHECK(t.kept_rows[i - 1] < t.kept_rows[i]);
  for (std::size_t i = 0; i < t.kept_rows.size(); ++i) {
    CHECK(t.data.W[i] == sim.data.W[static_cast<std::size_t>(t.kept_rows[i])]);
    CHECK(t.data.Y[i] == sim.data.Y[static_cast<std::size_t>(t.kept_rows[i])]);
  }

  // Restricting the centering to the kept rows leaves nothing outside.
  CenteredData sub;
  for (int idx : t.kept_rows) {
    auto u = static_cast<std::size_t>(idx);
    sub.m_hat.push_back(centered.m_hat[u]);
    sub.e_hat.push_back(centered.e_hat[u]);
    sub.y_res.push_back(centered.y_res[u]);
    sub.w_res.push_back(centered.w_res[u]);
  }
  sub.nuisance_fits = centered.nuisance_fits;
  OverlapReport rep = overlap_report(sub, 20, lo, hi);
  CHECK(rep.share_outside == 0.0);
}

TEST_CASE("placebo treatment leaves the input untouched and reruns deterministically") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 240;
  spec.p = 3;
  spec.seed = 9;
  spec.tau_level = 1.0;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 80;
  params.seed = 11;

  Dataset before = sim.data;
  PlaceboResult r1 = placebo_treatment_test(sim.data, params, 4, 77);
  PlaceboResult r2 = placebo_treatment_test(sim.data, params, 4, 77);

  REQUIRE(r1.runs.size() == 4);
  REQUIRE(r2.runs.size() == 4);
  int rejections = 0;
  for (std::size_t rep = 0; rep < 4; ++rep) {
    CHECK(r1.runs[rep].ate == r2.runs[rep].ate);
    CHECK(r1.runs[rep].se == r2.runs[rep].se);
    CHECK(r1.runs[rep].reject_at_05 == r2.runs[rep].reject_at_05);
    CHECK(r1.runs[rep].se > 0.0);
    if (r1.runs[rep].reject_at_05) rejections++;
  }
  CHECK(r1.rejection_share == static_cast<double>(rejections) / 4.0);

  CHECK(sim.data.W == before.W);
  CHECK(sim.data.Y == before.Y);
  CHECK(sim.data.e_oracle.has_value() == before.e_oracle.has_value());
  for (std::size_t i = 0; i < spec.n; ++i) CHECK(sim.data.X(i, 0) == before.X(i, 0));

  CHECK_THROWS_AS(placebo_treatment_test(sim.data, params, 0, 77), UsageError);
}

TEST_CASE("placebo rejections stay rare when the design is sound") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 300;
  spec.p = 3;
  spec.seed = 41;
  spec.tau_level = 2.0;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 100;
  params.seed = 19;

  PlaceboResult r = placebo_treatment_test(sim.data, params, 10, 13);
  CHECK(r.rejection_share <= 0.3);
}

TEST_CASE("dummy noise outcome is deterministic and carries no effect") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 300;
  spec.p = 3;
  spec.seed = 8;
  spec.tau_level = 2.0;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 100;
  params.seed = 29;

  DummyOutcomeSpec noise;
  FalsificationRun a = dummy_outcome_test(sim.data, noise, params, 4);
  FalsificationRun b = dummy_outcome_test(sim.data, noise, params, 4);
  CHECK(a.ate == b.ate);
  CHECK(a.se == b.se);
  CHECK(a.se > 0.0);
  // The synthetic outcome never saw the treatment, so the estimate sits near 0
  // even though the real data carries a solid effect.
  CHECK(std::fabs(a.ate) < 4.0 * a.se);

  FalsificationRun other = dummy_outcome_test(sim.data, noise, params, 5);
  CHECK(a.ate != other.ate);
}

TEST_CASE("dummy outcome by column pulls from covariates or reserved extras") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 240;
  spec.p = 3;
  spec.seed = 15;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 60;
  params.seed = 37;

  DummyOutcomeSpec by_col;
  by_col.random_noise = false;
  by_col.column = "x2";
  FalsificationRun run = dummy_outcome_test(sim.data, by_col, params, 2);
  CHECK(std::isfinite(run.ate));
  CHECK(run.se > 0.0);

  // Reserved columns ride along without shrinking the covariates.
  Dataset with_extra = sim.data;
  Rng rng(991);
  std::vector<double> pre(spec.n);
  for (double& v : pre) v = rng.normal();
  with_extra.extras["pre_y"] = pre;
  by_col.column = "pre_y";
  FalsificationRun extra_run = dummy_outcome_test(with_extra, by_col, params, 2);
  CHECK(std::isfinite(extra_run.ate));

  by_col.column = "nope";
  CHECK_THROWS_AS(dummy_outcome_test(sim.data, by_col, params, 2), DataError);
}

TEST_CASE("dummy outcome refuses to consume the only covariate") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 240;
  spec.p = 1;
  spec.seed = 21;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 40;
  params.seed = 3;
  DummyOutcomeSpec by_col;
  by_col.random_noise = false;
  by_col.column = "x1";
  CHECK_THROWS_AS(dummy_outcome_test(sim.data, by_col, params, 1), UsageError);
}

TEST_CASE("parallel trends gap vanishes when the pre-period residual is zero") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 240;
  spec.p = 3;
  spec.seed = 12;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 60;
  params.seed = 7;
  CenteredData centered = local_center(sim.data, params, true);
  Forest forest = grow_causal_forest(sim.data.X, centered.y_res, centered.w_res, params);

  CenteredData pre = centered;
  std::fill(pre.y_res.begin(), pre.y_res.end(), 0.0);

  Matrix pts(10, 3);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 3; ++j) pts(i, j) = sim.data.X(i * 20, j);

  auto points = parallel_trends_check(forest, pre, pts);
  REQUIRE(points.size() == 10);
  for (const auto& pt : points) {
    CHECK(pt.gap == 0.0);
    CHECK(pt.se >= 0.0);
    CHECK_FALSE(pt.flagged);
  }
}

TEST_CASE("parallel trends flags a pre-period gap that tracks treatment") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 240;
  spec.p = 3;
  spec.seed = 18;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 60;
  params.seed = 27;
  CenteredData centered = local_center(sim.data, params, true);
  Forest forest = grow_causal_forest(sim.data.X, centered.y_res, centered.w_res, params);

  // Pre-period residual identical to the treatment residual: the weighted
  // regression recovers slope one at every point, bitwise.
  CenteredData pre = centered;
  pre.y_res = pre.w_res;

  Matrix pts(6, 3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) pts(i, j) = sim.data.X(i * 40, j);

  auto points = parallel_trends_check(forest, pre, pts);
  for (const auto& pt : points) {
    CHECK(pt.gap == 1.0);
    CHECK(pt.flagged);
  }

  CenteredData bad = centered;
  bad.y_res.pop_back();
  CHECK_THROWS_AS(parallel_trends_check(forest, bad, pts), UsageError);

  Forest reg = grow_regression_forest(sim.data.X, centered.y_res, params);
  CHECK_THROWS_AS(parallel_trends_check(reg, pre, pts), UsageError);
}

TEST_CASE("parallel trends stays quiet on an independent pre-period outcome") {
  DgpSpec spec;
  spec.name = "two_group";
  spec.n = 300;
  spec.p = 3;
  spec.seed = 25;
  SimulationResult sim = generate(spec);
  ForestParams params;
  params.num_trees = 100;
  params.seed = 33;
  CenteredData centered = local_center(sim.data, params, true);
  Forest forest = grow_causal_forest(sim.data.X, centered.y_res, centered.w_res, params);

  CenteredData pre = centered;
  Rng rng(derive_seed(55, 2026));
  for (double& v : pre.y_res) v = rng.normal();

  Matrix pts(30, 3);
  for (std::size_t i = 0; i < 30; ++i)
    for (std::size_t j = 0; j < 3; ++j) pts(i, j) = sim.data.X(i * 10, j);

  auto points = parallel_trends_check(forest, pre, pts);
  int flagged = 0;
  for (const auto& pt : points)
    if (pt.flagged) flagged++;
  CHECK(flagged <= 6);
}
