// Command-line front end: fit | predict | ate | diagnose | report | simulate.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfkit/cate.hpp"
#include "cfkit/centering.hpp"
#include "cfkit/dataset.hpp"
#include "cfkit/diagnostics.hpp"
#include "cfkit/errors.hpp"
#include "cfkit/forest.hpp"
#include "cfkit/inference.hpp"
#include "cfkit/presentation.hpp"
#include "cfkit/random.hpp"
#include "cfkit/simulate.hpp"
#include "cfkit/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cfkit;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Everything a pipeline invocation needs; config-file values fill fields the
// command line left untouched.
struct Options {
  std::string data_path;
  std::string config_path;
  std::string out_dir = ".";
  std::string model_dir;

  ColumnRoles roles;
  std::string covariates_csv;  // comma separated covariate names
  std::string reserved_csv;
  std::string fd_csv;          // "pre,post" first-difference columns

  ForestParams params;
  bool use_oracle = false;
  int tune_budget = 0;

  bool basu = false;
  bool basu_heterogeneity_only = false;

  double holdout = 0.3;  // holdout share for held-out reports
  double trim_lo = kDefaultTrimLo;
  double trim_hi = kDefaultTrimHi;
  std::string trim_csv;
  int bins = 20;
  int placebo_reps = 5;
  std::string trend_placebo;  // reserved pre-period difference column

  std::string method;
  int k = 4;               // quantile bins
  double threshold = 0.0;  // policy threshold
  std::string variable;    // cate_by_variable covariate
  int curve_bins = 0;      // 0 selects the smoothed curve
  int bootstrap = 200;

  bool oob = false;

  std::string dgp = "constant_effect";
  std::size_t sim_n = 1000;
  std::size_t sim_p = 10;
  double tau_level = 1.0;
  double tau_slope = 2.0;
  double noise_sd = 1.0;
  double confound_strength = 2.0;
};

std::vector<std::string> split_csv_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void register_data_flags(CLI::App* cmd, Options& opt) {
  cmd->add_option("--data", opt.data_path, "input CSV");
  cmd->add_option("--config", opt.config_path, "JSON config; flags override file values");
  cmd->add_option("--out", opt.out_dir, "output directory");
  cmd->add_option("--treatment-col", opt.roles.treatment, "treatment column (default W)");
  cmd->add_option("--outcome-col", opt.roles.outcome, "outcome column (default Y)");
  cmd->add_option("--covariates", opt.covariates_csv, "comma-separated covariate columns");
  cmd->add_option("--reserved", opt.reserved_csv, "columns kept out of X");
  cmd->add_option("--group-col", opt.roles.group, "group label column");
  cmd->add_option("--oracle-propensity-col", opt.roles.oracle_propensity,
                  "known propensity column; enables oracle centering");
  cmd->add_option("--fd", opt.fd_csv, "pre,post columns; outcome becomes post - pre");
}

void register_forest_flags(CLI::App* cmd, Options& opt) {
  cmd->add_option("--seed", opt.params.seed, "master seed");
  cmd->add_option("--trees", opt.params.num_trees, "number of trees");
  cmd->add_option("--mtry", opt.params.mtry, "features per split (0 = default rule)");
  cmd->add_option("--min-node-size", opt.params.min_node_size, "minimum split-half child size");
  cmd->add_option("--sample-fraction", opt.params.sample_fraction, "subsample fraction");
  cmd->add_option("--honesty-fraction", opt.params.honesty_fraction, "split-half share");
  cmd->add_option("--ci-group-size", opt.params.ci_group_size, "trees per little bag");
  cmd->add_option("--tune", opt.tune_budget, "random-search candidates before the final fit");
}

// Config JSON mirrors the long flag names (without the dashes). A value is
// only applied when the flag was not passed on the command line.
void apply_config(CLI::App* cmd, Options& opt) {
  if (opt.config_path.empty()) return;
  std::ifstream in(opt.config_path);
  if (!in) throw UsageError(ErrorCode::InvalidParams, "cannot open config " + opt.config_path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw UsageError(ErrorCode::InvalidParams, std::string("bad config JSON: ") + e.what());
  }
  auto unset = [&](const std::string& flag) {
    auto* o = cmd->get_option_no_throw(flag);
    return o != nullptr && o->count() == 0;
  };
  auto take = [&](const std::string& flag, const std::string& key, auto& field) {
    if (cfg.contains(key) && unset(flag)) cfg.at(key).get_to(field);
  };
  take("--data", "data", opt.data_path);
  take("--out", "out", opt.out_dir);
  take("--treatment-col", "treatment_col", opt.roles.treatment);
  take("--outcome-col", "outcome_col", opt.roles.outcome);
  take("--covariates", "covariates", opt.covariates_csv);
  take("--reserved", "reserved", opt.reserved_csv);
  take("--group-col", "group_col", opt.roles.group);
  take("--oracle-propensity-col", "oracle_propensity_col", opt.roles.oracle_propensity);
  take("--fd", "fd", opt.fd_csv);
  take("--seed", "seed", opt.params.seed);
  take("--trees", "trees", opt.params.num_trees);
  take("--mtry", "mtry", opt.params.mtry);
  take("--min-node-size", "min_node_size", opt.params.min_node_size);
  take("--sample-fraction", "sample_fraction", opt.params.sample_fraction);
  take("--honesty-fraction", "honesty_fraction", opt.params.honesty_fraction);
  take("--ci-group-size", "ci_group_size", opt.params.ci_group_size);
  take("--tune", "tune", opt.tune_budget);
  take("--holdout", "holdout", opt.holdout);
  take("--trim", "trim", opt.trim_csv);
  take("--bins", "bins", opt.bins);
  take("--placebo-reps", "placebo_reps", opt.placebo_reps);
  take("--method", "method", opt.method);
  take("--k", "k", opt.k);
  take("--threshold", "threshold", opt.threshold);
  take("--variable", "variable", opt.variable);
  take("--curve-bins", "curve_bins", opt.curve_bins);
  take("--bootstrap", "bootstrap", opt.bootstrap);
  take("--dgp", "dgp", opt.dgp);
  take("--n", "n", opt.sim_n);
  take("--p", "p", opt.sim_p);
  take("--tau-level", "tau_level", opt.tau_level);
  take("--tau-slope", "tau_slope", opt.tau_slope);
  take("--noise-sd", "noise_sd", opt.noise_sd);
  take("--confound-strength", "confound_strength", opt.confound_strength);
  if (cfg.contains("basu") && unset("--basu")) opt.basu = cfg.at("basu").get<bool>();
  if (cfg.contains("basu_heterogeneity_only") && unset("--basu-heterogeneity-only")) {
    opt.basu_heterogeneity_only = cfg.at("basu_heterogeneity_only").get<bool>();
  }
}

void finalize(Options& opt) {
  opt.roles.covariates = split_csv_list(opt.covariates_csv);
  opt.roles.reserved = split_csv_list(opt.reserved_csv);
  if (!opt.roles.oracle_propensity.empty()) opt.use_oracle = true;
  if (!opt.trim_csv.empty()) {
    auto parts = split_csv_list(opt.trim_csv);
    if (parts.size() != 2) {
      throw UsageError(ErrorCode::InvalidParams, "--trim expects lo,hi");
    }
    opt.trim_lo = std::stod(parts[0]);
    opt.trim_hi = std::stod(parts[1]);
  }
}

Dataset load_input(const Options& opt) {
  if (opt.data_path.empty()) {
    throw UsageError(ErrorCode::InvalidParams, "--data is required");
  }
  Dataset data = load_csv(opt.data_path, opt.roles);
  if (!opt.fd_csv.empty()) {
    auto parts = split_csv_list(opt.fd_csv);
    if (parts.size() != 2) throw UsageError(ErrorCode::InvalidParams, "--fd expects pre,post");
    data = first_differences(data, {parts[0], parts[1]});
  }
  return data;
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
}

json params_json(const ForestParams& p) {
  return json{{"num_trees", p.num_trees},
              {"sample_fraction", p.sample_fraction},
              {"honesty_fraction", p.honesty_fraction},
              {"mtry", p.mtry},
              {"min_node_size", p.min_node_size},
              {"ci_group_size", p.ci_group_size},
              {"seed", p.seed}};
}

void write_residuals_csv(const fs::path& path, const CenteredData& c) {
  std::ofstream out(path);
  out << "row_id,m_hat,e_hat,y_res,w_res\n";
  for (std::size_t i = 0; i < c.y_res.size(); ++i) {
    out << i << ',' << g17(c.m_hat[i]) << ',' << g17(c.e_hat[i]) << ',' << g17(c.y_res[i])
        << ',' << g17(c.w_res[i]) << "\n";
  }
}

CenteredData read_residuals_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(ErrorCode::EmptyFile, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(ErrorCode::EmptyFile, path.string());
  CenteredData c;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double m, e, yr, wr;
    long id;
    if (std::sscanf(line.c_str(), "%ld,%lf,%lf,%lf,%lf", &id, &m, &e, &yr, &wr) != 5) {
      throw DataError(ErrorCode::NonFiniteValue, "bad residual row: " + line);
    }
    c.m_hat.push_back(m);
    c.e_hat.push_back(e);
    c.y_res.push_back(yr);
    c.w_res.push_back(wr);
  }
  c.fingerprint = fnv1a(c.w_res, fnv1a(c.y_res));
  return c;
}

Matrix select_columns(const Dataset& data, const std::vector<std::string>& names) {
  Matrix out(data.n(), names.size());
  for (std::size_t j = 0; j < names.size(); ++j) {
    auto it = std::find(data.feature_names.begin(), data.feature_names.end(), names[j]);
    if (it == data.feature_names.end()) {
      throw DataError(ErrorCode::MissingColumn, "feature '" + names[j] + "' not in the data");
    }
    std::size_t src = static_cast<std::size_t>(it - data.feature_names.begin());
    for (std::size_t i = 0; i < data.n(); ++i) out(i, j) = data.X(i, src);
  }
  return out;
}

struct FitArtifacts {
  Forest forest;
  CenteredData centered;
  Dataset data;  // possibly feature-reduced
  json meta;
};

// Shared center -> (tune) -> grow flow; the basu variant refits on the
// above-average-importance features of a first pass.
FitArtifacts run_fit_pipeline(const Options& opt, Dataset data) {
  FitArtifacts art;
  ForestParams params = opt.params;
  art.meta["propensity"] = opt.use_oracle ? "oracle" : "estimated";

  CenteredData centered = local_center(data, params, opt.use_oracle);
  if (opt.tune_budget > 0) {
    TuneResult tuned = tune_params(data.X, centered.y_res, centered.w_res, params,
                                   TuneSearchSpace{}, opt.tune_budget, params.seed);
    params = tuned.best;
    art.meta["tuned"] = params_json(params);
  }
  Forest forest = grow_causal_forest(data.X, centered.y_res, centered.w_res, params);

  if (opt.basu) {
    ImportanceVector imp = variable_importance(forest);
    BasuSelection sel = basu_select(imp);
    std::vector<std::string> kept;
    for (int j : sel.features) kept.push_back(data.feature_names[j]);
    art.meta["basu"] = json{{"initial_features", data.feature_names},
                            {"selected_features", kept},
                            {"fallback", sel.fallback},
                            {"heterogeneity_only", opt.basu_heterogeneity_only}};

    fs::path out(opt.out_dir);
    save_forest(forest, (out / "forest_initial.json").string());
    std::ofstream impcsv(out / "importance_initial.csv");
    impcsv << "feature,weight\n";
    for (std::size_t j = 0; j < imp.weights.size(); ++j) {
      impcsv << data.feature_names[j] << ',' << g17(imp.weights[j]) << "\n";
    }

    Dataset reduced = data;
    reduced.X = select_columns(data, kept);
    reduced.feature_names = kept;
    if (opt.basu_heterogeneity_only) {
      // Nuisance models keep the full covariate set; only the heterogeneity
      // forest sees the reduced one.
      forest = grow_causal_forest(reduced.X, centered.y_res, centered.w_res, params);
    } else {
      centered = local_center(reduced, params, opt.use_oracle);
      forest = grow_causal_forest(reduced.X, centered.y_res, centered.w_res, params);
    }
    data = std::move(reduced);
  }

  art.meta["features"] = data.feature_names;
  art.meta["params"] = params_json(params);
  art.meta["n"] = data.n();
  art.meta["data_fingerprint"] = hex64(forest.data_fingerprint);
  art.meta["centering_fingerprint"] = hex64(centered.fingerprint);
  art.forest = std::move(forest);
  art.centered = std::move(centered);
  art.data = std::move(data);
  return art;
}

int cmd_fit(const Options& opt) {
  Dataset data = load_input(opt);
  fs::create_directories(opt.out_dir);
  FitArtifacts art = run_fit_pipeline(opt, std::move(data));
  fs::path out(opt.out_dir);

  save_forest(art.forest, (out / "forest.json").string());
  write_residuals_csv(out / "residuals.csv", art.centered);

  OobCates oob = oob_cates(art.forest, art.centered, art.data.X);
  CausalKernel kernel(art.forest, art.centered.y_res, art.centered.w_res);
  std::vector<CateEstimate> rows(art.data.n());
  std::vector<double> x(art.data.p());
  for (std::size_t i = 0; i < art.data.n(); ++i) {
    for (std::size_t j = 0; j < art.data.p(); ++j) x[j] = art.data.X(i, j);
    rows[i].point = oob.tau[i];
    rows[i].se = cate_se_little_bags(kernel, x);
    rows[i].excess_error = excess_error(kernel, x);
  }
  write_cate_csv((out / "oob_cates.csv").string(), rows);
  write_json(out / "params.json", art.meta);
  return 0;
}

int cmd_predict(const Options& opt) {
  if (opt.model_dir.empty()) throw UsageError(ErrorCode::InvalidParams, "--model is required");
  fs::path model(opt.model_dir);
  Forest forest = load_forest((model / "forest.json").string());
  CenteredData centered = read_residuals_csv(model / "residuals.csv");

  Options load_opt = opt;
  load_opt.roles.treatment.clear();  // prediction data may omit W and Y
  load_opt.roles.outcome.clear();
  Dataset data = load_input(load_opt);

  Matrix X = data.X;
  std::ifstream meta_in(model / "params.json");
  if (meta_in) {
    json meta;
    meta_in >> meta;
    if (meta.contains("features")) {
      X = select_columns(data, meta.at("features").get<std::vector<std::string>>());
    }
  }
  if (X.cols() != forest.n_features) {
    throw DataError(ErrorCode::MissingColumn, "prediction data has " + std::to_string(X.cols()) +
                                                  " features, forest expects " +
                                                  std::to_string(forest.n_features));
  }

  std::size_t nr = X.rows(), nf = X.cols();
  std::uint64_t fp = fnv1a(X.data().data(), X.data().size() * sizeof(double));
  fp = fnv1a(&nr, sizeof(nr), fp);
  fp = fnv1a(&nf, sizeof(nf), fp);
  bool is_training = X.rows() == forest.n_rows && fp == forest.data_fingerprint;
  if (opt.oob && !is_training) {
    throw UsageError(ErrorCode::InvalidParams,
                     "--oob only applies when predicting on the training rows");
  }
  if (is_training && !opt.oob) {
    std::cerr << "warning: these look like the training rows; kernels are in-sample. "
                 "Pass --oob for out-of-bag estimates.\n";
  }

  CausalKernel kernel(forest, centered.y_res, centered.w_res);
  std::vector<CateEstimate> rows(X.rows());
  std::vector<double> x(X.cols());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    for (std::size_t j = 0; j < X.cols(); ++j) x[j] = X(i, j);
    std::optional<int> excl;
    if (opt.oob) excl = static_cast<int>(i);
    rows[i].point = kernel.point(x, excl);
    rows[i].se = cate_se_little_bags(kernel, x);
    rows[i].excess_error = excess_error(kernel, x);
  }
  fs::create_directories(opt.out_dir);
  write_cate_csv((fs::path(opt.out_dir) / "predictions.csv").string(), rows);
  return 0;
}

int cmd_ate(const Options& opt) {
  Dataset data = load_input(opt);
  fs::create_directories(opt.out_dir);
  FitArtifacts art = run_fit_pipeline(opt, std::move(data));
  OobCates oob = oob_cates(art.forest, art.centered, art.data.X);
  DrScores scores = dr_scores(art.data, art.centered, oob.tau);
  AteResult ate = ate_aipw(scores);
  CalibrationResult cal = calibration_test(oob.tau, scores);

  json doc = art.meta;
  doc["ate"] = {{"point", ate.point}, {"se", ate.se}};
  doc["calibration"] = {{"mean_coef", cal.mean_coef}, {"mean_se", cal.mean_se},
                        {"mean_t", cal.mean_t},       {"mean_p", cal.mean_p},
                        {"diff_coef", cal.diff_coef}, {"diff_se", cal.diff_se},
                        {"diff_t", cal.diff_t},       {"diff_p", cal.diff_p},
                        {"degenerate_heterogeneity", cal.degenerate_heterogeneity}};
  write_json(fs::path(opt.out_dir) / "ate.json", doc);
  return 0;
}

int cmd_diagnose(const Options& opt) {
  Dataset data = load_input(opt);
  fs::create_directories(opt.out_dir);
  CenteredData centered = local_center(data, opt.params, opt.use_oracle);

  OverlapReport ov = overlap_report(centered, opt.bins, opt.trim_lo, opt.trim_hi);
  json doc;
  doc["overlap"] = {{"bin_edges", ov.bin_edges},
                    {"treated_counts", ov.treated_counts},
                    {"control_counts", ov.control_counts},
                    {"treated_min", ov.treated_min},
                    {"treated_max", ov.treated_max},
                    {"control_min", ov.control_min},
                    {"control_max", ov.control_max},
                    {"trim_lo", ov.trim_lo},
                    {"trim_hi", ov.trim_hi},
                    {"share_outside", ov.share_outside},
                    {"flagged", ov.flagged}};

  TrimResult trim = trim_by_propensity(data, centered, opt.trim_lo, opt.trim_hi);
  doc["trim"] = {{"lo", opt.trim_lo},
                 {"hi", opt.trim_hi},
                 {"removed", trim.removed},
                 {"kept", trim.kept_rows.size()}};

  PlaceboResult placebo =
      placebo_treatment_test(data, opt.params, opt.placebo_reps, opt.params.seed);
  json runs = json::array();
  for (const auto& r : placebo.runs) {
    runs.push_back({{"ate", r.ate}, {"se", r.se}, {"reject_at_05", r.reject_at_05}});
  }
  doc["placebo_treatment"] = {{"runs", runs}, {"rejection_share", placebo.rejection_share}};

  FalsificationRun dummy =
      dummy_outcome_test(data, DummyOutcomeSpec{}, opt.params, opt.params.seed);
  doc["dummy_outcome"] = {{"outcome", "random_noise"},
                          {"ate", dummy.ate},
                          {"se", dummy.se},
                          {"reject_at_05", dummy.reject_at_05}};

  if (!opt.trend_placebo.empty()) {
    auto it = data.extras.find(opt.trend_placebo);
    if (it == data.extras.end()) {
      throw DataError(ErrorCode::MissingColumn,
                      "pre-period column '" + opt.trend_placebo + "' must be reserved");
    }
    // Center the placebo outcome with the same design, fit the heterogeneity
    // forest on the real outcome, then read the pre-period gap through its
    // kernel at a spread of training rows.
    Dataset pre = data;
    pre.Y = it->second;
    CenteredData centered_pre = local_center(pre, opt.params, opt.use_oracle);
    Forest forest = grow_causal_forest(data.X, centered.y_res, centered.w_res, opt.params);
    std::size_t n_pts = std::min<std::size_t>(50, data.n());
    Matrix pts(n_pts, data.p());
    for (std::size_t i = 0; i < n_pts; ++i) {
      std::size_t src = i * data.n() / n_pts;
      for (std::size_t j = 0; j < data.p(); ++j) pts(i, j) = data.X(src, j);
    }
    auto trend = parallel_trends_check(forest, centered_pre, pts);
    json points = json::array();
    int flagged = 0;
    for (const auto& t : trend) {
      points.push_back({{"gap", t.gap}, {"se", t.se}, {"flagged", t.flagged}});
      if (t.flagged) flagged++;
    }
    doc["parallel_trends"] = {{"note", "experimental: kernel-weighted pre-period gap"},
                              {"points", points},
                              {"flagged_share",
                               static_cast<double>(flagged) / static_cast<double>(trend.size())}};
  }

  write_json(fs::path(opt.out_dir) / "diagnostics.json", doc);
  return 0;
}

void write_sidecar(const fs::path& out, const std::string& method, json params, json extra) {
  json doc{{"method", method}, {"params", std::move(params)}};
  for (auto& [k, v] : extra.items()) doc[k] = v;
  write_json(out / ("report_" + method + ".json"), doc);
}

// Held-out evaluation pieces shared by quantile_bins / policy_value / rate:
// fit on the training share, predict on the holdout, center the holdout
// separately so its DR scores carry an independent provenance tag.
struct HoldoutEval {
  FitArtifacts train;
  Dataset holdout;
  std::vector<double> train_taus;    // finite OOB CATEs on the training rows
  std::vector<double> holdout_taus;  // training-forest predictions on holdout rows
  DrScores scores;                   // holdout DR scores
  Priority priority;                 // holdout_taus tagged with the training fit
};

HoldoutEval run_holdout_pipeline(const Options& opt, const Dataset& data) {
  if (!(opt.holdout > 0.0 && opt.holdout < 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "--holdout must be in (0,1)");
  }
  SplitPair split = split_holdout(data, 1.0 - opt.holdout, opt.params.seed);
  HoldoutEval ev;
  Dataset train = subset_rows(data, split.train);
  ev.holdout = subset_rows(data, split.holdout);

  ev.train = run_fit_pipeline(opt, std::move(train));
  OobCates oob = oob_cates(ev.train.forest, ev.train.centered, ev.train.data.X);
  for (double t : oob.tau) {
    if (std::isfinite(t)) ev.train_taus.push_back(t);
  }

  Matrix Xh = ev.holdout.X;
  if (opt.basu) Xh = select_columns(ev.holdout, ev.train.data.feature_names);
  CausalKernel kernel(ev.train.forest, ev.train.centered.y_res, ev.train.centered.w_res);
  std::vector<double> x(Xh.cols());
  for (std::size_t i = 0; i < Xh.rows(); ++i) {
    for (std::size_t j = 0; j < Xh.cols(); ++j) x[j] = Xh(i, j);
    ev.holdout_taus.push_back(kernel.point(x));
  }

  ForestParams hold_params = opt.params;
  hold_params.seed = derive_seed(opt.params.seed, 0x601d);
  CenteredData centered_h = local_center(ev.holdout, hold_params, opt.use_oracle);
  ev.scores = dr_scores(ev.holdout, centered_h, ev.holdout_taus);
  ev.priority = Priority{ev.holdout_taus, ev.train.centered.fingerprint};
  return ev;
}

int cmd_report(const Options& opt) {
  if (opt.method == "linear_on_predictions") {
    throw UsageError(ErrorCode::RefusedMethod,
                     "refusing to regress on CATE predictions: they are regularized point "
                     "estimates, so coefficients and p-values from such a fit are unreliable; "
                     "use --method blp for the best linear projection of doubly robust scores");
  }
  static const std::vector<std::string> known{
      "importance", "histogram",    "ranked",     "quantile_bins", "profile",
      "curve",      "groups",       "best_tree",  "policy_value",  "rate_autoc",
      "rate_qini",  "blp",          "calibration"};
  if (std::find(known.begin(), known.end(), opt.method) == known.end()) {
    throw UsageError(ErrorCode::UnknownMethod, "unknown report method '" + opt.method + "'");
  }

  Dataset data = load_input(opt);
  fs::create_directories(opt.out_dir);
  fs::path out(opt.out_dir);
  const std::string& m = opt.method;

  bool needs_holdout = m == "quantile_bins" || m == "profile" || m == "policy_value" ||
                       m == "rate_autoc" || m == "rate_qini";

  if (needs_holdout) {
    HoldoutEval ev = run_holdout_pipeline(opt, data);
    json prov{{"data_fingerprint", hex64(ev.train.forest.data_fingerprint)},
              {"train_centering", hex64(ev.train.centered.fingerprint)},
              {"holdout_centering", hex64(ev.scores.provenance)},
              {"train_n", ev.train.data.n()},
              {"holdout_n", ev.holdout.n()}};
    if (m == "quantile_bins" || m == "profile") {
      QuantileBinReport rep = quantile_bins(ev.train_taus, ev.scores, ev.holdout_taus, opt.k);
      if (m == "quantile_bins") {
        std::ofstream csv(out / "report_quantile_bins.csv");
        csv << "bin,lo,hi,n,estimate,se,empty\n";
        for (std::size_t b = 0; b < rep.bins.size(); ++b) {
          const auto& bin = rep.bins[b];
          csv << b << ',' << g17(bin.lo) << ',' << g17(bin.hi) << ',' << bin.n << ','
              << g17(bin.estimate) << ',' << g17(bin.se) << ',' << (bin.empty ? 1 : 0) << "\n";
        }
        write_sidecar(out, m, json{{"k", opt.k}, {"holdout", opt.holdout}},
                      json{{"provenance", prov},
                           {"thresholds", rep.thresholds},
                           {"top_vs_rest", rep.top_vs_rest},
                           {"top_vs_rest_se", rep.top_vs_rest_se},
                           {"wald_z", rep.wald_z}});
      } else {
        auto assignment = assign_quantile_bins(ev.holdout_taus, rep.thresholds);
        CovariateProfile prof = covariate_profile_by_quantile(ev.holdout, assignment, opt.k);
        std::ofstream csv(out / "report_profile.csv");
        csv << "bin,n,sparse";
        for (const auto& nm : ev.holdout.feature_names) csv << ',' << nm;
        csv << "\n";
        for (int b = 0; b < opt.k; ++b) {
          csv << b << ',' << prof.bin_n[b] << ',' << (prof.sparse[b] ? 1 : 0);
          for (double v : prof.bin_means[b]) csv << ',' << g17(v);
          csv << "\n";
        }
        write_sidecar(out, m, json{{"k", opt.k}, {"holdout", opt.holdout}},
                      json{{"provenance", prov}});
      }
    } else if (m == "policy_value") {
      auto policy = derive_policy(ev.holdout_taus, opt.threshold);
      PolicyValue pv = policy_value(policy, ev.scores, PolicyBaseline::TreatNone, ev.priority);
      std::ofstream csv(out / "report_policy_value.csv");
      csv << "p,qini_value\n";
      for (std::size_t i = 0; i < pv.qini_p.size(); ++i) {
        csv << g17(pv.qini_p[i]) << ',' << g17(pv.qini_value[i]) << "\n";
      }
      write_sidecar(out, m,
                    json{{"threshold", opt.threshold},
                         {"baseline", "treat_none"},
                         {"holdout", opt.holdout}},
                    json{{"provenance", prov}, {"value", pv.value}, {"se", pv.se}});
    } else {
      RateWeighting w = m == "rate_qini" ? RateWeighting::Qini : RateWeighting::Autoc;
      RateResult rr = rate(ev.priority, ev.scores, w, opt.bootstrap, opt.params.seed);
      std::ofstream csv(out / ("report_" + m + ".csv"));
      csv << "p,toc\n";
      for (std::size_t i = 0; i < rr.grid.size(); ++i) {
        csv << g17(rr.grid[i]) << ',' << g17(rr.toc[i]) << "\n";
      }
      write_sidecar(out, m,
                    json{{"weighting", m == "rate_qini" ? "qini" : "autoc"},
                         {"bootstrap", opt.bootstrap},
                         {"holdout", opt.holdout}},
                    json{{"provenance", prov}, {"estimate", rr.estimate}, {"se", rr.se}});
    }
    return 0;
  }

  FitArtifacts art = run_fit_pipeline(opt, std::move(data));
  json prov{{"data_fingerprint", hex64(art.forest.data_fingerprint)},
            {"centering_fingerprint", hex64(art.centered.fingerprint)}};

  if (m == "importance") {
    ImportanceVector imp = variable_importance(art.forest);
    std::ofstream csv(out / "report_importance.csv");
    csv << "feature,weight\n";
    for (std::size_t j = 0; j < imp.weights.size(); ++j) {
      csv << art.data.feature_names[j] << ',' << g17(imp.weights[j]) << "\n";
    }
    write_sidecar(out, m, json{{"decay", 0.5}, {"max_depth", 4}},
                  json{{"provenance", prov}, {"no_splits", imp.no_splits}});
    return 0;
  }

  OobCates oob = oob_cates(art.forest, art.centered, art.data.X);
  if (m == "histogram") {
    std::vector<double> finite;
    for (double t : oob.tau) {
      if (std::isfinite(t)) finite.push_back(t);
    }
    CateHistogram h = cate_histogram(finite, opt.bins);
    std::ofstream csv(out / "report_histogram.csv");
    csv << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b + 1 < h.edges.size(); ++b) {
      csv << g17(h.edges[b]) << ',' << g17(h.edges[b + 1]) << ',' << h.counts[b] << "\n";
    }
    write_sidecar(out, m, json{{"bins", opt.bins}}, json{{"provenance", prov}});
  } else if (m == "ranked") {
    CausalKernel kernel(art.forest, art.centered.y_res, art.centered.w_res);
    std::vector<double> ses(art.data.n());
    std::vector<double> x(art.data.p());
    for (std::size_t i = 0; i < art.data.n(); ++i) {
      for (std::size_t j = 0; j < art.data.p(); ++j) x[j] = art.data.X(i, j);
      ses[i] = cate_se_little_bags(kernel, x);
    }
    auto rows = ranked_cate_table(oob.tau, ses);
    std::ofstream csv(out / "report_ranked.csv");
    csv << "rank,row_id,tau_hat,se,ci_lo,ci_hi\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      csv << r << ',' << rows[r].row << ',' << g17(rows[r].tau) << ',' << g17(rows[r].se)
          << ',' << g17(rows[r].ci_lo) << ',' << g17(rows[r].ci_hi) << "\n";
    }
    write_sidecar(out, m, json{{"alpha", 0.05}}, json{{"provenance", prov}});
  } else if (m == "curve") {
    if (opt.variable.empty()) {
      throw UsageError(ErrorCode::InvalidParams, "--variable is required for curve reports");
    }
    auto it = std::find(art.data.feature_names.begin(), art.data.feature_names.end(),
                        opt.variable);
    if (it == art.data.feature_names.end()) {
      throw DataError(ErrorCode::MissingColumn, "variable '" + opt.variable + "' not in X");
    }
    std::size_t col = static_cast<std::size_t>(it - art.data.feature_names.begin());
    std::vector<double> xs, ts;
    for (std::size_t i = 0; i < art.data.n(); ++i) {
      if (std::isfinite(oob.tau[i])) {
        xs.push_back(art.data.X(i, col));
        ts.push_back(oob.tau[i]);
      }
    }
    CateCurve curve = opt.curve_bins > 0 ? cate_by_variable_binned(ts, xs, opt.curve_bins)
                                         : cate_by_variable_smoothed(ts, xs);
    std::ofstream csv(out / "report_curve.csv");
    csv << "x,value,spread,n\n";
    for (const auto& pt : curve.points) {
      csv << g17(pt.x) << ',' << g17(pt.value) << ',' << g17(pt.spread) << ',' << pt.n << "\n";
    }
    write_sidecar(out, m,
                  json{{"variable", opt.variable},
                       {"mode", opt.curve_bins > 0 ? "binned" : "smoothed"},
                       {"curve_bins", opt.curve_bins}},
                  json{{"provenance", prov}, {"bins_merged", curve.bins_merged}});
  } else if (m == "groups") {
    if (!art.data.groups) {
      throw UsageError(ErrorCode::InvalidParams, "--group-col is required for group reports");
    }
    DrScores scores = dr_scores(art.data, art.centered, oob.tau);
    auto rows = group_cates(scores, *art.data.groups);
    std::ofstream csv(out / "report_groups.csv");
    csv << "group,n,estimate,se,flagged\n";
    for (const auto& g : rows) {
      csv << g.label << ',' << g.n << ',' << g17(g.estimate) << ',' << g17(g.se) << ','
          << (g.flagged ? 1 : 0) << "\n";
    }
    write_sidecar(out, m, json::object(), json{{"provenance", prov}});
  } else if (m == "best_tree") {
    BestTree bt = best_tree(art.forest, art.centered, art.data.X);
    std::ofstream csv(out / "report_best_tree.csv");
    csv << "tree_index,r_loss\n" << bt.index << ',' << g17(bt.r_loss) << "\n";
    write_sidecar(out, m, json::object(), json{{"provenance", prov}});
  } else if (m == "blp") {
    DrScores scores = dr_scores(art.data, art.centered, oob.tau);
    LinearProjection proj =
        blp(scores, art.data.X, art.data.feature_names, opt.bootstrap, opt.params.seed);
    std::ofstream csv(out / "report_blp.csv");
    csv << "name,coef,se,t,p,bootstrap_se\n";
    for (std::size_t j = 0; j < proj.names.size(); ++j) {
      csv << proj.names[j] << ',' << g17(proj.coef[j]) << ',' << g17(proj.se[j]) << ','
          << g17(proj.t[j]) << ',' << g17(proj.p[j]) << ','
          << (proj.bootstrap_se.empty() ? "" : g17(proj.bootstrap_se[j])) << "\n";
    }
    write_sidecar(out, m, json{{"bootstrap", opt.bootstrap}}, json{{"provenance", prov}});
  } else {  // calibration
    DrScores scores = dr_scores(art.data, art.centered, oob.tau);
    CalibrationResult cal = calibration_test(oob.tau, scores);
    std::ofstream csv(out / "report_calibration.csv");
    csv << "term,coef,se,t,p\n";
    csv << "mean," << g17(cal.mean_coef) << ',' << g17(cal.mean_se) << ',' << g17(cal.mean_t)
        << ',' << g17(cal.mean_p) << "\n";
    csv << "differential," << g17(cal.diff_coef) << ',' << g17(cal.diff_se) << ','
        << g17(cal.diff_t) << ',' << g17(cal.diff_p) << "\n";
    write_sidecar(out, m, json::object(),
                  json{{"provenance", prov},
                       {"degenerate_heterogeneity", cal.degenerate_heterogeneity}});
  }
  return 0;
}

int cmd_simulate(const Options& opt) {
  DgpSpec spec;
  spec.name = opt.dgp;
  spec.n = opt.sim_n;
  spec.p = opt.sim_p;
  spec.seed = opt.params.seed;
  spec.tau_level = opt.tau_level;
  spec.tau_slope = opt.tau_slope;
  spec.noise_sd = opt.noise_sd;
  spec.confound_strength = opt.confound_strength;
  SimulationResult sim = generate(spec);
  fs::create_directories(opt.out_dir);
  save_csv(sim.data, (fs::path(opt.out_dir) / "data.csv").string());
  write_truth_csv(sim, (fs::path(opt.out_dir) / "truth.csv").string());
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"causal forest toolkit: honest forests, doubly robust inference, diagnostics"};
  app.require_subcommand(1);
  Options opt;

  CLI::App* fit = app.add_subcommand("fit", "fit a causal forest and persist it");
  register_data_flags(fit, opt);
  register_forest_flags(fit, opt);
  fit->add_flag("--basu", opt.basu, "refit on above-average-importance features");
  fit->add_flag("--basu-heterogeneity-only", opt.basu_heterogeneity_only,
                "keep the full covariate set for the nuisance models");

  CLI::App* predict = app.add_subcommand("predict", "CATEs for new rows from a saved fit");
  register_data_flags(predict, opt);
  predict->add_option("--model", opt.model_dir, "directory written by fit");
  predict->add_flag("--oob", opt.oob, "out-of-bag estimates (training rows only)");

  CLI::App* ate = app.add_subcommand("ate", "doubly robust ATE and calibration test");
  register_data_flags(ate, opt);
  register_forest_flags(ate, opt);
  ate->add_flag("--basu", opt.basu, "refit on above-average-importance features");

  CLI::App* diagnose = app.add_subcommand("diagnose", "overlap, trimming, and placebo checks");
  register_data_flags(diagnose, opt);
  register_forest_flags(diagnose, opt);
  diagnose->add_option("--trim", opt.trim_csv, "lo,hi propensity trim bounds");
  diagnose->add_option("--bins", opt.bins, "overlap histogram bins");
  diagnose->add_option("--placebo-reps", opt.placebo_reps, "placebo treatment replications");
  diagnose->add_option("--trend-placebo", opt.trend_placebo,
                       "reserved pre-period difference column for the parallel-trends check");

  CLI::App* report = app.add_subcommand("report", "plot-ready CATE summaries");
  register_data_flags(report, opt);
  register_forest_flags(report, opt);
  report->add_option("--method", opt.method, "importance | histogram | ranked | quantile_bins | "
                                             "profile | curve | groups | best_tree | "
                                             "policy_value | rate_autoc | rate_qini | blp | "
                                             "calibration");
  report->add_option("--holdout", opt.holdout, "holdout share for held-out evaluations");
  report->add_option("--k", opt.k, "quantile bin count");
  report->add_option("--threshold", opt.threshold, "policy threshold on tau");
  report->add_option("--variable", opt.variable, "covariate for curve reports");
  report->add_option("--curve-bins", opt.curve_bins, "equal-count bins (0 = smoothed)");
  report->add_option("--bootstrap", opt.bootstrap, "bootstrap replications");
  report->add_flag("--basu", opt.basu, "refit on above-average-importance features");

  CLI::App* simulate = app.add_subcommand("simulate", "synthetic benchmark data with truth");
  simulate->add_option("--dgp", opt.dgp,
                       "constant_effect | two_group | smooth_interaction | confounded | "
                       "null_noise");
  simulate->add_option("--n", opt.sim_n, "rows");
  simulate->add_option("--p", opt.sim_p, "covariates");
  simulate->add_option("--seed", opt.params.seed, "generator seed");
  simulate->add_option("--tau-level", opt.tau_level, "effect size");
  simulate->add_option("--tau-slope", opt.tau_slope, "smooth interaction slope");
  simulate->add_option("--noise-sd", opt.noise_sd, "outcome noise");
  simulate->add_option("--confound-strength", opt.confound_strength, "confounding strength");
  simulate->add_option("--out", opt.out_dir, "output directory");
  simulate->add_option("--config", opt.config_path, "JSON config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  CLI::App* active = app.get_subcommands().front();
  apply_config(active, opt);
  finalize(opt);

  if (active == fit) return cmd_fit(opt);
  if (active == predict) return cmd_predict(opt);
  if (active == ate) return cmd_ate(opt);
  if (active == diagnose) return cmd_diagnose(opt);
  if (active == report) return cmd_report(opt);
  return cmd_simulate(opt);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
