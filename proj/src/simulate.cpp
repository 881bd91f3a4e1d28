#include "cfkit/simulate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "cfkit/errors.hpp"
#include "cfkit/random.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {

enum class Dgp { ConstantEffect, TwoGroup, SmoothInteraction, Confounded, NullNoise };

Dgp parse_dgp(const std::string& name) {
  if (name == "constant_effect") return Dgp::ConstantEffect;
  if (name == "two_group") return Dgp::TwoGroup;
  if (name == "smooth_interaction") return Dgp::SmoothInteraction;
  if (name == "confounded") return Dgp::Confounded;
  if (name == "null_noise") return Dgp::NullNoise;
  throw UsageError(ErrorCode::UnknownDgp, "unknown DGP '" + name + "'");
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

SimulationResult generate(const DgpSpec& spec) {
  Dgp dgp = parse_dgp(spec.name);
  if (spec.n < 10 || spec.p < 1) {
    throw UsageError(ErrorCode::InvalidParams, "simulation requires n >= 10 and p >= 1");
  }
  const std::size_t n = spec.n, p = spec.p;
  // sd of uniform(0,1); used to standardize x1 for the smooth interaction.
  const double sd_u = std::sqrt(1.0 / 12.0);
  const std::size_t baseline_col = p >= 2 ? 1 : 0;

  SimulationResult sim;
  sim.data.X = Matrix(n, p);
  sim.data.feature_names.resize(p);
  for (std::size_t j = 0; j < p; ++j) sim.data.feature_names[j] = "x" + std::to_string(j + 1);
  sim.data.W.resize(n);
  sim.data.Y.resize(n);
  sim.true_tau.resize(n);
  if (dgp != Dgp::Confounded) sim.data.e_oracle = std::vector<double>(n);

  Rng rng(derive_seed(spec.seed, 0xd9b));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) sim.data.X(i, j) = rng.uniform01();
    double x1 = sim.data.X(i, 0);
    double e = 0.5;
    if (dgp == Dgp::Confounded) e = logistic(spec.confound_strength * x1 - 1.0);
    sim.data.W[i] = rng.uniform01() < e ? 1.0 : 0.0;
    if (sim.data.e_oracle) (*sim.data.e_oracle)[i] = 0.5;

    double tau = 0.0;
    switch (dgp) {
      case Dgp::ConstantEffect: tau = spec.tau_level; break;
      case Dgp::TwoGroup: tau = x1 > 0.5 ? spec.tau_level : 0.0; break;
      case Dgp::SmoothInteraction: tau = 1.0 + spec.tau_slope * (x1 - 0.5) / sd_u; break;
      case Dgp::Confounded: tau = spec.tau_level; break;
      case Dgp::NullNoise: tau = 0.0; break;
    }
    sim.true_tau[i] = tau;

    double baseline = 2.0 * sim.data.X(i, baseline_col);
    if (dgp == Dgp::Confounded) baseline += spec.confound_strength * x1;
    sim.data.Y[i] = baseline + tau * sim.data.W[i] + spec.noise_sd * rng.normal();
  }
  sim.true_ate = mean(sim.true_tau);
  return sim;
}

void write_truth_csv(const SimulationResult& sim, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(ErrorCode::EmptyFile, "cannot write " + path);
  out << "row_id,true_tau\n";
  char buf[32];
  for (std::size_t i = 0; i < sim.true_tau.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", sim.true_tau[i]);
    out << i << ',' << buf << '\n';
  }
}

}  // namespace cfkit
