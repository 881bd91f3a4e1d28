#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfkit/dataset.hpp"

namespace cfkit {

// Synthetic benchmark generators. Covariates are iid uniform(0,1); baseline
// effect is 2 * x2 (2 * x1 when p == 1); treatment is randomized at 0.5 with
// the oracle propensity recorded, except "confounded" where
// P(W=1|X) = logistic(confound_strength * x1 - 1) and the oracle column is
// deliberately omitted.
struct DgpSpec {
  std::string name;  // constant_effect | two_group | smooth_interaction | confounded | null_noise
  std::size_t n = 1000;
  std::size_t p = 10;
  std::uint64_t seed = 1;
  double tau_level = 1.0;         // constant_effect / two_group / confounded effect size
  double tau_slope = 2.0;         // smooth_interaction slope on standardized x1
  double noise_sd = 1.0;
  double confound_strength = 2.0; // x1 coefficient in both the logit and the outcome
};

struct SimulationResult {
  Dataset data;
  std::vector<double> true_tau;
  double true_ate = 0.0;
};

SimulationResult generate(const DgpSpec& spec);

void write_truth_csv(const SimulationResult& sim, const std::string& path);

}  // namespace cfkit
