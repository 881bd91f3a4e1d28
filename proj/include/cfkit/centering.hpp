#pragma once

#include <cstdint>
#include <vector>

#include "cfkit/dataset.hpp"
#include "cfkit/forest.hpp"

namespace cfkit {

enum class PropensitySource { Oracle, Estimated };

struct CenteredData {
  std::vector<double> m_hat;
  std::vector<double> e_hat;
  std::vector<double> y_res;  // Y - m_hat
  std::vector<double> w_res;  // W - e_hat
  PropensitySource source = PropensitySource::Estimated;
  // Number of nuisance forests fitted; the oracle path must never fit a
  // propensity model, so it reports exactly one.
  int nuisance_fits = 0;
  // Hash of the residual vectors; downstream held-out checks compare these
  // tags to detect reuse of the same rows.
  std::uint64_t fingerprint = 0;
};

// Residualizes outcome and treatment with out-of-bag nuisance forests.
// With use_oracle the recorded propensity column is used verbatim and no
// propensity model is fitted; estimated propensities are clamped to
// [0.01, 0.99] before residualizing.
CenteredData local_center(const Dataset& data, const ForestParams& params, bool use_oracle);

inline constexpr double kPropensityClampLo = 0.01;
inline constexpr double kPropensityClampHi = 0.99;

}  // namespace cfkit
