#include "cfkit/centering.hpp"

#include <algorithm>

#include "cfkit/errors.hpp"
#include "cfkit/random.hpp"
#include "cfkit/stats.hpp"

namespace cfkit {

namespace {
constexpr std::uint64_t kOutcomeForestTag = 11;
constexpr std::uint64_t kPropensityForestTag = 12;
}  // namespace

CenteredData local_center(const Dataset& data, const ForestParams& params, bool use_oracle) {
  validate_for_estimation(data);
  if (use_oracle && !data.e_oracle) {
    throw DataError(ErrorCode::MissingOraclePropensity,
                    "oracle centering requested but no oracle propensity column is present");
  }
  const std::size_t n = data.n();
  CenteredData out;
  out.m_hat.resize(n);
  out.e_hat.resize(n);
  out.y_res.resize(n);
  out.w_res.resize(n);

  ForestParams m_params = params;
  m_params.seed = derive_seed(params.seed, kOutcomeForestTag);
  Forest m_forest = grow_regression_forest(data.X, data.Y, m_params);
  OobPrediction m_oob = predict_oob(m_forest, data.X);
  if (!m_oob.missing_rows.empty()) {
    throw NumericError(ErrorCode::NoEligibleTrees,
                       std::to_string(m_oob.missing_rows.size()) +
                           " rows appear in every tree's subsample; cannot center out-of-bag");
  }
  out.m_hat = std::move(m_oob.values);
  out.nuisance_fits = 1;

  if (use_oracle) {
    out.source = PropensitySource::Oracle;
    out.e_hat = *data.e_oracle;
  } else {
    out.source = PropensitySource::Estimated;
    ForestParams e_params = params;
    e_params.seed = derive_seed(params.seed, kPropensityForestTag);
    Forest e_forest = grow_regression_forest(data.X, data.W, e_params);
    OobPrediction e_oob = predict_oob(e_forest, data.X);
    if (!e_oob.missing_rows.empty()) {
      throw NumericError(ErrorCode::NoEligibleTrees,
                         std::to_string(e_oob.missing_rows.size()) +
                             " rows appear in every tree's subsample; cannot center out-of-bag");
    }
    out.e_hat = std::move(e_oob.values);
    for (double& e : out.e_hat) e = std::clamp(e, kPropensityClampLo, kPropensityClampHi);
    out.nuisance_fits = 2;
  }

  // Residuals are the plain differences, nothing else: no trimming,
  // winsorizing, or rescaling happens between centering and estimation.
  for (std::size_t i = 0; i < n; ++i) {
    out.y_res[i] = data.Y[i] - out.m_hat[i];
    out.w_res[i] = data.W[i] - out.e_hat[i];
  }
  out.fingerprint = fnv1a(out.w_res, fnv1a(out.y_res));
  return out;
}

}  // namespace cfkit
