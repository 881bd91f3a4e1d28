#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfkit/matrix.hpp"

namespace cfkit {

// Column-role mapping used when ingesting a CSV. Covariates left empty means
// "every column not claimed by another role". Reserved columns are kept out of
// X but carried along for later transforms (first differences, placebo
// outcomes).
struct ColumnRoles {
  std::string treatment = "W";
  std::string outcome = "Y";
  std::vector<std::string> covariates;
  std::string oracle_propensity;
  std::string group;
  std::vector<std::string> reserved;
  // Optional two-level string coding for the treatment column, e.g. {"ctl",0},{"trt",1}.
  std::map<std::string, double> treatment_mapping;
};

struct Dataset {
  Matrix X;
  std::vector<std::string> feature_names;
  std::vector<double> W;
  std::vector<double> Y;
  std::optional<std::vector<double>> e_oracle;
  std::optional<std::vector<std::string>> groups;
  // Reserved columns by name (not part of X).
  std::map<std::string, std::vector<double>> extras;

  std::size_t n() const { return Y.size(); }
  std::size_t p() const { return X.cols(); }
};

struct FirstDifferenceSpec {
  std::string pre_column;
  std::string post_column;
};

struct SplitPair {
  std::vector<int> train;
  std::vector<int> holdout;
};

Dataset load_csv(const std::string& path, const ColumnRoles& roles);
void save_csv(const Dataset& data, const std::string& path);

// Y := post - pre, X and W unchanged. Both columns must be reserved (outside X).
Dataset first_differences(const Dataset& data, const FirstDifferenceSpec& spec);

// Deterministic disjoint partition. The same seed with fractions f and 1-f
// yields mirrored partitions; the smaller side gets floor(min(f,1-f)*n + 0.5)
// rows, so |train|/n is always within 1/n of the requested fraction.
SplitPair split_holdout(std::size_t n, double fraction, std::uint64_t seed);
SplitPair split_holdout(const Dataset& data, double fraction, std::uint64_t seed);

Dataset subset_rows(const Dataset& data, const std::vector<int>& rows);

// Checks invariants needed before any estimation call (both treatment classes
// present, nonempty).
void validate_for_estimation(const Dataset& data);

// Structural checks shared by every constructor path (finiteness, unique
// feature names, binary W, e_oracle in (0,1)).
void validate_dataset(const Dataset& data);

}  // namespace cfkit
