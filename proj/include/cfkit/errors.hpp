#pragma once

#include <stdexcept>
#include <string>

namespace cfkit {

// Error taxonomy. The category drives the CLI exit code:
// usage errors -> 1, data errors -> 2, numerical failures -> 3.
enum class ErrorCode {
  // usage / configuration
  InvalidParams,
  UnknownDgp,
  UnknownMethod,
  BadFormatVersion,
  RefusedMethod,
  // data
  MissingColumn,
  NonBinaryTreatment,
  NonFiniteValue,
  EmptyFile,
  DegenerateSplit,
  InsufficientData,
  ZeroTreatmentVariation,
  MissingOraclePropensity,
  PropensityOutOfBounds,
  EmptyAfterTrim,
  NotHeldOut,
  // numerical
  NoEligibleTrees,
  DegenerateKernel,
  TooFewGroups,
  RankDeficient,
  DegeneratePredictions,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cfkit
