#include "cfkit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "cfkit/errors.hpp"
#include "cfkit/random.hpp"

namespace cfkit {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(field);
      field.clear();
    } else if (ch != '\r') {
      field.push_back(ch);
    }
  }
  out.push_back(field);
  return out;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  if (end != begin + s.size()) return false;
  return true;
}

std::string fmt_cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void validate_dataset(const Dataset& data) {
  std::size_t n = data.Y.size();
  if (data.W.size() != n || data.X.rows() != n) {
    throw DataError(ErrorCode::InvalidParams, "X, W, Y must have the same number of rows");
  }
  if (data.feature_names.size() != data.X.cols()) {
    throw DataError(ErrorCode::InvalidParams, "feature_names must match X columns");
  }
  std::set<std::string> seen(data.feature_names.begin(), data.feature_names.end());
  if (seen.size() != data.feature_names.size()) {
    throw DataError(ErrorCode::InvalidParams, "feature names must be unique");
  }
  for (std::size_t j = 0; j < data.X.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(data.X(i, j))) {
        throw DataError(ErrorCode::NonFiniteValue,
                        "non-finite value at row " + std::to_string(i + 1) + ", column " +
                            data.feature_names[j]);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(data.Y[i])) {
      throw DataError(ErrorCode::NonFiniteValue,
                      "non-finite outcome at row " + std::to_string(i + 1));
    }
    if (data.W[i] != 0.0 && data.W[i] != 1.0) {
      throw DataError(ErrorCode::NonBinaryTreatment,
                      "treatment must be coded 0/1; got " + fmt_cell(data.W[i]) + " at row " +
                          std::to_string(i + 1));
    }
  }
  if (data.e_oracle) {
    if (data.e_oracle->size() != n) {
      throw DataError(ErrorCode::InvalidParams, "e_oracle length mismatch");
    }
    for (std::size_t i = 0; i < n; ++i) {
      double e = (*data.e_oracle)[i];
      if (!std::isfinite(e) || e <= 0.0 || e >= 1.0) {
        throw DataError(ErrorCode::PropensityOutOfBounds,
                        "oracle propensity must lie in (0,1); got " + fmt_cell(e) + " at row " +
                            std::to_string(i + 1));
      }
    }
  }
  if (data.groups && data.groups->size() != n) {
    throw DataError(ErrorCode::InvalidParams, "group column length mismatch");
  }
  for (const auto& [name, col] : data.extras) {
    if (col.size() != n) {
      throw DataError(ErrorCode::InvalidParams, "reserved column " + name + " length mismatch");
    }
  }
}

void validate_for_estimation(const Dataset& data) {
  if (data.n() == 0) throw DataError(ErrorCode::EmptyFile, "dataset has no rows");
  bool any0 = false, any1 = false;
  for (double w : data.W) {
    any0 |= (w == 0.0);
    any1 |= (w == 1.0);
  }
  if (!any0 || !any1) {
    throw DataError(ErrorCode::ZeroTreatmentVariation,
                    "treatment must contain both classes for estimation");
  }
}

Dataset load_csv(const std::string& path, const ColumnRoles& roles) {
  std::ifstream in(path);
  if (!in) throw DataError(ErrorCode::EmptyFile, "cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(ErrorCode::EmptyFile, path + " is empty");
  std::vector<std::string> header = split_line(line);

  auto find_col = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };

  // An empty role name marks the column as absent (prediction inputs carry no
  // treatment or outcome); the vector is zero-filled.
  int w_col = -1;
  if (!roles.treatment.empty()) {
    w_col = find_col(roles.treatment);
    if (w_col < 0) throw DataError(ErrorCode::MissingColumn, "missing treatment column " + roles.treatment);
  }
  int y_col = -1;
  if (!roles.outcome.empty()) {
    y_col = find_col(roles.outcome);
    if (y_col < 0) throw DataError(ErrorCode::MissingColumn, "missing outcome column " + roles.outcome);
  }
  int e_col = -1;
  if (!roles.oracle_propensity.empty()) {
    e_col = find_col(roles.oracle_propensity);
    if (e_col < 0) {
      throw DataError(ErrorCode::MissingColumn,
                      "missing oracle propensity column " + roles.oracle_propensity);
    }
  }
  int g_col = -1;
  if (!roles.group.empty()) {
    g_col = find_col(roles.group);
    if (g_col < 0) throw DataError(ErrorCode::MissingColumn, "missing group column " + roles.group);
  }
  std::vector<int> reserved_cols;
  for (const auto& name : roles.reserved) {
    int c = find_col(name);
    if (c < 0) throw DataError(ErrorCode::MissingColumn, "missing reserved column " + name);
    reserved_cols.push_back(c);
  }

  std::vector<int> x_cols;
  std::vector<std::string> x_names;
  if (!roles.covariates.empty()) {
    for (const auto& name : roles.covariates) {
      int c = find_col(name);
      if (c < 0) throw DataError(ErrorCode::MissingColumn, "missing covariate column " + name);
      x_cols.push_back(c);
      x_names.push_back(name);
    }
  } else {
    for (int c = 0; c < static_cast<int>(header.size()); ++c) {
      if (c == w_col || c == y_col || c == e_col || c == g_col) continue;
      if (std::find(reserved_cols.begin(), reserved_cols.end(), c) != reserved_cols.end()) continue;
      x_cols.push_back(c);
      x_names.push_back(header[c]);
    }
  }

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields = split_line(line);
    if (fields.size() != header.size()) {
      throw DataError(ErrorCode::NonFiniteValue,
                      "row " + std::to_string(rows.size() + 1) + " has " +
                          std::to_string(fields.size()) + " fields, expected " +
                          std::to_string(header.size()));
    }
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw DataError(ErrorCode::EmptyFile, path + " has a header but no rows");

  std::size_t n = rows.size();
  Dataset data;
  data.feature_names = x_names;
  data.X = Matrix(n, x_cols.size());
  data.W.resize(n);
  data.Y.resize(n);
  if (e_col >= 0) data.e_oracle = std::vector<double>(n);
  if (g_col >= 0) data.groups = std::vector<std::string>(n);
  for (std::size_t k = 0; k < reserved_cols.size(); ++k) {
    data.extras[roles.reserved[k]] = std::vector<double>(n);
  }

  auto parse_numeric = [&](const std::string& cell, std::size_t i, const std::string& col) {
    double v;
    if (!parse_double(cell, v) || !std::isfinite(v)) {
      throw DataError(ErrorCode::NonFiniteValue,
                      "non-finite value '" + cell + "' at row " + std::to_string(i + 1) +
                          ", column " + col);
    }
    return v;
  };

  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = rows[i];
    for (std::size_t j = 0; j < x_cols.size(); ++j) {
      data.X(i, j) = parse_numeric(f[x_cols[j]], i, x_names[j]);
    }
    if (w_col >= 0) {
      const std::string& w_cell = f[w_col];
      if (!roles.treatment_mapping.empty()) {
        auto it = roles.treatment_mapping.find(w_cell);
        if (it == roles.treatment_mapping.end()) {
          throw DataError(ErrorCode::NonBinaryTreatment,
                          "treatment level '" + w_cell + "' at row " + std::to_string(i + 1) +
                              " has no declared mapping");
        }
        data.W[i] = it->second;
      } else {
        double v;
        if (!parse_double(w_cell, v) || (v != 0.0 && v != 1.0)) {
          throw DataError(ErrorCode::NonBinaryTreatment,
                          "treatment must be 0/1; got '" + w_cell + "' at row " +
                              std::to_string(i + 1));
        }
        data.W[i] = v;
      }
    }
    if (y_col >= 0) data.Y[i] = parse_numeric(f[y_col], i, roles.outcome);
    if (e_col >= 0) (*data.e_oracle)[i] = parse_numeric(f[e_col], i, roles.oracle_propensity);
    if (g_col >= 0) (*data.groups)[i] = f[g_col];
    for (std::size_t k = 0; k < reserved_cols.size(); ++k) {
      data.extras[roles.reserved[k]][i] = parse_numeric(f[reserved_cols[k]], i, roles.reserved[k]);
    }
  }

  validate_dataset(data);
  return data;
}

void save_csv(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError(ErrorCode::EmptyFile, "cannot write " + path);
  for (const auto& name : data.feature_names) out << name << ',';
  out << "W,Y";
  if (data.e_oracle) out << ",e_oracle";
  if (data.groups) out << ",group";
  for (const auto& [name, col] : data.extras) out << ',' << name;
  out << '\n';
  for (std::size_t i = 0; i < data.n(); ++i) {
    for (std::size_t j = 0; j < data.p(); ++j) out << fmt_cell(data.X(i, j)) << ',';
    out << fmt_cell(data.W[i]) << ',' << fmt_cell(data.Y[i]);
    if (data.e_oracle) out << ',' << fmt_cell((*data.e_oracle)[i]);
    if (data.groups) out << ',' << (*data.groups)[i];
    for (const auto& [name, col] : data.extras) out << ',' << fmt_cell(col[i]);
    out << '\n';
  }
}

Dataset first_differences(const Dataset& data, const FirstDifferenceSpec& spec) {
  for (const auto& name : {spec.pre_column, spec.post_column}) {
    if (std::find(data.feature_names.begin(), data.feature_names.end(), name) !=
        data.feature_names.end()) {
      throw DataError(ErrorCode::MissingColumn,
                      "column " + name + " is a covariate; outcome periods must be reserved");
    }
    if (!data.extras.count(name)) {
      throw DataError(ErrorCode::MissingColumn, "missing reserved column " + name);
    }
  }
  Dataset out = data;
  const auto& pre = data.extras.at(spec.pre_column);
  const auto& post = data.extras.at(spec.post_column);
  for (std::size_t i = 0; i < data.n(); ++i) out.Y[i] = post[i] - pre[i];
  return out;
}

SplitPair split_holdout(std::size_t n, double fraction, std::uint64_t seed) {
  if (n == 0) throw DataError(ErrorCode::EmptyFile, "cannot split an empty dataset");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw UsageError(ErrorCode::InvalidParams, "holdout fraction must lie in (0,1)");
  }
  // The shuffled prefix always holds the smaller side, so calling with f and
  // 1-f yields the same partition with the roles swapped.
  double small_f = std::min(fraction, 1.0 - fraction);
  std::size_t k =
      static_cast<std::size_t>(std::floor(small_f * static_cast<double>(n) + 0.5));
  if (k < 1 || k >= n) {
    throw DataError(ErrorCode::DegenerateSplit, "split would leave an empty side");
  }
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, 0x5117));
  rng.shuffle(order);
  std::vector<int> small(order.begin(), order.begin() + k);
  std::vector<int> big(order.begin() + k, order.end());
  std::sort(small.begin(), small.end());
  std::sort(big.begin(), big.end());
  SplitPair pair;
  if (fraction <= 0.5) {
    pair.train = std::move(small);
    pair.holdout = std::move(big);
  } else {
    pair.train = std::move(big);
    pair.holdout = std::move(small);
  }
  return pair;
}

SplitPair split_holdout(const Dataset& data, double fraction, std::uint64_t seed) {
  return split_holdout(data.n(), fraction, seed);
}

Dataset subset_rows(const Dataset& data, const std::vector<int>& rows) {
  Dataset out;
  out.feature_names = data.feature_names;
  out.X = Matrix(rows.size(), data.p());
  out.W.resize(rows.size());
  out.Y.resize(rows.size());
  if (data.e_oracle) out.e_oracle = std::vector<double>(rows.size());
  if (data.groups) out.groups = std::vector<std::string>(rows.size());
  for (const auto& [name, col] : data.extras) out.extras[name] = std::vector<double>(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    int i = rows[k];
    for (std::size_t j = 0; j < data.p(); ++j) out.X(k, j) = data.X(i, j);
    out.W[k] = data.W[i];
    out.Y[k] = data.Y[i];
    if (data.e_oracle) (*out.e_oracle)[k] = (*data.e_oracle)[i];
    if (data.groups) (*out.groups)[k] = (*data.groups)[i];
    for (const auto& [name, col] : data.extras) out.extras[name][k] = col[i];
  }
  return out;
}

}  // namespace cfkit
