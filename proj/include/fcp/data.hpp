#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcp/matrix.hpp"
#include "fcp/rng.hpp"

namespace fcp {

struct Dataset {
  Matrix X;
  Matrix Y;
  std::vector<std::string> feature_names;  // optional, may be empty
  std::vector<std::string> target_names;

  std::size_t size() const { return X.rows; }
  std::size_t num_features() const { return X.cols; }
  std::size_t num_targets() const { return Y.cols; }
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> cal;
  std::vector<std::size_t> test;
};

namespace detail {
inline constexpr std::uint64_t kStreamGenWeights = 0x21;
inline constexpr std::uint64_t kStreamGenX = 0x22;
inline constexpr std::uint64_t kStreamGenNoise = 0x23;
inline constexpr std::uint64_t kStreamSplit = 0x24;
}  // namespace detail

inline constexpr std::size_t kSyntheticMultidimInputs = 100;
inline constexpr std::size_t kSyntheticMultidimOutputs = 10;

// Coefficient matrix of the linear synthetic task, exposed so tests can check
// noise recovery against the generating process.
inline Matrix synthetic_multidim_weights(std::uint64_t seed) {
  Rng rng(seed, detail::kStreamGenWeights);
  Matrix w(kSyntheticMultidimOutputs, kSyntheticMultidimInputs);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kSyntheticMultidimInputs));
  for (double& v : w.data) v = rng.normal() * scale;
  return w;
}

// y = W x + eps with x ~ U[0,1]^100, eps ~ N(0, I_10); W is drawn once per seed.
inline Dataset gen_synthetic_multidim(std::uint64_t seed, std::size_t n) {
  if (n < 1) throw std::invalid_argument("gen_synthetic_multidim: n must be >= 1");
  const Matrix w = synthetic_multidim_weights(seed);
  Rng rx(seed, detail::kStreamGenX);
  Rng rn(seed, detail::kStreamGenNoise);
  Dataset ds;
  ds.X = Matrix(n, kSyntheticMultidimInputs);
  ds.Y = Matrix(n, kSyntheticMultidimOutputs);
  for (double& v : ds.X.data) v = rx.uniform01();
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = ds.X.row(i);
    for (std::size_t j = 0; j < kSyntheticMultidimOutputs; ++j)
      ds.Y(i, j) = dot(w.row(j), xi) + rn.normal();
  }
  return ds;
}

// One-dimensional heteroscedastic task: x ~ U[0,5], y = x sin x + (0.1 + 0.2 x) eps.
// The noise scale grows with x, so adaptive interval methods have something to win.
inline Dataset gen_synthetic_1d_hetero(std::uint64_t seed, std::size_t n) {
  if (n < 1) throw std::invalid_argument("gen_synthetic_1d_hetero: n must be >= 1");
  Rng rx(seed, detail::kStreamGenX);
  Rng rn(seed, detail::kStreamGenNoise);
  Dataset ds;
  ds.X = Matrix(n, 1);
  ds.Y = Matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rx.uniform(0.0, 5.0);
    ds.X(i, 0) = x;
    ds.Y(i, 0) = x * std::sin(x) + (0.1 + 0.2 * x) * rn.normal();
  }
  return ds;
}

// 2:2:1-style split: a seeded permutation partitioned by cumulative ratios.
// Fold sizes differ from the exact proportions by less than one sample each.
inline SplitIndices split_dataset(std::size_t n, std::array<double, 3> ratios,
                                  std::uint64_t seed) {
  for (double r : ratios)
    if (!(r > 0.0)) throw std::invalid_argument("split_dataset: ratios must be positive");
  if (n < 3) throw std::invalid_argument("split_dataset: n smaller than number of parts");
  const double total = ratios[0] + ratios[1] + ratios[2];
  auto boundary = [&](double prefix) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * prefix / total));
  };
  std::size_t b1 = boundary(ratios[0]);
  std::size_t b2 = boundary(ratios[0] + ratios[1]);
  b1 = std::max<std::size_t>(b1, 1);
  b2 = std::max(b2, b1 + 1);
  if (b2 >= n) b2 = n - 1;
  if (!(b1 >= 1 && b1 < b2 && b2 < n))
    throw std::invalid_argument("split_dataset: n smaller than number of parts");

  const std::vector<std::size_t> perm = Rng(seed, detail::kStreamSplit).permutation(n);
  SplitIndices out;
  out.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(b1));
  out.cal.assign(perm.begin() + static_cast<std::ptrdiff_t>(b1),
                 perm.begin() + static_cast<std::ptrdiff_t>(b2));
  out.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(b2), perm.end());
  return out;
}

// Per-column affine normalization.  Statistics come from the fit rows only
// (the training fold), so calibration and test rows never leak into them.
// Zero-variance columns pass through untouched (mean 0, std 1).
struct StandardizerState {
  Vector x_mean, x_std;
  Vector y_mean, y_std;  // empty when targets were not standardized

  bool has_y() const { return !y_mean.empty(); }
};

namespace detail {

inline void fit_columns(const Matrix& m, std::span<const std::size_t> rows, Vector& mean,
                        Vector& stdev) {
  mean.assign(m.cols, 0.0);
  stdev.assign(m.cols, 0.0);
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < m.cols; ++j) mean[j] += m(r, j);
  for (double& v : mean) v *= inv_n;
  for (std::size_t r : rows)
    for (std::size_t j = 0; j < m.cols; ++j) {
      const double d = m(r, j) - mean[j];
      stdev[j] += d * d;
    }
  for (std::size_t j = 0; j < m.cols; ++j) {
    stdev[j] = std::sqrt(stdev[j] * inv_n);
    if (stdev[j] == 0.0) {
      mean[j] = 0.0;
      stdev[j] = 1.0;
    }
  }
}

inline void transform_columns(Matrix& m, const Vector& mean, const Vector& stdev) {
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = (m(i, j) - mean[j]) / stdev[j];
}

}  // namespace detail

inline std::pair<Dataset, StandardizerState> standardize(
    const Dataset& ds, std::span<const std::size_t> fit_indices, bool include_y = true) {
  if (fit_indices.empty()) throw std::invalid_argument("standardize: empty fit index set");
  StandardizerState st;
  detail::fit_columns(ds.X, fit_indices, st.x_mean, st.x_std);
  Dataset out = ds;
  detail::transform_columns(out.X, st.x_mean, st.x_std);
  if (include_y) {
    detail::fit_columns(ds.Y, fit_indices, st.y_mean, st.y_std);
    detail::transform_columns(out.Y, st.y_mean, st.y_std);
  }
  return {std::move(out), std::move(st)};
}

inline Vector invert_y(const StandardizerState& st, std::span<const double> y) {
  if (!st.has_y()) return Vector(y.begin(), y.end());
  Vector out(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) out[j] = y[j] * st.y_std[j] + st.y_mean[j];
  return out;
}

inline Dataset invert(const StandardizerState& st, const Dataset& ds) {
  Dataset out = ds;
  for (std::size_t i = 0; i < out.X.rows; ++i)
    for (std::size_t j = 0; j < out.X.cols; ++j)
      out.X(i, j) = out.X(i, j) * st.x_std[j] + st.x_mean[j];
  if (st.has_y())
    for (std::size_t i = 0; i < out.Y.rows; ++i)
      for (std::size_t j = 0; j < out.Y.cols; ++j)
        out.Y(i, j) = out.Y(i, j) * st.y_std[j] + st.y_mean[j];
  return out;
}

// --- CSV -------------------------------------------------------------------
//
// Comma-separated, UTF-8, one header row, decimal-point reals.  Target columns
// are selected by name and become Y in the order given; the remaining columns
// become X in file order.  Every referenced cell must parse as a finite real.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

inline double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
  while (end > begin && (*(end - 1) == ' ' || *(end - 1) == '\t')) --end;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end || !std::isfinite(value))
    throw std::runtime_error("load_csv: cannot parse '" + cell + "' as a finite real at data row " +
                             std::to_string(row) + ", column '" + col + "'");
  return value;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path,
                        const std::vector<std::string>& target_columns) {
  if (target_columns.empty()) throw std::runtime_error("load_csv: empty target column set");
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("load_csv: missing header row in " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);

  std::vector<std::size_t> target_idx;
  for (const std::string& t : target_columns) {
    bool found = false;
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == t) {
        target_idx.push_back(j);
        found = true;
        break;
      }
    if (!found) throw std::runtime_error("load_csv: target column '" + t + "' not found");
  }
  std::vector<bool> is_target(header.size(), false);
  for (std::size_t j : target_idx) is_target[j] = true;
  std::vector<std::size_t> feature_idx;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (!is_target[j]) feature_idx.push_back(j);
  if (feature_idx.empty()) throw std::runtime_error("load_csv: no feature columns left");

  std::vector<std::vector<double>> xrows, yrows;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ++row;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("load_csv: data row " + std::to_string(row) + " has " +
                               std::to_string(cells.size()) + " cells, header has " +
                               std::to_string(header.size()));
    std::vector<double> xr, yr;
    xr.reserve(feature_idx.size());
    yr.reserve(target_idx.size());
    for (std::size_t j : feature_idx) xr.push_back(detail::parse_cell(cells[j], row, header[j]));
    for (std::size_t j : target_idx) yr.push_back(detail::parse_cell(cells[j], row, header[j]));
    xrows.push_back(std::move(xr));
    yrows.push_back(std::move(yr));
  }
  if (xrows.empty()) throw std::runtime_error("load_csv: no data rows in " + path);

  Dataset ds;
  ds.X = Matrix(xrows.size(), feature_idx.size());
  ds.Y = Matrix(yrows.size(), target_idx.size());
  for (std::size_t i = 0; i < xrows.size(); ++i) {
    for (std::size_t j = 0; j < feature_idx.size(); ++j) ds.X(i, j) = xrows[i][j];
    for (std::size_t j = 0; j < target_idx.size(); ++j) ds.Y(i, j) = yrows[i][j];
  }
  for (std::size_t j : feature_idx) ds.feature_names.push_back(header[j]);
  for (std::size_t j : target_idx) ds.target_names.push_back(header[j]);
  return ds;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_csv: cannot open " + path);
  os.precision(17);
  for (std::size_t j = 0; j < ds.X.cols; ++j) {
    if (j) os << ',';
    os << (j < ds.feature_names.size() ? ds.feature_names[j] : "x" + std::to_string(j));
  }
  for (std::size_t j = 0; j < ds.Y.cols; ++j)
    os << ',' << (j < ds.target_names.size() ? ds.target_names[j] : "y" + std::to_string(j));
  os << '\n';
  for (std::size_t i = 0; i < ds.X.rows; ++i) {
    for (std::size_t j = 0; j < ds.X.cols; ++j) {
      if (j) os << ',';
      os << ds.X(i, j);
    }
    for (std::size_t j = 0; j < ds.Y.cols; ++j) os << ',' << ds.Y(i, j);
    os << '\n';
  }
  if (!os) throw std::runtime_error("save_csv: write failed for " + path);
}

}  // namespace fcp
