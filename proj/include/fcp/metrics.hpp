#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "fcp/band_estimation.hpp"
#include "fcp/conformal.hpp"
#include "fcp/feature_conformal.hpp"

namespace fcp {

inline double coverage(const std::vector<bool>& membership) {
  if (membership.empty()) throw std::invalid_argument("coverage: empty input");
  std::size_t hits = 0;
  for (bool m : membership) hits += m ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(membership.size());
}

// Mean over samples of the mean per-dimension width.  Unbounded bands carry no
// finite width; they are excluded from the average and counted separately.
inline double avg_length(const std::vector<OutputBand>& bands,
                         std::size_t* unbounded_count = nullptr) {
  if (bands.empty()) throw std::invalid_argument("avg_length: empty input");
  double total = 0.0;
  std::size_t used = 0, unbounded = 0;
  for (const OutputBand& b : bands) {
    if (b.unbounded) {
      ++unbounded;
      continue;
    }
    total += b.mean_width();
    ++used;
  }
  if (unbounded_count) *unbounded_count = unbounded;
  if (used == 0) throw std::invalid_argument("avg_length: all bands unbounded");
  return total / static_cast<double>(used);
}

// Per-sample weights w_j = |2 y_j - 1| / W with W the per-sample sum; intended
// for targets in [0,1] where weight ~ distance from the 0.5 boundary.  Samples
// with W = 0 carry no usable weights and are skipped (and counted).
inline double weighted_length(const std::vector<OutputBand>& bands, const Matrix& y_true,
                              std::size_t* skipped_count = nullptr) {
  if (bands.empty() || bands.size() != y_true.rows)
    throw std::invalid_argument("weighted_length: bands/targets size mismatch");
  double total = 0.0;
  std::size_t used = 0, skipped = 0;
  for (std::size_t i = 0; i < bands.size(); ++i) {
    const OutputBand& b = bands[i];
    if (b.unbounded) {
      ++skipped;
      continue;
    }
    double wsum = 0.0;
    for (std::size_t j = 0; j < y_true.cols; ++j) wsum += std::abs(2.0 * y_true(i, j) - 1.0);
    if (wsum == 0.0) {
      ++skipped;
      continue;
    }
    double len = 0.0;
    if (!b.degenerate)
      for (std::size_t j = 0; j < y_true.cols; ++j)
        len += std::abs(2.0 * y_true(i, j) - 1.0) / wsum * (b.hi[j] - b.lo[j]);
    total += len;
    ++used;
  }
  if (skipped_count) *skipped_count = skipped;
  if (used == 0) throw std::invalid_argument("weighted_length: no usable samples");
  return total / static_cast<double>(used);
}

// Minimum coverage over response-value tertiles (equal-count groups of the
// test set sorted by y); a cheap proxy for conditional coverage.
inline double group_coverage(const std::vector<bool>& membership,
                             const std::vector<double>& y_true, std::size_t n_groups = 3) {
  if (membership.size() != y_true.size())
    throw std::invalid_argument("group_coverage: size mismatch");
  if (n_groups < 1 || membership.size() < n_groups)
    throw std::invalid_argument("group_coverage: fewer samples than groups");
  std::vector<std::size_t> order(y_true.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return y_true[a] < y_true[b]; });
  const auto n = membership.size();
  double worst = 1.0;
  std::size_t begin = 0;
  for (std::size_t g = 1; g <= n_groups; ++g) {
    const auto end = static_cast<std::size_t>(
        std::llround(static_cast<double>(n) * static_cast<double>(g) /
                     static_cast<double>(n_groups)));
    std::size_t hits = 0;
    for (std::size_t i = begin; i < end; ++i) hits += membership[order[i]] ? 1 : 0;
    worst = std::min(worst, static_cast<double>(hits) / static_cast<double>(end - begin));
    begin = end;
  }
  return worst;
}

struct EvalReport {
  double coverage = 0.0;
  double avg_length = 0.0;
  std::optional<double> weighted_length;
  std::optional<double> group_coverage;
  std::vector<double> per_sample_lengths;  // finite bands only, sample order
  std::size_t unbounded_count = 0;
  std::size_t degenerate_count = 0;
};

// Spread diagnostics behind the expansion argument: how far individual scores
// sit from their quantile, in feature space versus after mapping each score
// through band estimation at the sample's own radius.  Feature spread uses
// absolute deviations, output spread signed ones.
struct CubicReport {
  double feature_spread = 0.0;
  double output_spread = 0.0;
  double level = 0.9;
};

inline CubicReport cubic_diagnostics(const SplitModel& model, const Dataset& ds,
                                     std::span<const std::size_t> cal_indices, double level,
                                     const SurrogateSearchConfig& cfg) {
  if (cal_indices.empty())
    throw std::invalid_argument("cubic_diagnostics: empty calibration fold");
  std::vector<double> feature_scores, output_widths;
  feature_scores.reserve(cal_indices.size());
  output_widths.reserve(cal_indices.size());
  for (std::size_t i : cal_indices) {
    const SurrogateResult res = surrogate_score(model, ds.X.row(i), ds.Y.row(i), cfg);
    if (!res.converged) continue;  // no finite per-sample radius to map
    feature_scores.push_back(res.score);
    const FeatureBand ball{model.feature_forward(ds.X.row(i)), res.score, cfg.feature_norm};
    output_widths.push_back(ibp_propagate(model, ball_to_box(ball)).mean_width());
  }
  if (feature_scores.empty())
    throw std::invalid_argument("cubic_diagnostics: no converged surrogate searches");
  const double qf = empirical_quantile(feature_scores, level);
  const double qo = empirical_quantile(output_widths, level);
  CubicReport rep;
  rep.level = level;
  for (double v : feature_scores) rep.feature_spread += std::abs(qf - v);
  for (double h : output_widths) rep.output_spread += qo - h;
  rep.feature_spread /= static_cast<double>(feature_scores.size());
  rep.output_spread /= static_cast<double>(output_widths.size());
  return rep;
}

}  // namespace fcp
