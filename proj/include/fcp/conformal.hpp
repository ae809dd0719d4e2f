#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcp/data.hpp"
#include "fcp/nn.hpp"

namespace fcp {

// Conformal quantile of the empirical score distribution augmented with a
// point mass at +infinity: the k-th smallest score with k = ceil((1-a)(n+1)),
// or +infinity when k > n.  Order statistics only, no interpolation -- the
// coverage guarantee is an order-statistic argument and interpolation would
// void it.
inline double conformal_quantile(std::vector<double> scores, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("conformal_quantile: alpha must lie in (0,1)");
  const std::size_t n = scores.size();
  const auto k = static_cast<std::size_t>(
      std::ceil((1.0 - alpha) * static_cast<double>(n + 1)));
  if (k > n) return std::numeric_limits<double>::infinity();
  std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k - 1),
                   scores.end());
  return scores[k - 1];
}

// Smallest score s such that at least `level` of the scores are <= s.
inline double empirical_quantile(std::vector<double> scores, double level) {
  if (scores.empty()) throw std::invalid_argument("empirical_quantile: empty input");
  if (!(level >= 0.0 && level <= 1.0))
    throw std::invalid_argument("empirical_quantile: level must lie in [0,1]");
  std::sort(scores.begin(), scores.end());
  const double pos = std::ceil(level * static_cast<double>(scores.size()));
  std::size_t idx = pos < 1.0 ? 0 : static_cast<std::size_t>(pos) - 1;
  idx = std::min(idx, scores.size() - 1);
  return scores[idx];
}

enum class ScoreKind {
  kOutputLinf,
  kFeatureSurrogate,
  kCqrSigned,
  kFeatureCqrSignedLo,
  kFeatureCqrSignedHi,
};

inline const char* to_string(ScoreKind k) {
  switch (k) {
    case ScoreKind::kOutputLinf: return "output_linf";
    case ScoreKind::kFeatureSurrogate: return "feature_surrogate";
    case ScoreKind::kCqrSigned: return "cqr_signed";
    case ScoreKind::kFeatureCqrSignedLo: return "feature_cqr_signed_lo";
    case ScoreKind::kFeatureCqrSignedHi: return "feature_cqr_signed_hi";
  }
  return "unknown";
}

inline ScoreKind score_kind_from_string(const std::string& s) {
  if (s == "output_linf") return ScoreKind::kOutputLinf;
  if (s == "feature_surrogate") return ScoreKind::kFeatureSurrogate;
  if (s == "cqr_signed") return ScoreKind::kCqrSigned;
  if (s == "feature_cqr_signed_lo") return ScoreKind::kFeatureCqrSignedLo;
  if (s == "feature_cqr_signed_hi") return ScoreKind::kFeatureCqrSignedHi;
  throw std::invalid_argument("unknown score kind: " + s);
}

// Sorted calibration scores together with the quantile derived from them.
// score_config_digest pins the exact scoring procedure so that detection can
// refuse to run with a different one (a mismatch would void exchangeability).
// Scores of +infinity (surrogate searches that never converged) are kept as a
// count rather than stored; q is the conformal quantile of the full multiset,
// finite and infinite entries together.
struct CalibrationRecord {
  std::vector<double> scores;  // finite scores, ascending
  std::size_t infinite_scores = 0;
  double alpha = 0.1;
  double q = 0.0;  // +infinity when the point mass at infinity is selected
  ScoreKind score_kind = ScoreKind::kOutputLinf;
  std::string score_config_digest;

  std::size_t total_scores() const { return scores.size() + infinite_scores; }
};

inline CalibrationRecord make_calibration_record(const std::vector<double>& scores,
                                                 double alpha, ScoreKind kind,
                                                 std::string digest) {
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("calibration record: alpha must lie in (0,1)");
  CalibrationRecord rec;
  for (double s : scores) {
    if (std::isnan(s) || s == -std::numeric_limits<double>::infinity())
      throw std::invalid_argument("calibration record: score must be a real or +infinity");
    if (std::isinf(s))
      ++rec.infinite_scores;
    else
      rec.scores.push_back(s);
  }
  std::sort(rec.scores.begin(), rec.scores.end());
  const std::size_t n = rec.total_scores();
  const auto k = static_cast<std::size_t>(
      std::ceil((1.0 - alpha) * static_cast<double>(n + 1)));
  rec.q = k <= rec.scores.size() ? rec.scores[k - 1]
                                 : std::numeric_limits<double>::infinity();
  rec.alpha = alpha;
  rec.score_kind = kind;
  rec.score_config_digest = std::move(digest);
  return rec;
}

// Per-dimension closed intervals in the response space.  `unbounded` marks the
// distinguished all-of-R^k band produced by an infinite quantile; `degenerate`
// marks a crossed interval that was clamped to its midpoint (empty band).
struct OutputBand {
  Vector lo, hi;
  bool unbounded = false;
  bool degenerate = false;

  bool contains(std::span<const double> y) const {
    if (unbounded) return true;
    if (degenerate) return false;
    for (std::size_t j = 0; j < y.size(); ++j)
      if (y[j] < lo[j] || y[j] > hi[j]) return false;
    return true;
  }

  double mean_width() const {
    if (unbounded) return std::numeric_limits<double>::infinity();
    if (degenerate) return 0.0;
    double s = 0.0;
    for (std::size_t j = 0; j < lo.size(); ++j) s += hi[j] - lo[j];
    return s / static_cast<double>(lo.size());
  }
};

// --- vanilla split CP (l-infinity residual score) ---------------------------

inline constexpr const char* kOutputLinfDigest = "score=output_linf";

inline CalibrationRecord vanilla_cp_calibrate(const SplitModel& model, const Dataset& ds,
                                              std::span<const std::size_t> cal_indices,
                                              double alpha) {
  if (cal_indices.empty())
    throw std::invalid_argument("vanilla_cp_calibrate: empty calibration fold");
  std::vector<double> scores;
  scores.reserve(cal_indices.size());
  Vector resid(ds.Y.cols);
  for (std::size_t i : cal_indices) {
    const Vector pred = model.forward(ds.X.row(i));
    for (std::size_t j = 0; j < resid.size(); ++j) resid[j] = ds.Y(i, j) - pred[j];
    scores.push_back(linf_norm(resid));
  }
  return make_calibration_record(std::move(scores), alpha, ScoreKind::kOutputLinf,
                                 kOutputLinfDigest);
}

// Every dimension gets the same half-width q around the point prediction.
inline OutputBand vanilla_cp_band(const CalibrationRecord& record, const SplitModel& model,
                                  std::span<const double> x) {
  if (record.score_kind != ScoreKind::kOutputLinf)
    throw std::invalid_argument("vanilla_cp_band: record was not calibrated with the "
                                "l-infinity output score");
  OutputBand band;
  const Vector pred = model.forward(x);
  band.lo = pred;
  band.hi = pred;
  if (!std::isfinite(record.q)) {
    band.unbounded = true;
    return band;
  }
  for (std::size_t j = 0; j < pred.size(); ++j) {
    band.lo[j] -= record.q;
    band.hi[j] += record.q;
  }
  return band;
}

// --- CQR (one-dimensional responses) ----------------------------------------
//
// Signed score E = max(pred_lo - y, y - pred_hi): positive when the raw
// quantile heads miss the response, negative when they over-cover.  A negative
// conformal quantile therefore shrinks the band.

inline constexpr const char* kCqrDigest = "score=cqr_signed";

inline double cqr_score(double pred_lo, double pred_hi, double y) {
  return std::max(pred_lo - y, y - pred_hi);
}

inline CalibrationRecord cqr_calibrate(const SplitModel& model_lo, const SplitModel& model_hi,
                                       const Dataset& ds,
                                       std::span<const std::size_t> cal_indices,
                                       double alpha) {
  if (cal_indices.empty()) throw std::invalid_argument("cqr_calibrate: empty calibration fold");
  if (ds.Y.cols != 1 || model_lo.output_width() != 1 || model_hi.output_width() != 1)
    throw std::invalid_argument("cqr_calibrate: CQR requires one-dimensional responses");
  std::vector<double> scores;
  scores.reserve(cal_indices.size());
  for (std::size_t i : cal_indices) {
    const double lo = model_lo.forward(ds.X.row(i))[0];
    const double hi = model_hi.forward(ds.X.row(i))[0];
    scores.push_back(cqr_score(lo, hi, ds.Y(i, 0)));
  }
  return make_calibration_record(std::move(scores), alpha, ScoreKind::kCqrSigned, kCqrDigest);
}

inline OutputBand cqr_band(const CalibrationRecord& record, const SplitModel& model_lo,
                           const SplitModel& model_hi, std::span<const double> x) {
  if (record.score_kind != ScoreKind::kCqrSigned)
    throw std::invalid_argument("cqr_band: record was not calibrated with the CQR score");
  OutputBand band;
  const double pred_lo = model_lo.forward(x)[0];
  const double pred_hi = model_hi.forward(x)[0];
  if (!std::isfinite(record.q)) {
    band.lo = {pred_lo};
    band.hi = {pred_hi};
    band.unbounded = true;
    return band;
  }
  double lo = pred_lo - record.q;
  double hi = pred_hi + record.q;
  if (lo > hi) {
    const double mid = 0.5 * (lo + hi);
    lo = hi = mid;
    band.degenerate = true;
  }
  band.lo = {lo};
  band.hi = {hi};
  return band;
}

// --- JSON --------------------------------------------------------------------
//
// {alpha, q, score_kind, score_config_digest, scores: [...]}; an infinite q is
// stored as null (JSON has no infinity).

inline void to_json(nlohmann::json& j, const CalibrationRecord& rec) {
  j = nlohmann::json{{"alpha", rec.alpha},
                     {"score_kind", to_string(rec.score_kind)},
                     {"score_config_digest", rec.score_config_digest},
                     {"scores", rec.scores},
                     {"infinite_scores", rec.infinite_scores}};
  if (std::isfinite(rec.q))
    j["q"] = rec.q;
  else
    j["q"] = nullptr;
}

inline void from_json(const nlohmann::json& j, CalibrationRecord& rec) {
  rec.alpha = j.at("alpha").get<double>();
  rec.score_kind = score_kind_from_string(j.at("score_kind").get<std::string>());
  rec.score_config_digest = j.at("score_config_digest").get<std::string>();
  rec.scores = j.at("scores").get<std::vector<double>>();
  rec.infinite_scores = j.value("infinite_scores", std::size_t{0});
  rec.q = j.at("q").is_null() ? std::numeric_limits<double>::infinity()
                              : j.at("q").get<double>();
}

}  // namespace fcp
