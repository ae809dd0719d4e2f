#pragma once

// Feature-space conformal prediction.
//
// The non-conformity score of a pair (x, y) is the distance from the trained
// feature f(x) to a surrogate feature u with head(u) ~= y, found by gradient
// descent on ||head(u) - y||^2 starting from f(x).  The search returns an
// upper bound on the distance to the nearest exact surrogate; running the
// identical search on the calibration fold and at test time keeps the scores
// exchangeable, which is all the coverage guarantee needs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fcp/band_estimation.hpp"
#include "fcp/conformal.hpp"
#include "fcp/data.hpp"
#include "fcp/nn.hpp"

namespace fcp {

struct SurrogateSearchConfig {
  double eta = 0.05;       // gradient step size
  int max_steps = 100;     // step budget M
  double rel_tol = 0.01;   // stop when ||head(u)-y||^2 / max(||y||^2, abs_tol) < rel_tol
  double abs_tol = 1e-8;   // denominator floor for near-zero targets
  Norm feature_norm = Norm::kLinf;

  void validate() const {
    if (!(eta > 0.0)) throw std::invalid_argument("surrogate search: eta must be positive");
    if (max_steps < 1) throw std::invalid_argument("surrogate search: max_steps must be >= 1");
    if (!(rel_tol > 0.0) || !(abs_tol > 0.0))
      throw std::invalid_argument("surrogate search: tolerances must be positive");
  }

  // Pins every knob that affects the score so a calibration record can refuse
  // detection under a different procedure.
  std::string digest(bool classification = false) const {
    char buf[192];
    std::snprintf(buf, sizeof(buf),
                  "score=surrogate;loss=%s;eta=%.17g;steps=%d;rel_tol=%.17g;abs_tol=%.17g;norm=%s",
                  classification ? "ce" : "mse", eta, max_steps, rel_tol, abs_tol,
                  to_string(feature_norm));
    return buf;
  }

  SurrogateSearchConfig with_steps(int steps) const {
    SurrogateSearchConfig c = *this;
    c.max_steps = steps;
    return c;
  }
};

struct SurrogateResult {
  double score = 0.0;
  int steps_used = 0;
  bool converged = false;
};

namespace detail {

inline constexpr std::uint64_t kStreamClassifySample = 0x41;

// One descent, scores recorded at every requested step budget (ascending).
// The trajectory for a smaller budget is a prefix of the trajectory for a
// larger one, so a single pass reproduces each budget's result exactly.
inline std::vector<SurrogateResult> surrogate_descent(
    const SplitModel& model, std::span<const double> x, std::span<const double> y,
    int label, bool classification, const SurrogateSearchConfig& cfg,
    std::span<const int> step_budgets) {
  cfg.validate();
  for (std::size_t i = 1; i < step_budgets.size(); ++i)
    if (step_budgets[i] <= step_budgets[i - 1])
      throw std::invalid_argument("surrogate search: step budgets must be ascending");
  if (step_budgets.empty() || step_budgets.front() < 0)
    throw std::invalid_argument("surrogate search: bad step budgets");

  Vector onehot;
  if (classification) {
    if (label < 0 || static_cast<std::size_t>(label) >= model.output_width())
      throw std::invalid_argument("surrogate search: label out of range");
    onehot.assign(model.output_width(), 0.0);
    onehot[static_cast<std::size_t>(label)] = 1.0;
    y = onehot;
  }
  const LossKind loss =
      classification ? LossKind::softmax_cross_entropy() : LossKind::mse();
  const double denom = std::max(squared_l2(y), cfg.abs_tol);

  const Vector v0 = model.feature_forward(x);
  Vector u = v0;
  Vector diff(v0.size());
  auto score_now = [&]() {
    for (std::size_t j = 0; j < u.size(); ++j) diff[j] = u[j] - v0[j];
    return norm_of(diff, cfg.feature_norm);
  };

  std::vector<SurrogateResult> results(step_budgets.size());
  std::size_t next = 0;
  int steps = 0;
  const int max_budget = step_budgets.back();
  for (;;) {
    auto [out, grad] = model.head_value_and_input_gradient(u, y, loss);
    bool converged;
    if (classification) {
      converged = argmax(out) == static_cast<std::size_t>(label);
    } else {
      double gap2 = 0.0;
      for (std::size_t j = 0; j < out.size(); ++j) {
        const double e = out[j] - y[j];
        gap2 += e * e;
      }
      converged = gap2 / denom < cfg.rel_tol;
    }
    if (converged) {
      const SurrogateResult res{score_now(), steps, true};
      for (; next < results.size(); ++next) results[next] = res;
      return results;
    }
    while (next < results.size() && step_budgets[next] == steps) {
      results[next] = {score_now(), steps, false};
      ++next;
    }
    if (steps == max_budget) return results;
    if (!all_finite(grad))
      throw std::runtime_error("surrogate search: non-finite gradient at step " +
                               std::to_string(steps));
    for (std::size_t j = 0; j < u.size(); ++j) u[j] -= cfg.eta * grad[j];
    ++steps;
  }
}

}  // namespace detail

inline SurrogateResult surrogate_score(const SplitModel& model, std::span<const double> x,
                                       std::span<const double> y,
                                       const SurrogateSearchConfig& cfg) {
  const int budgets[] = {cfg.max_steps};
  return detail::surrogate_descent(model, x, y, -1, false, cfg, budgets)[0];
}

// Score used by calibration and detection.  A search that never reached the
// surrogate set only certifies "at least this far": its displacement is not an
// upper bound on the true distance, so it is scored as +infinity.  Applying
// the same rule on both sides keeps the scores exchangeable; the infinite
// entries only make the quantile more conservative.
inline double conformity_score(const SurrogateResult& res) {
  return res.converged ? res.score : std::numeric_limits<double>::infinity();
}

// Classification variant: cross-entropy descent toward the label's logit;
// converged once the head's argmax matches the label.
inline SurrogateResult surrogate_score_class(const SplitModel& model,
                                             std::span<const double> x, int label,
                                             const SurrogateSearchConfig& cfg) {
  const int budgets[] = {cfg.max_steps};
  return detail::surrogate_descent(model, x, {}, label, true, cfg, budgets)[0];
}

// --- calibration with step-budget selection ----------------------------------

struct MSelectionReport {
  std::vector<int> candidate_steps;
  std::vector<double> validation_coverages;
  int chosen_steps = 0;
  bool reached_target = true;  // false when no candidate hit 1 - alpha
};

// Smallest eligible candidate whose validation coverage reaches the target;
// the largest eligible candidate (flagged) when none does.  `eligible` can
// veto candidates (used to skip budgets whose calibration quantile came out
// infinite); null means all candidates are eligible.
inline int choose_step_budget(std::span<const int> candidates,
                              std::span<const double> coverages, double target,
                              bool* reached = nullptr,
                              const std::vector<bool>* eligible = nullptr) {
  auto ok = [&](std::size_t i) { return eligible == nullptr || (*eligible)[i]; };
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (ok(i) && coverages[i] >= target) {
      if (reached) *reached = true;
      return candidates[i];
    }
  if (reached) *reached = false;
  for (std::size_t i = candidates.size(); i-- > 0;)
    if (ok(i)) return candidates[i];
  return candidates.back();
}

struct FcpCalibration {
  CalibrationRecord record;
  MSelectionReport m_selection;
  SurrogateSearchConfig config;  // max_steps holds the chosen budget
  bool classification = false;
};

inline const std::vector<int>& default_step_candidates() {
  static const std::vector<int> kCandidates{10, 30, 100, 300, 1000};
  return kCandidates;
}

// Splits the calibration fold 4:1 into a scoring part and a validation part
// (the fold order is already a seeded permutation).  For each candidate step
// budget: score the scoring part, take the conformal quantile, and measure
// detection coverage on the validation part.  The chosen budget is the
// smallest one whose validation coverage is at least 1 - alpha; the final
// record is built from the scoring part under that budget.
inline FcpCalibration fcp_calibrate(const SplitModel& model, const Dataset& ds,
                                    std::span<const std::size_t> cal_indices, double alpha,
                                    SurrogateSearchConfig cfg,
                                    std::vector<int> candidate_steps = default_step_candidates(),
                                    bool classification = false) {
  if (cal_indices.empty()) throw std::invalid_argument("fcp_calibrate: empty calibration fold");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("fcp_calibrate: alpha must lie in (0,1)");
  cfg.validate();
  if (candidate_steps.empty())
    throw std::invalid_argument("fcp_calibrate: no candidate step budgets");
  std::sort(candidate_steps.begin(), candidate_steps.end());
  candidate_steps.erase(std::unique(candidate_steps.begin(), candidate_steps.end()),
                        candidate_steps.end());
  if (candidate_steps.front() < 1)
    throw std::invalid_argument("fcp_calibrate: step budgets must be >= 1");

  const std::size_t n = cal_indices.size();
  const std::size_t n_val = n / 5;
  if (n_val == 0)
    throw std::invalid_argument("fcp_calibrate: calibration fold too small for a validation part");
  const std::size_t n_score = n - n_val;

  auto descend = [&](std::size_t idx) {
    if (classification)
      return detail::surrogate_descent(model, ds.X.row(idx), {},
                                       static_cast<int>(argmax(ds.Y.row(idx))), true, cfg,
                                       candidate_steps);
    return detail::surrogate_descent(model, ds.X.row(idx), ds.Y.row(idx), -1, false, cfg,
                                     candidate_steps);
  };

  const std::size_t n_cand = candidate_steps.size();
  std::vector<std::vector<double>> scores(n_cand);
  for (auto& s : scores) s.reserve(n_score);
  for (std::size_t i = 0; i < n_score; ++i) {
    const auto res = descend(cal_indices[i]);
    for (std::size_t c = 0; c < n_cand; ++c) scores[c].push_back(conformity_score(res[c]));
  }

  std::vector<double> quantiles(n_cand);
  std::vector<bool> finite_q(n_cand);
  for (std::size_t c = 0; c < n_cand; ++c) {
    quantiles[c] = conformal_quantile(scores[c], alpha);
    finite_q[c] = std::isfinite(quantiles[c]);
  }

  std::vector<double> coverages(n_cand, 0.0);
  for (std::size_t i = n_score; i < n; ++i) {
    const auto res = descend(cal_indices[i]);
    for (std::size_t c = 0; c < n_cand; ++c)
      if (conformity_score(res[c]) <= quantiles[c]) coverages[c] += 1.0;
  }
  for (double& c : coverages) c /= static_cast<double>(n_val);

  FcpCalibration out;
  out.m_selection.candidate_steps = candidate_steps;
  out.m_selection.validation_coverages = coverages;
  // budgets whose quantile is infinite would yield unbounded bands; skip them
  // unless nothing else is available
  out.m_selection.chosen_steps = choose_step_budget(
      candidate_steps, coverages, 1.0 - alpha, &out.m_selection.reached_target, &finite_q);
  cfg.max_steps = out.m_selection.chosen_steps;
  const std::size_t chosen_idx = static_cast<std::size_t>(
      std::find(candidate_steps.begin(), candidate_steps.end(), cfg.max_steps) -
      candidate_steps.begin());
  out.record = make_calibration_record(scores[chosen_idx], alpha,
                                       ScoreKind::kFeatureSurrogate,
                                       cfg.digest(classification));
  out.config = cfg;
  out.classification = classification;
  return out;
}

namespace detail {

inline void require_matching_config(const CalibrationRecord& record,
                                    const SurrogateSearchConfig& cfg, bool classification,
                                    const char* where) {
  if (record.score_kind != ScoreKind::kFeatureSurrogate)
    throw std::invalid_argument(std::string(where) + ": record does not hold surrogate scores");
  if (record.score_config_digest != cfg.digest(classification))
    throw std::invalid_argument(
        std::string(where) +
        ": score configuration mismatch between calibration and use (calibration='" +
        record.score_config_digest + "', requested='" + cfg.digest(classification) +
        "'); the guarantee requires the identical procedure on both sides");
}

}  // namespace detail

// Band membership test: score the candidate response with the calibrated
// procedure and compare against the quantile.
inline bool fcp_detect(const SplitModel& model, const CalibrationRecord& record,
                       std::span<const double> x, std::span<const double> y_tilde,
                       const SurrogateSearchConfig& cfg) {
  detail::require_matching_config(record, cfg, false, "fcp_detect");
  if (std::isinf(record.q)) return true;
  return conformity_score(surrogate_score(model, x, y_tilde, cfg)) <= record.q;
}

inline bool fcp_detect_class(const SplitModel& model, const CalibrationRecord& record,
                             std::span<const double> x, int label,
                             const SurrogateSearchConfig& cfg) {
  detail::require_matching_config(record, cfg, true, "fcp_detect_class");
  if (std::isinf(record.q)) return true;
  return conformity_score(surrogate_score_class(model, x, label, cfg)) <= record.q;
}

// Sound output band: the feature ball of radius q around f(x), boxed and
// pushed through the head.  A superset of the exact image of the ball.
inline OutputBand fcp_estimate(const SplitModel& model, const CalibrationRecord& record,
                               std::span<const double> x, const SurrogateSearchConfig& cfg) {
  detail::require_matching_config(record, cfg, false, "fcp_estimate");
  OutputBand band;
  if (std::isinf(record.q)) {
    const Vector pred = model.forward(x);
    band.lo = pred;
    band.hi = pred;
    band.unbounded = true;
    return band;
  }
  const FeatureBand ball{model.feature_forward(x), record.q, cfg.feature_norm};
  const Box box = ibp_propagate(model, ball_to_box(ball));
  band.lo = box.lo;
  band.hi = box.hi;
  return band;
}

// --- feature-space CQR --------------------------------------------------------
//
// Two quantile heads are calibrated separately, each on the signed feature
// distance to its own surrogate of the response.  The sign comes from the
// side indicators below: +1 when the head is already on the correct side of
// the truth.  Each record stores the *outward deficit* (-indicator * distance),
// so a positive head quantile means "expand past the raw head prediction" and
// a negative one means "the head over-covers, shrink inward".  Each head is
// calibrated at level alpha/2: the two one-sided miss events are disjoint for
// an interval band, so the budgets add up to alpha.

inline int fcqr_indicator_low(double pred_lo, double y) { return pred_lo <= y ? +1 : -1; }
inline int fcqr_indicator_high(double pred_hi, double y) { return pred_hi >= y ? +1 : -1; }

namespace detail {

// Outward deficit of one head.  The search distance enters signed by the side
// indicator.  An unconverged search on the deficit side is worst-cased to
// +infinity (its displacement is only a lower bound on the distance); on the
// slack side the under-stated displacement already errs on the deficit side.
inline double fcqr_deficit(int indicator, const SurrogateResult& raw) {
  if (!raw.converged && indicator < 0) return std::numeric_limits<double>::infinity();
  return -static_cast<double>(indicator) * raw.score;
}

}  // namespace detail

struct FcqrCalibration {
  CalibrationRecord lo;
  CalibrationRecord hi;
  SurrogateSearchConfig config;
};

inline FcqrCalibration fcqr_calibrate(const SplitModel& model_lo, const SplitModel& model_hi,
                                      const Dataset& ds,
                                      std::span<const std::size_t> cal_indices, double alpha,
                                      const SurrogateSearchConfig& cfg) {
  if (cal_indices.empty()) throw std::invalid_argument("fcqr_calibrate: empty calibration fold");
  if (ds.Y.cols != 1 || model_lo.output_width() != 1 || model_hi.output_width() != 1)
    throw std::invalid_argument("fcqr_calibrate: requires one-dimensional responses");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("fcqr_calibrate: alpha must lie in (0,1)");
  cfg.validate();

  std::vector<double> deficits_lo, deficits_hi;
  deficits_lo.reserve(cal_indices.size());
  deficits_hi.reserve(cal_indices.size());
  for (std::size_t i : cal_indices) {
    const auto x = ds.X.row(i);
    const double y = ds.Y(i, 0);
    const double pred_lo = model_lo.forward(x)[0];
    const double pred_hi = model_hi.forward(x)[0];
    const SurrogateResult raw_lo = surrogate_score(model_lo, x, ds.Y.row(i), cfg);
    const SurrogateResult raw_hi = surrogate_score(model_hi, x, ds.Y.row(i), cfg);
    deficits_lo.push_back(detail::fcqr_deficit(fcqr_indicator_low(pred_lo, y), raw_lo));
    deficits_hi.push_back(detail::fcqr_deficit(fcqr_indicator_high(pred_hi, y), raw_hi));
  }

  FcqrCalibration out;
  out.lo = make_calibration_record(std::move(deficits_lo), alpha / 2.0,
                                   ScoreKind::kFeatureCqrSignedLo,
                                   cfg.digest() + ";head=lo");
  out.hi = make_calibration_record(std::move(deficits_hi), alpha / 2.0,
                                   ScoreKind::kFeatureCqrSignedHi,
                                   cfg.digest() + ";head=hi");
  out.config = cfg;
  return out;
}

namespace detail {

// Image interval of the head's feature ball with radius |q|.
inline Box fcqr_head_box(const SplitModel& model, std::span<const double> x, double q,
                         const SurrogateSearchConfig& cfg) {
  const FeatureBand ball{model.feature_forward(x), std::abs(q), cfg.feature_norm};
  return ibp_propagate(model, ball_to_box(ball));
}

}  // namespace detail

// Endpoint table: a positive head quantile picks the exterior endpoint of that
// head's image interval (expansion), a negative one picks the interior
// endpoint (shrinkage); zero radius collapses the interval to the raw head
// prediction either way.
inline OutputBand fcqr_band(const FcqrCalibration& calib, const SplitModel& model_lo,
                            const SplitModel& model_hi, std::span<const double> x) {
  if (calib.lo.score_kind != ScoreKind::kFeatureCqrSignedLo ||
      calib.hi.score_kind != ScoreKind::kFeatureCqrSignedHi)
    throw std::invalid_argument("fcqr_band: records do not hold feature CQR scores");
  OutputBand band;
  if (std::isinf(calib.lo.q) || std::isinf(calib.hi.q)) {
    band.lo = {model_lo.forward(x)[0]};
    band.hi = {model_hi.forward(x)[0]};
    band.unbounded = true;
    return band;
  }
  const Box box_lo = detail::fcqr_head_box(model_lo, x, calib.lo.q, calib.config);
  const Box box_hi = detail::fcqr_head_box(model_hi, x, calib.hi.q, calib.config);
  double lower = calib.lo.q > 0.0 ? box_lo.lo[0] : box_lo.hi[0];
  double upper = calib.hi.q > 0.0 ? box_hi.hi[0] : box_hi.lo[0];
  if (lower > upper) {
    const double mid = 0.5 * (lower + upper);
    lower = upper = mid;
    band.degenerate = true;
  }
  band.lo = {lower};
  band.hi = {upper};
  return band;
}

// Membership by re-scoring: accept y when both heads' outward deficits stay
// within their calibrated quantiles.
inline bool fcqr_detect(const FcqrCalibration& calib, const SplitModel& model_lo,
                        const SplitModel& model_hi, std::span<const double> x, double y) {
  const double y_arr[1] = {y};
  const std::span<const double> yspan(y_arr, 1);
  if (!std::isinf(calib.lo.q)) {
    const double pred_lo = model_lo.forward(x)[0];
    const SurrogateResult raw = surrogate_score(model_lo, x, yspan, calib.config);
    if (detail::fcqr_deficit(fcqr_indicator_low(pred_lo, y), raw) > calib.lo.q) return false;
  }
  if (!std::isinf(calib.hi.q)) {
    const double pred_hi = model_hi.forward(x)[0];
    const SurrogateResult raw = surrogate_score(model_hi, x, yspan, calib.config);
    if (detail::fcqr_deficit(fcqr_indicator_high(pred_hi, y), raw) > calib.hi.q)
      return false;
  }
  return true;
}

// --- classification -----------------------------------------------------------

// Prediction set by sampling the feature ball: the union of head argmax labels
// over n_samples uniform draws, always including the center's label.
inline std::vector<int> fcp_classify_set(const SplitModel& model,
                                         const CalibrationRecord& record,
                                         std::span<const double> x, std::size_t n_samples,
                                         std::uint64_t seed,
                                         const SurrogateSearchConfig& cfg) {
  detail::require_matching_config(record, cfg, true, "fcp_classify_set");
  if (n_samples < 1) throw std::invalid_argument("fcp_classify_set: n_samples must be >= 1");
  const std::size_t n_classes = model.output_width();
  if (std::isinf(record.q)) {
    std::vector<int> all(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) all[c] = static_cast<int>(c);
    return all;
  }
  const Vector center = model.feature_forward(x);
  std::set<int> labels;
  labels.insert(static_cast<int>(argmax(model.head_forward(center))));
  if (record.q > 0.0) {
    const FeatureBand ball{center, record.q, cfg.feature_norm};
    Rng rng(seed, detail::kStreamClassifySample);
    for (std::size_t s = 0; s < n_samples && labels.size() < n_classes; ++s)
      labels.insert(static_cast<int>(argmax(model.head_forward(sample_in_ball(ball, rng)))));
  }
  return {labels.begin(), labels.end()};
}

}  // namespace fcp
