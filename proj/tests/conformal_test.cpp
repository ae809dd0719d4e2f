#include "fcp/conformal.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "fcp/rng.hpp"

namespace fcp {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Brute-force oracle: sort, index with k = ceil((1-alpha)(n+1)), +inf past the end.
double quantile_oracle(std::vector<double> scores, double alpha) {
  std::sort(scores.begin(), scores.end());
  const auto k = static_cast<std::size_t>(
      std::ceil((1.0 - alpha) * static_cast<double>(scores.size() + 1)));
  if (k > scores.size()) return kInf;
  return scores[k - 1];
}

TEST(ConformalQuantile, InfinityAtomWhenCalibrationTooSmall) {
  EXPECT_EQ(conformal_quantile({3.0}, 0.1), kInf);
  EXPECT_EQ(conformal_quantile({}, 0.5), kInf);
}

TEST(ConformalQuantile, KnownOrderStatistics) {
  EXPECT_DOUBLE_EQ(conformal_quantile({1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.5), 5.0);
  EXPECT_DOUBLE_EQ(conformal_quantile({1, 2, 3, 4, 5}, 0.2), 5.0);
  EXPECT_DOUBLE_EQ(quantile_oracle({1, 2, 3, 4, 5, 6, 7, 8, 9}, 0.5), 5.0);
  EXPECT_DOUBLE_EQ(quantile_oracle({1, 2, 3, 4, 5}, 0.2), 5.0);
}

TEST(ConformalQuantile, AlphaOutsideUnitIntervalThrows) {
  EXPECT_THROW(conformal_quantile({1.0}, 0.0), std::invalid_argument);
  EXPECT_THROW(conformal_quantile({1.0}, 1.0), std::invalid_argument);
  EXPECT_THROW(conformal_quantile({1.0}, -0.3), std::invalid_argument);
}

TEST(ConformalQuantile, AgreesWithOracleOnRandomInstances) {
  Rng rng(99);
  for (int rep = 0; rep < 2000; ++rep) {
    const std::size_t n = static_cast<std::size_t>(rng.below(40));
    std::vector<double> scores(n);
    for (double& s : scores) s = rng.uniform(-5.0, 5.0);
    if (rng.below(4) == 0 && n > 2) scores[1] = scores[0];  // inject ties
    const double alpha = rng.uniform(0.01, 0.99);
    EXPECT_EQ(conformal_quantile(scores, alpha), quantile_oracle(scores, alpha));
  }
}

TEST(ConformalQuantile, MonotoneInAlphaAndUnderLargerScores) {
  Rng rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> scores(10 + rng.below(20));
    for (double& s : scores) s = rng.normal();
    double prev = -kInf;
    for (double alpha : {0.4, 0.2, 0.1, 0.05}) {  // decreasing alpha
      const double q = conformal_quantile(scores, alpha);
      EXPECT_GE(q, prev);
      prev = q;
    }
    // appending a score >= current quantile cannot decrease the quantile
    const double q0 = conformal_quantile(scores, 0.1);
    std::vector<double> more = scores;
    more.push_back(std::isfinite(q0) ? q0 + 1.0 : 1e9);
    EXPECT_GE(conformal_quantile(more, 0.1), std::min(q0, 1e9));
  }
}

TEST(EmpiricalQuantile, WorkedExample) {
  EXPECT_DOUBLE_EQ(empirical_quantile({1, 2, 3, 4, 5}, 0.8), 4.0);
  EXPECT_DOUBLE_EQ(empirical_quantile({5, 1, 3, 2, 4}, 0.8), 4.0);
}

TEST(EmpiricalQuantile, LevelOneIsMaximumLevelZeroIsMinimum) {
  EXPECT_DOUBLE_EQ(empirical_quantile({2.0, -1.0, 7.5}, 1.0), 7.5);
  EXPECT_DOUBLE_EQ(empirical_quantile({2.0, -1.0, 7.5}, 0.0), -1.0);
  EXPECT_THROW(empirical_quantile({}, 0.5), std::invalid_argument);
}

TEST(EmpiricalQuantile, AgreesWithSortAndIndexOracle) {
  Rng rng(13);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> scores(1 + rng.below(30));
    for (double& s : scores) s = rng.uniform(-3.0, 3.0);
    const double level = rng.uniform01();
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end());
    // smallest s with fraction(<= s) >= level
    double want = sorted.back();
    for (double s : sorted) {
      const double frac =
          static_cast<double>(std::upper_bound(sorted.begin(), sorted.end(), s) -
                              sorted.begin()) /
          static_cast<double>(sorted.size());
      if (frac >= level) {
        want = s;
        break;
      }
    }
    EXPECT_EQ(empirical_quantile(scores, level), want);
  }
}

// A fixed-output model: all weights zero, biases of the last layer set the
// prediction, so calibration residuals are fully controlled.
SplitModel constant_model(const Vector& prediction, std::size_t input_dim) {
  MlpSpec spec{{input_dim, 2, prediction.size()}};
  MlpParams params;
  params.layers.push_back({Matrix(2, input_dim), Vector(2, 0.0)});
  params.layers.push_back({Matrix(prediction.size(), 2), prediction});
  return SplitModel(spec, params, 1);
}

Dataset dataset_with_targets(const Matrix& y) {
  Dataset ds;
  ds.X = Matrix(y.rows, 1, 0.5);
  ds.Y = y;
  return ds;
}

TEST(VanillaCp, PerfectModelGivesZeroQuantile) {
  const SplitModel model = constant_model({1.0, -2.0}, 1);
  Matrix y(10, 2);
  for (std::size_t i = 0; i < 10; ++i) {
    y(i, 0) = 1.0;
    y(i, 1) = -2.0;
  }
  const Dataset ds = dataset_with_targets(y);
  std::vector<std::size_t> cal(10);
  std::iota(cal.begin(), cal.end(), std::size_t{0});
  const CalibrationRecord rec = vanilla_cp_calibrate(model, ds, cal, 0.1);
  for (double s : rec.scores) EXPECT_DOUBLE_EQ(s, 0.0);
  EXPECT_DOUBLE_EQ(rec.q, 0.0);  // k = ceil(0.9*11) = 10 <= n
}

TEST(VanillaCp, OneDimResidualLadder) {
  const SplitModel model = constant_model({0.0}, 1);
  Matrix y(9, 1);
  for (std::size_t i = 0; i < 9; ++i) y(i, 0) = static_cast<double>(i + 1);
  const Dataset ds = dataset_with_targets(y);
  std::vector<std::size_t> cal(9);
  std::iota(cal.begin(), cal.end(), std::size_t{0});
  const CalibrationRecord rec = vanilla_cp_calibrate(model, ds, cal, 0.1);
  EXPECT_DOUBLE_EQ(rec.q, 9.0);  // k = ceil(0.9 * 10) = 9
}

TEST(VanillaCp, LinfScoreOfResidualVectors) {
  const SplitModel model = constant_model({0.0, 0.0}, 1);
  Matrix y(2, 2);
  y(0, 0) = 1.0;
  y(0, 1) = 3.0;
  y(1, 0) = 2.0;
  y(1, 1) = 2.0;
  const Dataset ds = dataset_with_targets(y);
  const std::vector<std::size_t> cal{0, 1};
  const CalibrationRecord rec = vanilla_cp_calibrate(model, ds, cal, 0.4);
  EXPECT_EQ(rec.scores, (std::vector<double>{2.0, 3.0}));
}

TEST(VanillaCp, EmptyCalibrationFoldThrows) {
  const SplitModel model = constant_model({0.0}, 1);
  const Dataset ds = dataset_with_targets(Matrix(1, 1));
  EXPECT_THROW(vanilla_cp_calibrate(model, ds, {}, 0.1), std::invalid_argument);
}

TEST(VanillaCpBand, DirectFormula) {
  const SplitModel model = constant_model({0.1, 0.2}, 1);
  CalibrationRecord rec;
  rec.q = 0.5;
  rec.score_kind = ScoreKind::kOutputLinf;
  const OutputBand band = vanilla_cp_band(rec, model, Vector{0.0});
  EXPECT_NEAR(band.lo[0], -0.4, 1e-15);
  EXPECT_NEAR(band.hi[0], 0.6, 1e-15);
  EXPECT_NEAR(band.lo[1], -0.3, 1e-15);
  EXPECT_NEAR(band.hi[1], 0.7, 1e-15);
}

TEST(VanillaCpBand, ZeroQuantileIsDegeneratePoint) {
  const SplitModel model = constant_model({1.5}, 1);
  CalibrationRecord rec;
  rec.q = 0.0;
  rec.score_kind = ScoreKind::kOutputLinf;
  const OutputBand band = vanilla_cp_band(rec, model, Vector{0.0});
  EXPECT_DOUBLE_EQ(band.lo[0], band.hi[0]);
  EXPECT_DOUBLE_EQ(band.lo[0], 1.5);
}

TEST(VanillaCpBand, InfiniteQuantileMarksUnboundedBand) {
  const SplitModel model = constant_model({0.0}, 1);
  CalibrationRecord rec;
  rec.q = kInf;
  rec.score_kind = ScoreKind::kOutputLinf;
  const OutputBand band = vanilla_cp_band(rec, model, Vector{0.0});
  EXPECT_TRUE(band.unbounded);
  EXPECT_TRUE(band.contains(Vector{1e12}));
}

TEST(VanillaCpBand, MembershipEquivalentToScoreThreshold) {
  Rng rng(77);
  const SplitModel model = constant_model({0.3, -0.7}, 1);
  CalibrationRecord rec;
  rec.q = 0.8;
  rec.score_kind = ScoreKind::kOutputLinf;
  const Vector x{0.0};
  const OutputBand band = vanilla_cp_band(rec, model, x);
  const Vector pred = model.forward(x);
  for (int rep = 0; rep < 1000; ++rep) {
    Vector y{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
    Vector resid{y[0] - pred[0], y[1] - pred[1]};
    const bool by_score = linf_norm(resid) <= rec.q;
    EXPECT_EQ(band.contains(y), by_score);
  }
}

TEST(Cqr, SignedScoreConvention) {
  // inside with margin 1 -> -1; above the upper head by 2 -> +2
  EXPECT_DOUBLE_EQ(cqr_score(0.0, 3.0, 1.0), -1.0);
  EXPECT_DOUBLE_EQ(cqr_score(0.0, 3.0, 5.0), 2.0);
  Rng rng(5);
  for (int rep = 0; rep < 300; ++rep) {
    const double lo = rng.normal(), hi = lo + std::abs(rng.normal());
    const double y = rng.normal() * 2.0;
    EXPECT_DOUBLE_EQ(cqr_score(lo, hi, y), std::max(lo - y, y - hi));
  }
}

TEST(Cqr, CalibrateRejectsMultidimResponses) {
  const SplitModel model = constant_model({0.0, 0.0}, 1);
  Matrix y(3, 2);
  const Dataset ds = dataset_with_targets(y);
  const std::vector<std::size_t> cal{0, 1, 2};
  EXPECT_THROW(cqr_calibrate(model, model, ds, cal, 0.1), std::invalid_argument);
}

TEST(CqrBand, ExpansionAndShrinkage) {
  const SplitModel lo = constant_model({1.0}, 1);
  const SplitModel hi = constant_model({2.0}, 1);
  CalibrationRecord rec;
  rec.score_kind = ScoreKind::kCqrSigned;
  rec.q = 0.5;
  OutputBand band = cqr_band(rec, lo, hi, Vector{0.0});
  EXPECT_DOUBLE_EQ(band.lo[0], 0.5);
  EXPECT_DOUBLE_EQ(band.hi[0], 2.5);
  rec.q = -0.2;  // negative quantile shrinks the raw interval
  band = cqr_band(rec, lo, hi, Vector{0.0});
  EXPECT_DOUBLE_EQ(band.lo[0], 1.2);
  EXPECT_DOUBLE_EQ(band.hi[0], 1.8);
  EXPECT_LT(band.hi[0] - band.lo[0], 1.0);
}

TEST(CqrBand, CrossedEndpointsClampToMidpointAndFlag) {
  const SplitModel lo = constant_model({1.0}, 1);
  const SplitModel hi = constant_model({2.0}, 1);
  CalibrationRecord rec;
  rec.score_kind = ScoreKind::kCqrSigned;
  rec.q = -0.8;  // shrink past the midpoint
  const OutputBand band = cqr_band(rec, lo, hi, Vector{0.0});
  EXPECT_TRUE(band.degenerate);
  EXPECT_DOUBLE_EQ(band.lo[0], band.hi[0]);
  EXPECT_FALSE(band.contains(Vector{1.5}));
}

TEST(CalibrationRecord, JsonRoundTripIncludingInfiniteQuantile) {
  CalibrationRecord rec = make_calibration_record({2.0, 1.0, 3.0}, 0.25,
                                                  ScoreKind::kOutputLinf, "score=output_linf");
  EXPECT_EQ(rec.scores, (std::vector<double>{1.0, 2.0, 3.0}));
  nlohmann::json j = rec;
  const auto back = j.get<CalibrationRecord>();
  EXPECT_EQ(back.scores, rec.scores);
  EXPECT_EQ(back.q, rec.q);
  EXPECT_EQ(back.score_kind, rec.score_kind);
  EXPECT_EQ(back.score_config_digest, rec.score_config_digest);

  const CalibrationRecord tiny = make_calibration_record({1.0}, 0.1,
                                                         ScoreKind::kOutputLinf, "d");
  EXPECT_TRUE(std::isinf(tiny.q));
  nlohmann::json j2 = tiny;
  EXPECT_TRUE(j2.at("q").is_null());
  EXPECT_TRUE(std::isinf(j2.get<CalibrationRecord>().q));
}

TEST(CalibrationRecord, InfiniteScoresCountTowardTheQuantile) {
  // 8 finite scores plus 2 never-converged (infinite) ones: the order
  // statistic walks into the infinite tail exactly when k exceeds 8.
  std::vector<double> scores{1, 2, 3, 4, 5, 6, 7, 8, kInf, kInf};
  const CalibrationRecord mid = make_calibration_record(scores, 0.5, ScoreKind::kFeatureSurrogate, "d");
  EXPECT_EQ(mid.infinite_scores, 2u);
  EXPECT_EQ(mid.scores.size(), 8u);
  EXPECT_DOUBLE_EQ(mid.q, 6.0);  // k = ceil(0.5 * 11) = 6
  const CalibrationRecord tight = make_calibration_record(scores, 0.1, ScoreKind::kFeatureSurrogate, "d");
  EXPECT_TRUE(std::isinf(tight.q));  // k = 10 > 8 finite scores

  nlohmann::json j = mid;
  EXPECT_EQ(j.at("infinite_scores").get<std::size_t>(), 2u);
  EXPECT_EQ(j.get<CalibrationRecord>().infinite_scores, 2u);
}

TEST(CalibrationRecord, RejectsNanAndNegativeInfinity) {
  EXPECT_THROW(make_calibration_record({1.0, std::nan("")}, 0.1, ScoreKind::kOutputLinf, "d"),
               std::invalid_argument);
  EXPECT_THROW(make_calibration_record({1.0, -kInf}, 0.1, ScoreKind::kOutputLinf, "d"),
               std::invalid_argument);
}

}  // namespace
}  // namespace fcp
