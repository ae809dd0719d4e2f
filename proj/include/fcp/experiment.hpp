#pragma once

// End-to-end experiment runner: per seed, split -> standardize -> train ->
// calibrate -> evaluate on the test fold, plus diagnostics.  Every stage is a
// pure function of the config and the seed, so the full output document is
// reproducible byte for byte.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fcp/conformal.hpp"
#include "fcp/data.hpp"
#include "fcp/feature_conformal.hpp"
#include "fcp/metrics.hpp"
#include "fcp/nn.hpp"

namespace fcp {

enum class Method { kVanillaCp, kFeatureCp, kCqr, kFeatureCqr, kFeatureCpClassify };
enum class DatasetKind { kSyntheticMultidim, kSynthetic1dHetero, kCsv };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::kVanillaCp: return "vanilla_cp";
    case Method::kFeatureCp: return "feature_cp";
    case Method::kCqr: return "cqr";
    case Method::kFeatureCqr: return "feature_cqr";
    case Method::kFeatureCpClassify: return "feature_cp_classify";
  }
  return "unknown";
}

inline Method method_from_string(const std::string& s) {
  if (s == "vanilla_cp") return Method::kVanillaCp;
  if (s == "feature_cp") return Method::kFeatureCp;
  if (s == "cqr") return Method::kCqr;
  if (s == "feature_cqr") return Method::kFeatureCqr;
  if (s == "feature_cp_classify") return Method::kFeatureCpClassify;
  throw std::invalid_argument("unknown method: " + s);
}

inline const char* to_string(DatasetKind d) {
  switch (d) {
    case DatasetKind::kSyntheticMultidim: return "synthetic_multidim";
    case DatasetKind::kSynthetic1dHetero: return "synthetic_1d_hetero";
    case DatasetKind::kCsv: return "csv";
  }
  return "unknown";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "synthetic_multidim") return DatasetKind::kSyntheticMultidim;
  if (s == "synthetic_1d_hetero") return DatasetKind::kSynthetic1dHetero;
  if (s == "csv") return DatasetKind::kCsv;
  throw std::invalid_argument("unknown dataset: " + s);
}

struct ModelConfig {
  std::vector<std::size_t> hidden_widths = {64, 64, 64};
  std::size_t split_index = 2;  // feature extractor: layers [0, split_index)
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetKind dataset = DatasetKind::kSyntheticMultidim;
  std::string csv_path;
  std::vector<std::string> csv_targets;
  std::size_t n_samples = 5000;  // generator sample count
  Method method = Method::kFeatureCp;
  double alpha = 0.1;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  ModelConfig model;
  TrainConfig train;  // per-seed streams are derived from the run seed
  SurrogateSearchConfig search;
  std::vector<int> step_candidates = default_step_candidates();
  std::array<double, 3> split_ratios = {2.0, 2.0, 1.0};
  bool untrained_control = false;  // skip training, keep the seeded init
  bool standardize_targets = true;
  double cubic_level = 0.9;
  std::size_t tightness_subsample = 50;    // test points used for the tightness ratio
  std::size_t tightness_samples = 1000;    // ball draws per point
  std::size_t classify_samples = 1000;     // ball draws per prediction set
  std::size_t classify_classes = 3;        // response tertile classes

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0))
      throw std::invalid_argument("config: alpha must lie in (0,1)");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
    if (dataset == DatasetKind::kCsv && csv_path.empty())
      throw std::invalid_argument("config: csv dataset requires csv_path");
    if (dataset == DatasetKind::kCsv && csv_targets.empty())
      throw std::invalid_argument("config: csv dataset requires csv_targets");
    if (model.hidden_widths.empty())
      throw std::invalid_argument("config: need at least one hidden layer");
  }
};

struct SeedResult {
  std::uint64_t seed = 0;
  EvalReport eval;
  std::optional<CubicReport> cubic;
  std::optional<MSelectionReport> m_selection;
  std::optional<CalibrationRecord> record;  // vanilla / feature CP record
  std::optional<CalibrationRecord> record_lo, record_hi;  // CQR-family records
  double q = 0.0;
  double tightness_ratio = std::numeric_limits<double>::quiet_NaN();
  double train_loss_initial = 0.0;
  double train_loss_final = 0.0;
};

struct RunResult {
  ExperimentConfig config;
  std::vector<SeedResult> per_seed;
  double mean_coverage = 0.0, std_coverage = 0.0;
  double mean_length = 0.0, std_length = 0.0;
};

namespace detail {

inline constexpr std::uint64_t kSaltSplit = 0x51;
inline constexpr std::uint64_t kSaltTrain = 0x52;
inline constexpr std::uint64_t kSaltTrainLo = 0x53;
inline constexpr std::uint64_t kSaltTrainHi = 0x54;
inline constexpr std::uint64_t kSaltTightness = 0x55;
inline constexpr std::uint64_t kSaltClassify = 0x56;

template <typename F>
auto run_stage(const std::string& name, std::uint64_t seed, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error("[stage:" + name + " seed:" + std::to_string(seed) + "] " +
                             e.what());
  }
}

inline std::vector<std::size_t> full_widths(const ExperimentConfig& cfg, std::size_t d_in,
                                            std::size_t d_out) {
  std::vector<std::size_t> widths;
  widths.push_back(d_in);
  widths.insert(widths.end(), cfg.model.hidden_widths.begin(), cfg.model.hidden_widths.end());
  widths.push_back(d_out);
  return widths;
}

struct SeedContext {
  Dataset data;  // standardized
  StandardizerState standardizer;
  SplitIndices folds;
  std::optional<SplitModel> model;
  std::optional<SplitModel> model_lo, model_hi;
  std::vector<int> labels;  // classification labels per row, else empty
  TrainTrace trace;
};

inline Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  switch (cfg.dataset) {
    case DatasetKind::kSyntheticMultidim: return gen_synthetic_multidim(seed, cfg.n_samples);
    case DatasetKind::kSynthetic1dHetero: return gen_synthetic_1d_hetero(seed, cfg.n_samples);
    case DatasetKind::kCsv: return load_csv(cfg.csv_path, cfg.csv_targets);
  }
  throw std::invalid_argument("unknown dataset kind");
}

// Response tertile labels (boundaries fitted on the training fold only).
inline std::vector<int> tertile_labels(const Dataset& ds, const SplitIndices& folds,
                                       std::size_t n_classes) {
  if (ds.Y.cols != 1)
    throw std::invalid_argument("classification runs need a one-dimensional response");
  std::vector<double> train_y;
  train_y.reserve(folds.train.size());
  for (std::size_t i : folds.train) train_y.push_back(ds.Y(i, 0));
  std::vector<double> bounds;
  for (std::size_t c = 1; c < n_classes; ++c)
    bounds.push_back(empirical_quantile(train_y, static_cast<double>(c) /
                                                     static_cast<double>(n_classes)));
  std::vector<int> labels(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    int label = 0;
    while (label + 1 < static_cast<int>(n_classes) &&
           ds.Y(i, 0) > bounds[static_cast<std::size_t>(label)])
      ++label;
    labels[i] = label;
  }
  return labels;
}

inline SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedContext ctx;
  Dataset raw = run_stage("data", seed, [&] { return load_dataset(cfg, seed); });
  ctx.folds = run_stage("split", seed, [&] {
    return split_dataset(raw.size(), cfg.split_ratios, combine_seed(seed, kSaltSplit));
  });

  const bool classify = cfg.method == Method::kFeatureCpClassify;
  const bool include_y = cfg.standardize_targets && !classify;
  auto [standardized, st] = run_stage("standardize", seed, [&] {
    return standardize(raw, ctx.folds.train, include_y);
  });
  ctx.data = std::move(standardized);
  ctx.standardizer = std::move(st);

  if (classify)
    ctx.labels = run_stage("labels", seed,
                           [&] { return tertile_labels(ctx.data, ctx.folds, cfg.classify_classes); });

  auto gather = [&](const std::vector<std::size_t>& idx, const Matrix& src) {
    Matrix out(idx.size(), src.cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < src.cols; ++c) out(r, c) = src(idx[r], c);
    return out;
  };
  const Matrix train_x = gather(ctx.folds.train, ctx.data.X);

  if (cfg.method == Method::kCqr || cfg.method == Method::kFeatureCqr) {
    if (ctx.data.Y.cols != 1)
      throw std::runtime_error("[stage:train seed:" + std::to_string(seed) +
                               "] quantile regression methods need a 1-d response");
    const Matrix train_y = gather(ctx.folds.train, ctx.data.Y);
    const MlpSpec spec{full_widths(cfg, ctx.data.X.cols, 1)};
    TrainConfig tc = cfg.train;
    tc.seed = combine_seed(seed, kSaltTrainLo);
    ctx.model_lo = run_stage("train", seed, [&] {
      return cfg.untrained_control
                 ? init_model(spec, cfg.model.split_index, tc.seed)
                 : train(spec, cfg.model.split_index, train_x, train_y,
                         LossKind::pinball(cfg.alpha / 2.0), tc, &ctx.trace);
    });
    tc.seed = combine_seed(seed, kSaltTrainHi);
    ctx.model_hi = run_stage("train", seed, [&] {
      return cfg.untrained_control
                 ? init_model(spec, cfg.model.split_index, tc.seed)
                 : train(spec, cfg.model.split_index, train_x, train_y,
                         LossKind::pinball(1.0 - cfg.alpha / 2.0), tc);
    });
    return ctx;
  }

  Matrix train_y;
  LossKind loss = LossKind::mse();
  std::size_t d_out = ctx.data.Y.cols;
  if (classify) {
    d_out = cfg.classify_classes;
    train_y = Matrix(ctx.folds.train.size(), d_out);
    for (std::size_t r = 0; r < ctx.folds.train.size(); ++r)
      train_y(r, static_cast<std::size_t>(ctx.labels[ctx.folds.train[r]])) = 1.0;
    loss = LossKind::softmax_cross_entropy();
  } else {
    train_y = gather(ctx.folds.train, ctx.data.Y);
  }
  const MlpSpec spec{full_widths(cfg, ctx.data.X.cols, d_out)};
  TrainConfig tc = cfg.train;
  tc.seed = combine_seed(seed, kSaltTrain);
  ctx.model = run_stage("train", seed, [&] {
    return cfg.untrained_control
               ? init_model(spec, cfg.model.split_index, tc.seed)
               : train(spec, cfg.model.split_index, train_x, train_y, loss, tc, &ctx.trace);
  });
  return ctx;
}

inline void finalize_lengths(SeedResult& res, const std::vector<OutputBand>& bands) {
  res.eval.avg_length = avg_length(bands, &res.eval.unbounded_count);
  for (const OutputBand& b : bands) {
    if (b.unbounded) continue;
    res.eval.per_sample_lengths.push_back(b.mean_width());
    if (b.degenerate) ++res.eval.degenerate_count;
  }
}

inline void maybe_group_coverage(SeedResult& res, const SeedContext& ctx,
                                 const std::vector<bool>& member) {
  if (ctx.data.Y.cols != 1 || member.size() < 3) return;
  std::vector<double> y;
  y.reserve(member.size());
  for (std::size_t i : ctx.folds.test) y.push_back(ctx.data.Y(i, 0));
  res.eval.group_coverage = group_coverage(member, y, 3);
}

inline void maybe_weighted_length(SeedResult& res, const SeedContext& ctx,
                                  const std::vector<OutputBand>& bands) {
  // Defined for [0,1]-valued targets (soft labels); skip otherwise.
  for (std::size_t i : ctx.folds.test)
    for (std::size_t j = 0; j < ctx.data.Y.cols; ++j) {
      const double v = ctx.data.Y(i, j);
      if (v < 0.0 || v > 1.0) return;
    }
  Matrix y_test(ctx.folds.test.size(), ctx.data.Y.cols);
  for (std::size_t r = 0; r < ctx.folds.test.size(); ++r)
    for (std::size_t c = 0; c < ctx.data.Y.cols; ++c)
      y_test(r, c) = ctx.data.Y(ctx.folds.test[r], c);
  std::size_t skipped = 0;
  res.eval.weighted_length = weighted_length(bands, y_test, &skipped);
}

inline SeedResult evaluate_seed(const ExperimentConfig& cfg, const SeedContext& ctx,
                                std::uint64_t seed, double alpha,
                                std::size_t split_index) {
  SeedResult res;
  res.seed = seed;
  res.train_loss_initial = ctx.trace.initial_loss;
  res.train_loss_final = ctx.trace.final_loss;

  const auto& test = ctx.folds.test;
  if (test.empty()) throw std::runtime_error("empty test fold");
  std::vector<bool> member;
  member.reserve(test.size());

  switch (cfg.method) {
    case Method::kVanillaCp: {
      const SplitModel model = ctx.model->with_split_index(split_index);
      const CalibrationRecord rec = run_stage("calibrate", seed, [&] {
        return vanilla_cp_calibrate(model, ctx.data, ctx.folds.cal, alpha);
      });
      res.record = rec;
      res.q = rec.q;
      std::vector<OutputBand> bands;
      bands.reserve(test.size());
      run_stage("evaluate", seed, [&] {
        for (std::size_t i : test) {
          bands.push_back(vanilla_cp_band(rec, model, ctx.data.X.row(i)));
          member.push_back(bands.back().contains(ctx.data.Y.row(i)));
        }
        return 0;
      });
      res.eval.coverage = coverage(member);
      finalize_lengths(res, bands);
      maybe_group_coverage(res, ctx, member);
      maybe_weighted_length(res, ctx, bands);
      break;
    }

    case Method::kFeatureCp: {
      const SplitModel model = ctx.model->with_split_index(split_index);
      const FcpCalibration calib = run_stage("calibrate", seed, [&] {
        return fcp_calibrate(model, ctx.data, ctx.folds.cal, alpha, cfg.search,
                             cfg.step_candidates);
      });
      res.record = calib.record;
      res.m_selection = calib.m_selection;
      res.q = calib.record.q;
      res.cubic = run_stage("diagnostics", seed, [&] {
        return cubic_diagnostics(model, ctx.data, ctx.folds.cal, cfg.cubic_level,
                                 calib.config);
      });
      std::vector<OutputBand> bands;
      bands.reserve(test.size());
      run_stage("evaluate", seed, [&] {
        for (std::size_t i : test) {
          member.push_back(
              fcp_detect(model, calib.record, ctx.data.X.row(i), ctx.data.Y.row(i),
                         calib.config));
          bands.push_back(fcp_estimate(model, calib.record, ctx.data.X.row(i), calib.config));
        }
        return 0;
      });
      res.eval.coverage = coverage(member);
      finalize_lengths(res, bands);
      maybe_group_coverage(res, ctx, member);
      maybe_weighted_length(res, ctx, bands);

      // Tightness of the estimation: sampled inner box vs the IBP outer box,
      // averaged over a fixed test subsample.  No threshold, diagnostic only.
      if (std::isfinite(calib.record.q) && calib.record.q > 0.0 &&
          cfg.tightness_subsample > 0) {
        double inner = 0.0, outer = 0.0;
        const std::size_t m = std::min<std::size_t>(cfg.tightness_subsample, test.size());
        for (std::size_t r = 0; r < m; ++r) {
          const std::size_t i = test[r];
          const FeatureBand ball{model.feature_forward(ctx.data.X.row(i)), calib.record.q,
                                 calib.config.feature_norm};
          inner += sample_inner_box(model, ball, cfg.tightness_samples,
                                    combine_seed(seed, kSaltTightness + r))
                       .mean_width();
          outer += ibp_propagate(model, ball_to_box(ball)).mean_width();
        }
        if (outer > 0.0) res.tightness_ratio = inner / outer;
      }
      break;
    }

    case Method::kCqr: {
      const CalibrationRecord rec = run_stage("calibrate", seed, [&] {
        return cqr_calibrate(*ctx.model_lo, *ctx.model_hi, ctx.data, ctx.folds.cal, alpha);
      });
      res.record = rec;
      res.q = rec.q;
      std::vector<OutputBand> bands;
      bands.reserve(test.size());
      run_stage("evaluate", seed, [&] {
        for (std::size_t i : test) {
          bands.push_back(cqr_band(rec, *ctx.model_lo, *ctx.model_hi, ctx.data.X.row(i)));
          member.push_back(bands.back().contains(ctx.data.Y.row(i)));
        }
        return 0;
      });
      res.eval.coverage = coverage(member);
      finalize_lengths(res, bands);
      maybe_group_coverage(res, ctx, member);
      break;
    }

    case Method::kFeatureCqr: {
      const FcqrCalibration calib = run_stage("calibrate", seed, [&] {
        return fcqr_calibrate(*ctx.model_lo, *ctx.model_hi, ctx.data, ctx.folds.cal, alpha,
                              cfg.search);
      });
      res.record_lo = calib.lo;
      res.record_hi = calib.hi;
      res.q = calib.lo.q;
      std::vector<OutputBand> bands;
      bands.reserve(test.size());
      run_stage("evaluate", seed, [&] {
        for (std::size_t i : test) {
          member.push_back(fcqr_detect(calib, *ctx.model_lo, *ctx.model_hi,
                                       ctx.data.X.row(i), ctx.data.Y(i, 0)));
          bands.push_back(fcqr_band(calib, *ctx.model_lo, *ctx.model_hi, ctx.data.X.row(i)));
        }
        return 0;
      });
      res.eval.coverage = coverage(member);
      finalize_lengths(res, bands);
      maybe_group_coverage(res, ctx, member);
      break;
    }

    case Method::kFeatureCpClassify: {
      const SplitModel model = ctx.model->with_split_index(split_index);
      const FcpCalibration calib = run_stage("calibrate", seed, [&] {
        Dataset with_onehot = ctx.data;
        with_onehot.Y = Matrix(ctx.data.size(), cfg.classify_classes);
        for (std::size_t i = 0; i < ctx.data.size(); ++i)
          with_onehot.Y(i, static_cast<std::size_t>(ctx.labels[i])) = 1.0;
        return fcp_calibrate(model, with_onehot, ctx.folds.cal, alpha, cfg.search,
                             cfg.step_candidates, /*classification=*/true);
      });
      res.record = calib.record;
      res.m_selection = calib.m_selection;
      res.q = calib.record.q;
      std::vector<double> set_sizes;
      run_stage("evaluate", seed, [&] {
        std::size_t r = 0;
        for (std::size_t i : test) {
          member.push_back(fcp_detect_class(model, calib.record, ctx.data.X.row(i),
                                            ctx.labels[i], calib.config));
          const auto set = fcp_classify_set(model, calib.record, ctx.data.X.row(i),
                                            cfg.classify_samples,
                                            combine_seed(seed, kSaltClassify + r++),
                                            calib.config);
          set_sizes.push_back(static_cast<double>(set.size()));
        }
        return 0;
      });
      res.eval.coverage = coverage(member);
      res.eval.per_sample_lengths = set_sizes;
      double total = 0.0;
      for (double s : set_sizes) total += s;
      res.eval.avg_length = total / static_cast<double>(set_sizes.size());
      maybe_group_coverage(res, ctx, member);
      break;
    }
  }
  return res;
}

inline void aggregate(RunResult& run) {
  const double n = static_cast<double>(run.per_seed.size());
  double mc = 0.0, ml = 0.0;
  for (const SeedResult& r : run.per_seed) {
    mc += r.eval.coverage;
    ml += r.eval.avg_length;
  }
  mc /= n;
  ml /= n;
  double vc = 0.0, vl = 0.0;
  for (const SeedResult& r : run.per_seed) {
    vc += (r.eval.coverage - mc) * (r.eval.coverage - mc);
    vl += (r.eval.avg_length - ml) * (r.eval.avg_length - ml);
  }
  run.mean_coverage = mc;
  run.std_coverage = std::sqrt(vc / n);
  run.mean_length = ml;
  run.std_length = std::sqrt(vl / n);
}

}  // namespace detail

inline RunResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  RunResult run;
  run.config = config;
  for (std::uint64_t seed : config.seeds) {
    const detail::SeedContext ctx = detail::prepare_seed(config, seed);
    run.per_seed.push_back(
        detail::evaluate_seed(config, ctx, seed, config.alpha, config.model.split_index));
  }
  detail::aggregate(run);
  return run;
}

// One result per significance level, reusing the trained model of each seed
// (training does not depend on alpha for the supported methods).
inline std::vector<RunResult> sweep_alpha(const ExperimentConfig& config,
                                          const std::vector<double>& alphas) {
  config.validate();
  if (alphas.empty()) throw std::invalid_argument("sweep_alpha: empty alpha grid");
  for (double a : alphas)
    if (!(a > 0.0 && a < 1.0)) throw std::invalid_argument("sweep_alpha: alpha outside (0,1)");
  if (config.method == Method::kCqr || config.method == Method::kFeatureCqr)
    throw std::invalid_argument(
        "sweep_alpha: quantile-regression methods train alpha-dependent heads; run "
        "separate experiments instead");

  std::vector<RunResult> out(alphas.size());
  for (std::size_t a = 0; a < alphas.size(); ++a) {
    out[a].config = config;
    out[a].config.alpha = alphas[a];
  }
  for (std::uint64_t seed : config.seeds) {
    const detail::SeedContext ctx = detail::prepare_seed(config, seed);
    for (std::size_t a = 0; a < alphas.size(); ++a)
      out[a].per_seed.push_back(
          detail::evaluate_seed(out[a].config, ctx, seed, alphas[a],
                                config.model.split_index));
  }
  for (RunResult& r : out) detail::aggregate(r);
  return out;
}

// One result per splitting point, reusing the trained parameters of each seed
// (the split only reinterprets where the feature space sits).
inline std::vector<RunResult> sweep_split_index(const ExperimentConfig& config,
                                                const std::vector<std::size_t>& indices) {
  config.validate();
  if (indices.empty()) throw std::invalid_argument("sweep_split_index: empty index list");
  if (config.method == Method::kCqr || config.method == Method::kFeatureCqr)
    throw std::invalid_argument("sweep_split_index: unsupported for two-head methods");

  std::vector<RunResult> out(indices.size());
  for (std::size_t s = 0; s < indices.size(); ++s) {
    out[s].config = config;
    out[s].config.model.split_index = indices[s];
  }
  for (std::uint64_t seed : config.seeds) {
    const detail::SeedContext ctx = detail::prepare_seed(config, seed);
    for (std::size_t s = 0; s < indices.size(); ++s)
      out[s].per_seed.push_back(
          detail::evaluate_seed(out[s].config, ctx, seed, config.alpha, indices[s]));
  }
  for (RunResult& r : out) detail::aggregate(r);
  return out;
}

// --- JSON / CSV output --------------------------------------------------------

inline void to_json(nlohmann::json& j, const ModelConfig& m) {
  j = nlohmann::json{{"hidden_widths", m.hidden_widths}, {"split_index", m.split_index}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& m) {
  m.hidden_widths = j.value("hidden_widths", m.hidden_widths);
  m.split_index = j.value("split_index", m.split_index);
}

inline void to_json(nlohmann::json& j, const TrainConfig& t) {
  j = nlohmann::json{{"epochs", t.epochs},
                     {"batch_size", t.batch_size},
                     {"learning_rate", t.learning_rate},
                     {"seed", t.seed},
                     {"weight_decay", t.weight_decay}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& t) {
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.seed = j.value("seed", t.seed);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
}

inline void to_json(nlohmann::json& j, const SurrogateSearchConfig& s) {
  j = nlohmann::json{{"eta", s.eta},
                     {"max_steps", s.max_steps},
                     {"rel_tol", s.rel_tol},
                     {"abs_tol", s.abs_tol},
                     {"feature_norm", to_string(s.feature_norm)}};
}
inline void from_json(const nlohmann::json& j, SurrogateSearchConfig& s) {
  s.eta = j.value("eta", s.eta);
  s.max_steps = j.value("max_steps", s.max_steps);
  s.rel_tol = j.value("rel_tol", s.rel_tol);
  s.abs_tol = j.value("abs_tol", s.abs_tol);
  if (j.contains("feature_norm"))
    s.feature_norm =
        j.at("feature_norm").get<std::string>() == "l2" ? Norm::kL2 : Norm::kLinf;
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"name", c.name},
                     {"dataset", to_string(c.dataset)},
                     {"csv_path", c.csv_path},
                     {"csv_targets", c.csv_targets},
                     {"n_samples", c.n_samples},
                     {"method", to_string(c.method)},
                     {"alpha", c.alpha},
                     {"seeds", c.seeds},
                     {"model", c.model},
                     {"train", c.train},
                     {"search", c.search},
                     {"step_candidates", c.step_candidates},
                     {"split_ratios", c.split_ratios},
                     {"untrained_control", c.untrained_control},
                     {"standardize_targets", c.standardize_targets},
                     {"cubic_level", c.cubic_level},
                     {"tightness_subsample", c.tightness_subsample},
                     {"tightness_samples", c.tightness_samples},
                     {"classify_samples", c.classify_samples},
                     {"classify_classes", c.classify_classes}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c.name = j.value("name", c.name);
  if (j.contains("dataset")) c.dataset = dataset_kind_from_string(j.at("dataset"));
  c.csv_path = j.value("csv_path", c.csv_path);
  c.csv_targets = j.value("csv_targets", c.csv_targets);
  c.n_samples = j.value("n_samples", c.n_samples);
  if (j.contains("method")) c.method = method_from_string(j.at("method"));
  c.alpha = j.value("alpha", c.alpha);
  c.seeds = j.value("seeds", c.seeds);
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("search")) j.at("search").get_to(c.search);
  c.step_candidates = j.value("step_candidates", c.step_candidates);
  c.split_ratios = j.value("split_ratios", c.split_ratios);
  c.untrained_control = j.value("untrained_control", c.untrained_control);
  c.standardize_targets = j.value("standardize_targets", c.standardize_targets);
  c.cubic_level = j.value("cubic_level", c.cubic_level);
  c.tightness_subsample = j.value("tightness_subsample", c.tightness_subsample);
  c.tightness_samples = j.value("tightness_samples", c.tightness_samples);
  c.classify_samples = j.value("classify_samples", c.classify_samples);
  c.classify_classes = j.value("classify_classes", c.classify_classes);
}

inline nlohmann::json seed_result_json(const RunResult& run, const SeedResult& r) {
  nlohmann::json j{{"seed", r.seed},
                   {"method", to_string(run.config.method)},
                   {"dataset", to_string(run.config.dataset)},
                   {"alpha", run.config.alpha},
                   {"coverage", r.eval.coverage},
                   {"avg_length", r.eval.avg_length},
                   {"unbounded_count", r.eval.unbounded_count},
                   {"degenerate_count", r.eval.degenerate_count},
                   {"train_loss_initial", r.train_loss_initial},
                   {"train_loss_final", r.train_loss_final}};
  j["weighted_length"] =
      r.eval.weighted_length ? nlohmann::json(*r.eval.weighted_length) : nlohmann::json();
  j["group_coverage"] =
      r.eval.group_coverage ? nlohmann::json(*r.eval.group_coverage) : nlohmann::json();
  j["q"] = std::isfinite(r.q) ? nlohmann::json(r.q) : nlohmann::json();
  j["tightness_ratio"] =
      std::isfinite(r.tightness_ratio) ? nlohmann::json(r.tightness_ratio) : nlohmann::json();
  if (r.m_selection) {
    j["m_selection"] = {{"candidate_steps", r.m_selection->candidate_steps},
                        {"validation_coverages", r.m_selection->validation_coverages},
                        {"chosen_steps", r.m_selection->chosen_steps},
                        {"reached_target", r.m_selection->reached_target}};
  }
  if (r.cubic)
    j["cubic"] = {{"feature_spread", r.cubic->feature_spread},
                  {"output_spread", r.cubic->output_spread},
                  {"level", r.cubic->level}};
  if (r.record) j["calibration"] = *r.record;
  if (r.record_lo) j["calibration_lo"] = *r.record_lo;
  if (r.record_hi) j["calibration_hi"] = *r.record_hi;
  return j;
}

inline std::string summary_csv_header() {
  return "method,dataset,seed,alpha,coverage,avg_length,weighted_length,group_coverage,"
         "feature_spread,output_spread,chosen_M,tightness_ratio";
}

inline std::string summary_csv_row(const RunResult& run, const SeedResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << to_string(run.config.method) << ',' << to_string(run.config.dataset) << ','
     << r.seed << ',' << run.config.alpha << ',' << r.eval.coverage << ','
     << r.eval.avg_length << ',';
  if (r.eval.weighted_length) os << *r.eval.weighted_length;
  os << ',';
  if (r.eval.group_coverage) os << *r.eval.group_coverage;
  os << ',';
  if (r.cubic) os << r.cubic->feature_spread;
  os << ',';
  if (r.cubic) os << r.cubic->output_spread;
  os << ',';
  if (r.m_selection) os << r.m_selection->chosen_steps;
  os << ',';
  if (std::isfinite(r.tightness_ratio)) os << r.tightness_ratio;
  return os.str();
}

// Writes out/<name>/config.json, out/<name>/<seed>/result.json and
// out/<name>/summary.csv.
inline void write_run_result(const RunResult& run, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(out_dir) / run.config.name;
  fs::create_directories(base);
  {
    std::ofstream os(base / "config.json");
    os << nlohmann::json(run.config).dump(2) << '\n';
  }
  std::ofstream csv(base / "summary.csv");
  csv << summary_csv_header() << '\n';
  for (const SeedResult& r : run.per_seed) {
    const fs::path seed_dir = base / std::to_string(r.seed);
    fs::create_directories(seed_dir);
    std::ofstream os(seed_dir / "result.json");
    os << seed_result_json(run, r).dump(2) << '\n';
    csv << summary_csv_row(run, r) << '\n';
  }
  nlohmann::json agg{{"mean_coverage", run.mean_coverage},
                     {"std_coverage", run.std_coverage},
                     {"mean_length", run.mean_length},
                     {"std_length", run.std_length}};
  std::ofstream os(base / "aggregate.json");
  os << agg.dump(2) << '\n';
}

}  // namespace fcp
