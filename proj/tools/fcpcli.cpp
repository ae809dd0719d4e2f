// Experiment CLI for feature-space conformal prediction.
//
// Subcommands: gen-data, train, calibrate, evaluate, experiment, sweep-alpha,
// sweep-split, diagnostics.  `experiment` and the sweeps are driven by a JSON
// config (see --config) mirroring fcp::ExperimentConfig field for field;
// command-line flags override config values.  The train/calibrate/evaluate
// chain recomputes the seeded split and standardization deterministically, so
// the stages compose without sidecar state.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fcp/experiment.hpp"

namespace {

using nlohmann::json;

fcp::ExperimentConfig load_config(const std::string& path) {
  fcp::ExperimentConfig cfg;
  if (path.empty()) return cfg;
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  json j;
  is >> j;
  j.get_to(cfg);
  return cfg;
}

struct CommonFlags {
  std::string config_path;
  std::string out_dir = "runs";
  double alpha = 0.1;
  std::vector<std::uint64_t> seeds;
  std::string method;
  std::string dataset;
  std::string csv_path;
  std::vector<std::string> csv_targets;
  bool untrained_control = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--alpha", f.alpha, "significance level in (0,1)");
  cmd->add_option("--seeds", f.seeds, "run seeds")->delimiter(',');
  cmd->add_option("--method", f.method,
                  "vanilla_cp | feature_cp | cqr | feature_cqr | feature_cp_classify");
  cmd->add_option("--dataset", f.dataset, "synthetic_multidim | synthetic_1d_hetero | csv");
  cmd->add_option("--csv", f.csv_path, "CSV path for --dataset csv");
  cmd->add_option("--targets", f.csv_targets, "target column names for --dataset csv")
      ->delimiter(',');
  cmd->add_flag("--untrained-control", f.untrained_control,
                "skip training and keep the seeded initialization");
}

fcp::ExperimentConfig build_config(const CLI::App* cmd, const CommonFlags& f) {
  fcp::ExperimentConfig cfg = load_config(f.config_path);
  if (cmd->count("--alpha")) cfg.alpha = f.alpha;
  if (cmd->count("--seeds")) cfg.seeds = f.seeds;
  if (cmd->count("--method")) cfg.method = fcp::method_from_string(f.method);
  if (cmd->count("--dataset")) cfg.dataset = fcp::dataset_kind_from_string(f.dataset);
  if (cmd->count("--csv")) cfg.csv_path = f.csv_path;
  if (cmd->count("--targets")) cfg.csv_targets = f.csv_targets;
  if (cmd->count("--untrained-control")) cfg.untrained_control = true;
  return cfg;
}

void print_run(const fcp::RunResult& run) {
  std::printf("%s on %s, alpha=%.3g, %zu seed(s)\n", fcp::to_string(run.config.method),
              fcp::to_string(run.config.dataset), run.config.alpha, run.per_seed.size());
  for (const fcp::SeedResult& r : run.per_seed) {
    std::printf("  seed %llu: coverage=%.4f length=%.4f",
                static_cast<unsigned long long>(r.seed), r.eval.coverage, r.eval.avg_length);
    if (r.m_selection) std::printf(" M=%d", r.m_selection->chosen_steps);
    if (r.cubic)
      std::printf(" spread(feature)=%.4f spread(output)=%.4f", r.cubic->feature_spread,
                  r.cubic->output_spread);
    std::printf("\n");
  }
  std::printf("  mean coverage %.4f +- %.4f | mean length %.4f +- %.4f\n",
              run.mean_coverage, run.std_coverage, run.mean_length, run.std_length);
}

std::uint64_t single_seed(const fcp::ExperimentConfig& cfg) {
  return cfg.seeds.empty() ? 1 : cfg.seeds.front();
}

int run_gen_data(const std::string& dataset, std::size_t n, std::uint64_t seed,
                 const std::string& out) {
  fcp::Dataset ds;
  if (dataset == "synthetic_multidim")
    ds = fcp::gen_synthetic_multidim(seed, n);
  else if (dataset == "synthetic_1d_hetero")
    ds = fcp::gen_synthetic_1d_hetero(seed, n);
  else
    throw std::runtime_error("gen-data supports the synthetic generators only");
  fcp::save_csv(ds, out);
  std::printf("wrote %zu rows (%zu features, %zu targets) to %s\n", ds.size(),
              ds.num_features(), ds.num_targets(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature-space conformal prediction"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset as CSV");
  std::string gen_dataset = "synthetic_multidim", gen_out = "data.csv";
  std::size_t gen_n = 5000;
  std::uint64_t gen_seed = 1;
  gen->add_option("--dataset", gen_dataset, "generator name");
  gen->add_option("--n", gen_n, "number of rows");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--out", gen_out, "output CSV path")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the base model on the training fold");
  CommonFlags tr_flags;
  add_common(tr, tr_flags);
  std::string tr_model_out = "model.bin";
  tr->add_option("--model-out", tr_model_out, "model file to write");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "calibrate on the calibration fold");
  CommonFlags cal_flags;
  add_common(cal, cal_flags);
  std::string cal_model = "model.bin", cal_record_out = "record.json";
  cal->add_option("--model", cal_model, "trained model file");
  cal->add_option("--record-out", cal_record_out, "calibration record to write");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a calibration on the test fold");
  CommonFlags ev_flags;
  add_common(ev, ev_flags);
  std::string ev_model = "model.bin", ev_record = "record.json", ev_out;
  ev->add_option("--model", ev_model, "trained model file");
  ev->add_option("--record", ev_record, "calibration record file");
  ev->add_option("--eval-out", ev_out, "evaluation JSON to write (optional)");

  // experiment
  auto* ex = app.add_subcommand("experiment", "full multi-seed experiment");
  CommonFlags ex_flags;
  add_common(ex, ex_flags);

  // sweep-alpha
  auto* sa = app.add_subcommand("sweep-alpha", "one experiment per significance level");
  CommonFlags sa_flags;
  add_common(sa, sa_flags);
  std::vector<double> sa_alphas{0.05, 0.1, 0.2};
  sa->add_option("--alphas", sa_alphas, "alpha grid")->delimiter(',');

  // sweep-split
  auto* ss = app.add_subcommand("sweep-split", "one experiment per splitting point");
  CommonFlags ss_flags;
  add_common(ss, ss_flags);
  std::vector<std::size_t> ss_splits{1, 2, 3};
  ss->add_option("--splits", ss_splits, "splitting points")->delimiter(',');

  // diagnostics
  auto* dg = app.add_subcommand("diagnostics", "feature/output spread diagnostics");
  CommonFlags dg_flags;
  add_common(dg, dg_flags);
  double dg_level = 0.9;
  dg->add_option("--level", dg_level, "quantile level for the spreads");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(gen_dataset, gen_n, gen_seed, gen_out);

    if (tr->parsed()) {
      fcp::ExperimentConfig cfg = build_config(tr, tr_flags);
      cfg.validate();
      const std::uint64_t seed = single_seed(cfg);
      const auto ctx = fcp::detail::prepare_seed(cfg, seed);
      const fcp::SplitModel& model = ctx.model ? *ctx.model : *ctx.model_lo;
      fcp::save_model(model, tr_model_out);
      std::printf("trained seed %llu (loss %.6g -> %.6g), wrote %s\n",
                  static_cast<unsigned long long>(seed), ctx.trace.initial_loss,
                  ctx.trace.final_loss, tr_model_out.c_str());
      if (ctx.model_hi)
        std::fprintf(stderr,
                     "note: two-head methods save only the low head here; use "
                     "`experiment` for CQR variants\n");
      return 0;
    }

    if (cal->parsed()) {
      fcp::ExperimentConfig cfg = build_config(cal, cal_flags);
      cfg.validate();
      const std::uint64_t seed = single_seed(cfg);
      cfg.untrained_control = true;  // the model comes from the file, skip training
      const auto ctx = fcp::detail::prepare_seed(cfg, seed);
      const fcp::SplitModel model = fcp::load_model(cal_model);
      json doc;
      doc["alpha"] = cfg.alpha;
      doc["seed"] = seed;
      doc["method"] = fcp::to_string(cfg.method);
      if (cfg.method == fcp::Method::kVanillaCp) {
        doc["record"] = fcp::vanilla_cp_calibrate(model, ctx.data, ctx.folds.cal, cfg.alpha);
      } else if (cfg.method == fcp::Method::kFeatureCp) {
        const auto calib = fcp::fcp_calibrate(model, ctx.data, ctx.folds.cal, cfg.alpha,
                                              cfg.search, cfg.step_candidates);
        doc["record"] = calib.record;
        doc["search"] = calib.config;
        doc["m_selection"] = {{"candidate_steps", calib.m_selection.candidate_steps},
                              {"validation_coverages", calib.m_selection.validation_coverages},
                              {"chosen_steps", calib.m_selection.chosen_steps},
                              {"reached_target", calib.m_selection.reached_target}};
      } else {
        throw std::runtime_error(
            "calibrate supports vanilla_cp and feature_cp; use `experiment` for CQR "
            "variants");
      }
      std::ofstream os(cal_record_out);
      os << doc.dump(2) << '\n';
      std::printf("calibrated %s (q written to %s)\n", fcp::to_string(cfg.method),
                  cal_record_out.c_str());
      return 0;
    }

    if (ev->parsed()) {
      fcp::ExperimentConfig cfg = build_config(ev, ev_flags);
      cfg.validate();
      const std::uint64_t seed = single_seed(cfg);
      cfg.untrained_control = true;
      const auto ctx = fcp::detail::prepare_seed(cfg, seed);
      const fcp::SplitModel model = fcp::load_model(ev_model);
      std::ifstream is(ev_record);
      if (!is) throw std::runtime_error("cannot open record file " + ev_record);
      json doc;
      is >> doc;
      fcp::CalibrationRecord record = doc.at("record").get<fcp::CalibrationRecord>();
      const auto method = fcp::method_from_string(doc.at("method").get<std::string>());

      std::vector<bool> member;
      std::vector<fcp::OutputBand> bands;
      if (method == fcp::Method::kVanillaCp) {
        for (std::size_t i : ctx.folds.test) {
          bands.push_back(fcp::vanilla_cp_band(record, model, ctx.data.X.row(i)));
          member.push_back(bands.back().contains(ctx.data.Y.row(i)));
        }
      } else if (method == fcp::Method::kFeatureCp) {
        fcp::SurrogateSearchConfig search = doc.at("search").get<fcp::SurrogateSearchConfig>();
        for (std::size_t i : ctx.folds.test) {
          member.push_back(
              fcp::fcp_detect(model, record, ctx.data.X.row(i), ctx.data.Y.row(i), search));
          bands.push_back(fcp::fcp_estimate(model, record, ctx.data.X.row(i), search));
        }
      } else {
        throw std::runtime_error("evaluate supports vanilla_cp and feature_cp records");
      }
      std::size_t unbounded = 0;
      const double cov = fcp::coverage(member);
      const double len = fcp::avg_length(bands, &unbounded);
      json out{{"coverage", cov}, {"avg_length", len}, {"unbounded_count", unbounded},
               {"n_test", member.size()}};
      if (!ev_out.empty()) {
        std::ofstream os(ev_out);
        os << out.dump(2) << '\n';
      }
      std::printf("coverage=%.4f avg_length=%.4f (n=%zu, unbounded=%zu)\n", cov, len,
                  member.size(), unbounded);
      return 0;
    }

    if (ex->parsed()) {
      const fcp::ExperimentConfig cfg = build_config(ex, ex_flags);
      const fcp::RunResult run = fcp::run_experiment(cfg);
      fcp::write_run_result(run, ex_flags.out_dir);
      print_run(run);
      return 0;
    }

    if (sa->parsed()) {
      fcp::ExperimentConfig cfg = build_config(sa, sa_flags);
      const auto runs = fcp::sweep_alpha(cfg, sa_alphas);
      for (const fcp::RunResult& run : runs) {
        fcp::RunResult named = run;
        char suffix[32];
        std::snprintf(suffix, sizeof(suffix), "_alpha%.4g", run.config.alpha);
        named.config.name += suffix;
        fcp::write_run_result(named, sa_flags.out_dir);
        print_run(run);
        std::printf("  coverage - (1-alpha) = %+.4f\n",
                    run.mean_coverage - (1.0 - run.config.alpha));
      }
      return 0;
    }

    if (ss->parsed()) {
      fcp::ExperimentConfig cfg = build_config(ss, ss_flags);
      const auto runs = fcp::sweep_split_index(cfg, ss_splits);
      for (const fcp::RunResult& run : runs) {
        fcp::RunResult named = run;
        named.config.name += "_split" + std::to_string(run.config.model.split_index);
        fcp::write_run_result(named, ss_flags.out_dir);
        print_run(run);
      }
      return 0;
    }

    if (dg->parsed()) {
      fcp::ExperimentConfig cfg = build_config(dg, dg_flags);
      cfg.cubic_level = dg_level;
      cfg.method = fcp::Method::kFeatureCp;
      cfg.validate();
      const std::uint64_t seed = single_seed(cfg);
      const auto ctx = fcp::detail::prepare_seed(cfg, seed);
      const auto calib = fcp::fcp_calibrate(*ctx.model, ctx.data, ctx.folds.cal, cfg.alpha,
                                            cfg.search, cfg.step_candidates);
      const auto rep = fcp::cubic_diagnostics(*ctx.model, ctx.data, ctx.folds.cal,
                                              cfg.cubic_level, calib.config);
      std::printf("level=%.3g feature_spread=%.6f output_spread=%.6f ratio=%.4f\n",
                  rep.level, rep.feature_spread, rep.output_spread,
                  rep.output_spread != 0.0 ? rep.feature_spread / rep.output_spread : 0.0);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
