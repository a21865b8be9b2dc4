// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

// dpdiff command-line entry point: synth, train, eval, score, metrics.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data error,
// 1 anything else (training divergence, internal failures).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dpdiff/config.hpp"
#include "dpdiff/errors.hpp"
#include "dpdiff/features.hpp"
#include "dpdiff/harness.hpp"
#include "dpdiff/scoring.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

dpdiff::RunConfig load_config(const std::string& path) {
  if (path.empty()) {
    dpdiff::RunConfig config;
    config.validate();
    return config;
  }
  std::string text;
  try {
    text = dpdiff::read_text_file(path);
  } catch (const dpdiff::IoError& e) {
    throw dpdiff::ConfigError(std::string("config: ") + e.what());
  }
  return dpdiff::config_from_json(text);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw dpdiff::IoError("cannot write " + path.string());
}

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;
  bool print_config = false;
};

int cmd_train(const TrainArgs& args) {
  dpdiff::RunConfig config = load_config(args.config);
  if (!args.out.empty()) config.output_dir = args.out;
  if (args.seed) config.seed = *args.seed;
  if (args.max_steps) config.max_steps = *args.max_steps;
  config.validate();
  if (args.print_config) {
    std::cout << dpdiff::config_defaults_dump(config);
    return kExitOk;
  }
  const auto result = dpdiff::run_training(config);
  const auto& steps = result.log.steps;
  std::cout << "trained " << steps.size() << " steps";
  if (!steps.empty()) std::cout << ", final l_diff " << steps.back().l_diff << ", total " << steps.back().total;
  std::cout << "\ncheckpoint: " << (std::filesystem::path(config.output_dir) / "model.dpck").string() << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  std::string report;
  std::string export_dir;
  std::string sampler;
  std::optional<std::size_t> workers;
};

int cmd_eval(const EvalArgs& args) {
  if (args.checkpoint.empty()) throw dpdiff::ConfigError("eval needs --checkpoint");
  dpdiff::RunConfig config = load_config(args.config);
  if (args.sampler == "ddpm") {
    config.sampler = dpdiff::Sampler::kDdpm;
  } else if (args.sampler == "ddim") {
    config.sampler = dpdiff::Sampler::kDdim;
  }
  if (args.workers) config.eval_workers = *args.workers;
  config.validate();
  const auto checkpoint = dpdiff::read_checkpoint(args.checkpoint);
  const auto data = dpdiff::load_run_data(config);
  const auto model = dpdiff::Model::from_checkpoint(checkpoint, config);
  const auto eval = dpdiff::evaluate_model(model, data.test, config);
  const std::string report_path =
      args.report.empty() ? (std::filesystem::path(config.output_dir) / "metrics.json").string() : args.report;
  const std::string json = eval.report.to_json();
  write_text(report_path, json);
  if (!args.export_dir.empty()) dpdiff::export_maps(eval, data.test, args.export_dir);
  std::cout << json;
  return kExitOk;
}

struct ScoreArgs {
  std::string config;
  std::string checkpoint;
  std::string features;
  std::size_t index = 0;
  std::string out;
  std::string pgm;
};

int cmd_score(const ScoreArgs& args) {
  if (args.checkpoint.empty()) throw dpdiff::ConfigError("score needs --checkpoint");
  const dpdiff::RunConfig config = load_config(args.config);
  dpdiff::Dataset test = args.features.empty() ? dpdiff::load_run_data(config).test
                                               : dpdiff::load_feature_file(args.features, dpdiff::Split::kTest);
  if (args.index >= test.records.size()) {
    throw dpdiff::ArgumentError("--index " + std::to_string(args.index) + " is out of range (" +
                                std::to_string(test.records.size()) + " records)");
  }
  const auto model = dpdiff::Model::from_checkpoint(dpdiff::read_checkpoint(args.checkpoint), config);
  const auto map = dpdiff::score_record(model, test.records[args.index], args.index, config);
  if (!args.out.empty()) dpdiff::write_map_csv(args.out, map.upsampled);
  if (!args.pgm.empty()) dpdiff::write_map_pgm(args.pgm, map.upsampled);
  std::printf("record %zu image_score %.17g map %zux%zu\n", args.index, map.image_score, map.upsampled.height,
              map.upsampled.width);
  return kExitOk;
}

struct SynthArgs {
  std::string spec;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& args) {
  dpdiff::SynthSpec spec;
  if (!args.spec.empty()) {
    std::string text;
    try {
      text = dpdiff::read_text_file(args.spec);
    } catch (const dpdiff::IoError& e) {
      throw dpdiff::ConfigError(std::string("synth spec: ") + e.what());
    }
    spec = dpdiff::synth_spec_from_json(text);
  }
  if (args.seed) spec.seed = *args.seed;
  spec.validate();
  const auto data = dpdiff::generate_synthetic_dataset(spec);
  const std::filesystem::path out = args.out;
  std::filesystem::create_directories(out);
  dpdiff::write_feature_file(out / "train.dpft", data.train);
  dpdiff::write_feature_file(out / "test.dpft", data.test);
  write_text(out / "synth_spec.json", dpdiff::synth_spec_to_json(spec));
  std::cout << "wrote " << data.train.records.size() << " train and " << data.test.records.size()
            << " test records to " << out.string() << "\n";
  return kExitOk;
}

struct MetricsArgs {
  std::string maps;
  std::string out;
  double fpr_limit = 0.3;
  std::size_t max_thresholds = 256;
};

int cmd_metrics(const MetricsArgs& args) {
  dpdiff::AuproOptions options;
  options.fpr_limit = args.fpr_limit;
  options.max_thresholds = args.max_thresholds;
  const auto report = dpdiff::metrics_from_exported_maps(args.maps, options);
  const std::string json = report.to_json();
  if (!args.out.empty()) write_text(args.out, json);
  std::cout << json;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpdiff: prototype-guided diffusion anomaly detection on feature tokens"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train extractors and denoiser");
  train_cmd->add_option("--config", train.config, "RunConfig JSON (defaults when omitted)");
  train_cmd->add_option("--out", train.out, "Override output_dir");
  train_cmd->add_option("--seed", train.seed, "Override seed");
  train_cmd->add_option("--max-steps", train.max_steps, "Override the Adam step budget");
  train_cmd->add_flag("--print-config", train.print_config, "Print the resolved config with value sources and exit");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--config", eval.config, "RunConfig JSON");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "DPCK checkpoint");
  eval_cmd->add_option("--report", eval.report, "Report path (default <output_dir>/metrics.json)");
  eval_cmd->add_option("--export-maps", eval.export_dir, "Directory for index.csv and per-record maps");
  eval_cmd->add_option("--sampler", eval.sampler, "ddim or ddpm")->check(CLI::IsMember({"ddim", "ddpm"}));
  eval_cmd->add_option("--workers", eval.workers, "Evaluation threads");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "Anomaly map for one test record");
  score_cmd->add_option("--config", score.config, "RunConfig JSON");
  score_cmd->add_option("--checkpoint", score.checkpoint, "DPCK checkpoint");
  score_cmd->add_option("--features", score.features, "DPFT test file (default: the config's test data)");
  score_cmd->add_option("--index", score.index, "Record index");
  score_cmd->add_option("--out", score.out, "CSV output for the upsampled map");
  score_cmd->add_option("--pgm", score.pgm, "PGM preview output");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic DPFT dataset");
  synth_cmd->add_option("--spec", synth.spec, "SynthSpec JSON (defaults when omitted)");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth.seed, "Override the spec seed");

  MetricsArgs metrics;
  auto* metrics_cmd = app.add_subcommand("metrics", "Recompute a report from exported maps");
  metrics_cmd->add_option("--maps", metrics.maps, "Directory written by eval --export-maps")->required();
  metrics_cmd->add_option("--out", metrics.out, "Report output path");
  metrics_cmd->add_option("--fpr-limit", metrics.fpr_limit, "AUPRO integration limit");
  metrics_cmd->add_option("--max-thresholds", metrics.max_thresholds, "AUPRO threshold cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*score_cmd) return cmd_score(score);
    if (*synth_cmd) return cmd_synth(synth);
    if (*metrics_cmd) return cmd_metrics(metrics);
  } catch (const dpdiff::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dpdiff::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const dpdiff::MetricUndefinedError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
