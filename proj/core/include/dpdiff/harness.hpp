// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dpdiff/checkpoint.hpp"
#include "dpdiff/config.hpp"
#include "dpdiff/diffusion.hpp"
#include "dpdiff/features.hpp"
#include "dpdiff/metrics.hpp"
#include "dpdiff/prototype.hpp"
#include "dpdiff/scoring.hpp"

namespace dpdiff {

/// Both prototype extractors, the denoiser and the schedule they share.
class Model {
 public:
  /// Fresh initialization for C-dimensional tokens, seeded from config.seed.
  static Model create(const RunConfig& config, std::size_t dim);
  /// Rebuilds the architecture from `config` and loads the checkpoint into it.
  static Model from_checkpoint(const Checkpoint& checkpoint, const RunConfig& config);

  /// P0 = [P_local; P_global], shape [(M + K) x C].
  Tensor prototypes(const Tensor& x0) const;

  const PrototypeExtractor& local() const { return local_; }
  const PrototypeExtractor& global() const { return global_; }
  const Denoiser& denoiser() const { return denoiser_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  std::size_t dim() const { return dim_; }

  ParameterList parameters() const;
  /// Parameters plus the "config.schedule" and "config.model" records.
  Checkpoint to_checkpoint() const;

 private:
  std::vector<double> model_record() const;

  RunConfig config_;
  std::size_t dim_ = 0;
  NoiseSchedule schedule_;
  PrototypeExtractor local_;
  PrototypeExtractor global_;
  Denoiser denoiser_;
};

struct TrainStep {
  std::size_t step = 0;
  double l_diff = 0.0;
  double l_local = 0.0;
  double l_global = 0.0;
  double total = 0.0;
};

struct TrainLog {
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::vector<TrainStep> steps;

  /// step,l_diff,l_local,l_global,total with round-trip precision.
  std::string to_csv() const;
};

struct TrainResult {
  Model model;
  TrainLog log;
};

struct RunData {
  Dataset train;
  Dataset test;
};

/// Reads the DPFT files named in the config, or generates the synthetic set.
RunData load_run_data(const RunConfig& config);

using CheckpointCallback = std::function<void(std::size_t step, const Model& model)>;

/// Joint optimization of the three losses with one Adam over every parameter.
/// A loss term whose weight is zero is not computed and is logged as 0.
TrainResult train_model(const RunConfig& config, const Dataset& train, const CheckpointCallback& on_interval = {});

/// Loads data, trains, and writes model.dpck, train_log.csv and
/// train_meta.json under config.output_dir (plus interval checkpoints).
TrainResult run_training(const RunConfig& config);

struct RecordResult {
  std::size_t index = 0;
  std::uint32_t category_id = 0;
  Label label = Label::kNormal;
  AnomalyMap map;
};

struct Evaluation {
  MetricsReport report;
  std::vector<RecordResult> records;
};

/// Scores one test record. Noise draws come from a stream keyed by
/// (config.seed, record_index), so results do not depend on worker count.
AnomalyMap score_record(const Model& model, const FeatureRecord& record, std::size_t record_index,
                        const RunConfig& config);

Evaluation evaluate_model(const Model& model, const Dataset& test, const RunConfig& config);

/// Loads the checkpoint and test data named by the config and evaluates.
Evaluation run_evaluation(const Checkpoint& checkpoint, const RunConfig& config);

/// Writes index.csv plus one map and one mask CSV per record under `dir`.
void export_maps(const Evaluation& evaluation, const Dataset& test, const std::filesystem::path& dir);

/// Rebuilds a report from a directory written by export_maps().
MetricsReport metrics_from_exported_maps(const std::filesystem::path& dir, const AuproOptions& options = {});

AuproOptions aupro_options(const RunConfig& config);

}  // namespace dpdiff
