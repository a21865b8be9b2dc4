// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dpdiff/features.hpp"

namespace dpdiff {

enum class Sampler { kDdim, kDdpm };

/// Everything a training or evaluation run needs. Parsed from JSON; unknown
/// keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;

  // Data: DPFT files when both paths are set, otherwise a generated dataset.
  std::string train_features;
  std::string test_features;
  SynthSpec synth;
  std::vector<std::size_t> layers;  // empty selects every layer

  // Prototypes.
  std::size_t local_prototypes = 8;
  std::size_t global_prototypes = 2;
  std::size_t prototype_heads = 4;
  std::size_t prototype_ffn_hidden = 0;  // 0 means 4 * C

  // Denoiser.
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means 4 * C
  std::size_t time_freq_dim = 64;

  // Noise schedule.
  int diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // Objective and optimizer.
  double lambda_local = 0.2;
  double lambda_global = 0.001;
  std::optional<double> sinkhorn_epsilon;
  int sinkhorn_max_iter = 200;
  double sinkhorn_tol = 1e-6;
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;            // 0: no cap beyond epochs
  std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint

  // Inference and scoring.
  int t_fix = 250;
  Sampler sampler = Sampler::kDdim;
  int ddim_steps = 3;
  int ddpm_steps = 50;
  std::size_t pool_kernel = 8;
  double fpr_limit = 0.3;
  std::size_t aupro_max_thresholds = 256;
  std::size_t eval_workers = 1;

  std::string output_dir = "run";

  bool uses_feature_files() const { return !train_features.empty() || !test_features.empty(); }

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

RunConfig config_from_json(const std::string& text);
std::string config_to_json(const RunConfig& config);

/// Config dump where every field carries its value and where that value
/// comes from ("reported setting" or "artifact default").
std::string config_defaults_dump(const RunConfig& config = {});

SynthSpec synth_spec_from_json(const std::string& text);
std::string synth_spec_to_json(const SynthSpec& spec);

std::string read_text_file(const std::string& path);

}  // namespace dpdiff
