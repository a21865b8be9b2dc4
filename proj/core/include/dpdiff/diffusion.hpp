// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dpdiff/nn.hpp"
#include "dpdiff/optim.hpp"
#include "dpdiff/rng.hpp"
#include "dpdiff/tensor.hpp"

namespace dpdiff {

/// Linear beta schedule and its derived tables. Accessors are 1-indexed by
/// timestep; alpha_bar(0) is 1.
struct NoiseSchedule {
  int steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<double> beta_tildes;
  std::vector<double> loss_weights;

  double beta(int t) const { return betas[static_cast<std::size_t>(t - 1)]; }
  double alpha(int t) const { return alphas[static_cast<std::size_t>(t - 1)]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)]; }
  double beta_tilde(int t) const { return beta_tildes[static_cast<std::size_t>(t - 1)]; }
  double loss_weight(int t) const { return loss_weights[static_cast<std::size_t>(t - 1)]; }

  void check_step(int t, const char* op) const;
};

NoiseSchedule build_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

/// Noised tokens and prototypes at a shared timestep.
struct DiffusionState {
  Tensor x_t;
  Tensor p_t;
  int t = 0;
  Tensor eps_x;
  Tensor eps_p;
};

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps, differentiable in x0.
Tensor perturb(const Tensor& x0, const Tensor& eps, double alpha_bar);

Tensor standard_normal(const Shape& shape, Rng& rng);

/// Closed-form q(x_t | x_0) for tokens and prototypes with independent noise.
DiffusionState forward_perturb(const NoiseSchedule& schedule, const Tensor& x0, const Tensor& p0, int t, Rng& rng);

/// Interleaved [sin, cos] pairs at frequencies 10000^(-i / (dim/2)).
std::vector<double> timestep_embedding(double t, std::size_t dim);

/// Anything that predicts token noise from (x_t, P_t, t).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual Tensor predict(const Tensor& x_t, const Tensor& p_t, int t) const = 0;
};

struct DenoiserConfig {
  std::size_t dim = 16;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;      // 0 means 4 * dim
  std::size_t time_freq_dim = 64;  // sinusoidal embedding width
  std::size_t time_hidden = 0;     // 0 means dim

  std::size_t resolved_ffn_hidden() const { return ffn_hidden ? ffn_hidden : 4 * dim; }
  std::size_t resolved_time_hidden() const { return time_hidden ? time_hidden : dim; }
};

/// Prototype-aware diffusion transformer.
///
/// Each block runs adaLN-modulated self-attention over tokens, then an
/// unmodulated cross-attention from tokens to the noisy prototypes, then an
/// adaLN-modulated FFN, each with a residual connection. Modulation weights
/// and the output head start at zero, so a fresh network predicts zero noise.
class Denoiser : public NoisePredictor {
 public:
  struct Block {
    nn::Linear modulation;  // cond -> 6C: shift/scale/gate for attention and FFN
    nn::MultiHeadAttention self_attn;
    nn::MultiHeadAttention cross_attn;
    nn::FeedForward ffn;
  };

  static Denoiser create(const DenoiserConfig& config, Rng& rng);

  Tensor predict(const Tensor& x_t, const Tensor& p_t, int t) const override;

  ParameterList parameters(const std::string& prefix = "denoiser") const;
  std::size_t parameter_count() const;
  const DenoiserConfig& config() const { return config_; }

  std::vector<Block>& blocks() { return blocks_; }
  nn::Linear& head() { return head_; }

 private:
  Tensor condition(int t) const;

  DenoiserConfig config_;
  nn::Linear time_in_;
  nn::Linear time_out_;
  std::vector<Block> blocks_;
  nn::Linear final_modulation_;  // cond -> 2C: shift/scale before the head
  nn::Linear head_;
};

Tensor denoiser_forward(const NoisePredictor& denoiser, const DiffusionState& state);

/// Mean-squared noise-prediction error at an explicit timestep.
Tensor diffusion_loss_at(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x0,
                         const Tensor& p0, int t, Rng& rng);

/// Mean-squared noise-prediction error with t drawn uniformly from {1..T}.
Tensor diffusion_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x0,
                      const Tensor& p0, Rng& rng);

/// Clean prototypes plus one fixed noise draw; yields P_s for any level s.
struct PrototypeCondition {
  Tensor p0;
  Tensor eps;

  Tensor at(const NoiseSchedule& schedule, int s) const;
};

/// One ancestral step x_s -> x_{s-1}; noise is added only when s > 1.
Tensor ddpm_reverse_step(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_s,
                         const Tensor& p_s, int s, Rng& rng);

/// `count` evenly spaced levels from `t` down, strictly decreasing, first == t.
std::vector<int> make_step_list(int t, int count);

/// Deterministic (eta = 0) DDIM from x at level step_list.front() to x0.
Tensor ddim_reconstruct(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_t,
                        const PrototypeCondition& condition, std::span<const int> step_list);

/// Ancestral sampling along step_list. Consecutive levels use the one-step
/// DDPM update; skipped levels use the matching posterior q(x_s' | x_s, x0_hat).
Tensor ddpm_reconstruct(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_t,
                        const PrototypeCondition& condition, std::span<const int> step_list, Rng& rng);

}  // namespace dpdiff
