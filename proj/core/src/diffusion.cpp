// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/diffusion.hpp"

#include <cmath>

#include "dpdiff/errors.hpp"

namespace dpdiff {

void NoiseSchedule::check_step(int t, const char* op) const {
  if (t < 1 || t > steps) {
    throw ArgumentError(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) +
                        "]");
  }
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  const auto n = static_cast<std::size_t>(steps);
  s.betas.resize(n);
  s.alphas.resize(n);
  s.alpha_bars.resize(n);
  s.beta_tildes.resize(n);
  s.loss_weights.assign(n, 1.0);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[i] = 1.0 - s.betas[i];
    const double previous = running;
    running *= s.alphas[i];
    s.alpha_bars[i] = running;
    s.beta_tildes[i] = (1.0 - previous) / (1.0 - running) * s.betas[i];
  }
  return s;
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal();
  return Tensor::from(shape, std::move(values));
}

Tensor perturb(const Tensor& x0, const Tensor& eps, double alpha_bar) {
  return add(scale(x0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

DiffusionState forward_perturb(const NoiseSchedule& schedule, const Tensor& x0, const Tensor& p0, int t, Rng& rng) {
  schedule.check_step(t, "forward_perturb");
  DiffusionState state;
  state.t = t;
  state.eps_x = standard_normal(x0.shape(), rng);
  state.eps_p = standard_normal(p0.shape(), rng);
  const double ab = schedule.alpha_bar(t);
  state.x_t = perturb(x0, state.eps_x, ab);
  state.p_t = perturb(p0, state.eps_p, ab);
  return state;
}

std::vector<double> timestep_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("timestep embedding width must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

// Denoiser -------------------------------------------------------------------

namespace {

Tensor modulate(const Tensor& h, const Tensor& shift, const Tensor& scale_row) {
  return add_row(mul_row(h, add_scalar(scale_row, 1.0)), shift);
}

}  // namespace

Denoiser Denoiser::create(const DenoiserConfig& config, Rng& rng) {
  if (config.dim == 0 || config.depth == 0) throw ConfigError("denoiser needs positive width and depth");
  Denoiser d;
  d.config_ = config;
  const std::size_t c = config.dim;
  const std::size_t cond = config.resolved_time_hidden();
  d.time_in_ = nn::Linear::create(config.time_freq_dim, cond, true, rng);
  d.time_out_ = nn::Linear::create(cond, cond, true, rng);
  for (std::size_t b = 0; b < config.depth; ++b) {
    Block block;
    block.modulation = nn::Linear::zeros(cond, 6 * c, true);
    block.self_attn = nn::MultiHeadAttention::create(c, config.heads, rng);
    block.cross_attn = nn::MultiHeadAttention::create(c, config.heads, rng);
    block.ffn = nn::FeedForward::create(c, config.resolved_ffn_hidden(), rng);
    d.blocks_.push_back(std::move(block));
  }
  d.final_modulation_ = nn::Linear::zeros(cond, 2 * c, true);
  d.head_ = nn::Linear::zeros(c, c, true);
  return d;
}

Tensor Denoiser::condition(int t) const {
  Tensor emb = Tensor::from({1, config_.time_freq_dim}, timestep_embedding(static_cast<double>(t), config_.time_freq_dim));
  return gelu(time_out_(gelu(time_in_(emb))));
}

Tensor Denoiser::predict(const Tensor& x_t, const Tensor& p_t, int t) const {
  const std::size_t c = config_.dim;
  if (x_t.rank() != 2 || x_t.cols() != c || p_t.rank() != 2 || p_t.cols() != c) {
    throw DimensionError("denoiser expects [N x " + std::to_string(c) + "] tokens and prototypes, got " +
                         shape_str(x_t.shape()) + " and " + shape_str(p_t.shape()));
  }
  const Tensor cond = condition(t);
  Tensor x = x_t;
  for (const Block& block : blocks_) {
    const Tensor mod = block.modulation(cond);
    const Tensor shift_attn = slice_cols(mod, 0, c);
    const Tensor scale_attn = slice_cols(mod, c, c);
    const Tensor gate_attn = slice_cols(mod, 2 * c, c);
    const Tensor shift_ffn = slice_cols(mod, 3 * c, c);
    const Tensor scale_ffn = slice_cols(mod, 4 * c, c);
    const Tensor gate_ffn = slice_cols(mod, 5 * c, c);

    const Tensor h = modulate(layer_norm(x), shift_attn, scale_attn);
    x = add(x, mul_row(block.self_attn(h, h), gate_attn));
    x = add(x, block.cross_attn(x, p_t));
    x = add(x, mul_row(block.ffn(modulate(layer_norm(x), shift_ffn, scale_ffn)), gate_ffn));
  }
  const Tensor mod = final_modulation_(cond);
  return head_(modulate(layer_norm(x), slice_cols(mod, 0, c), slice_cols(mod, c, c)));
}

ParameterList Denoiser::parameters(const std::string& prefix) const {
  ParameterList out;
  time_in_.collect(prefix + ".time_in", out);
  time_out_.collect(prefix + ".time_out", out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    blocks_[b].modulation.collect(p + ".modulation", out);
    blocks_[b].self_attn.collect(p + ".self_attn", out);
    blocks_[b].cross_attn.collect(p + ".cross_attn", out);
    blocks_[b].ffn.collect(p + ".ffn", out);
  }
  final_modulation_.collect(prefix + ".final_modulation", out);
  head_.collect(prefix + ".head", out);
  return out;
}

std::size_t Denoiser::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Tensor denoiser_forward(const NoisePredictor& denoiser, const DiffusionState& state) {
  return denoiser.predict(state.x_t, state.p_t, state.t);
}

Tensor diffusion_loss_at(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x0,
                         const Tensor& p0, int t, Rng& rng) {
  const DiffusionState state = forward_perturb(schedule, x0, p0, t, rng);
  return mse(denoiser_forward(denoiser, state), state.eps_x);
}

Tensor diffusion_loss(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x0,
                      const Tensor& p0, Rng& rng) {
  const int t = static_cast<int>(rng.uniform_int(1, static_cast<std::uint64_t>(schedule.steps)));
  return diffusion_loss_at(denoiser, schedule, x0, p0, t, rng);
}

// Reverse process ------------------------------------------------------------

Tensor PrototypeCondition::at(const NoiseSchedule& schedule, int s) const {
  return perturb(p0, eps, schedule.alpha_bar(s));
}

Tensor ddpm_reverse_step(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_s,
                         const Tensor& p_s, int s, Rng& rng) {
  schedule.check_step(s, "ddpm_reverse_step");
  const Tensor eps_hat = denoiser.predict(x_s, p_s, s);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha(s));
  const double eps_coef = schedule.beta(s) / std::sqrt(1.0 - schedule.alpha_bar(s));
  auto xv = x_s.data();
  auto ev = eps_hat.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = inv_sqrt_alpha * (xv[i] - eps_coef * ev[i]);
  if (s > 1) {
    const double sigma = std::sqrt(schedule.beta_tilde(s));
    for (double& v : out) v += sigma * rng.normal();
  }
  return Tensor::from(x_s.shape(), std::move(out));
}

std::vector<int> make_step_list(int t, int count) {
  if (t < 1) throw ArgumentError("make_step_list: start level must be at least 1");
  if (count < 1 || count > t) {
    throw ArgumentError("make_step_list: step count must lie in [1, " + std::to_string(t) + "]");
  }
  std::vector<int> steps(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    steps[static_cast<std::size_t>(i)] =
        t - static_cast<int>(static_cast<long long>(i) * t / count);
  }
  return steps;
}

namespace {

void check_step_list(const NoiseSchedule& schedule, std::span<const int> steps, const char* op) {
  if (steps.empty()) throw ArgumentError(std::string(op) + ": empty step list");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    schedule.check_step(steps[i], op);
    if (i > 0 && steps[i] >= steps[i - 1]) {
      throw ArgumentError(std::string(op) + ": step list must be strictly decreasing");
    }
  }
}

std::vector<double> predict_x0(std::span<const double> x, std::span<const double> eps, double alpha_bar) {
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x[i] - b * eps[i]) / a;
  return out;
}

}  // namespace

Tensor ddim_reconstruct(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_t,
                        const PrototypeCondition& condition, std::span<const int> step_list) {
  check_step_list(schedule, step_list, "ddim_reconstruct");
  Tensor x = x_t;
  for (std::size_t i = 0; i < step_list.size(); ++i) {
    const int s = step_list[i];
    const int next = i + 1 < step_list.size() ? step_list[i + 1] : 0;
    const Tensor eps_hat = denoiser.predict(x, condition.at(schedule, s), s);
    std::vector<double> x0 = predict_x0(x.data(), eps_hat.data(), schedule.alpha_bar(s));
    if (next == 0) return Tensor::from(x.shape(), std::move(x0));
    const double a = std::sqrt(schedule.alpha_bar(next));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(next));
    auto ev = eps_hat.data();
    for (std::size_t j = 0; j < x0.size(); ++j) x0[j] = a * x0[j] + b * ev[j];
    x = Tensor::from(x.shape(), std::move(x0));
  }
  return x;  // unreachable: the last listed level always jumps to 0
}

Tensor ddpm_reconstruct(const NoisePredictor& denoiser, const NoiseSchedule& schedule, const Tensor& x_t,
                        const PrototypeCondition& condition, std::span<const int> step_list, Rng& rng) {
  check_step_list(schedule, step_list, "ddpm_reconstruct");
  Tensor x = x_t;
  for (std::size_t i = 0; i < step_list.size(); ++i) {
    const int s = step_list[i];
    const int next = i + 1 < step_list.size() ? step_list[i + 1] : 0;
    if (next == s - 1) {
      x = ddpm_reverse_step(denoiser, schedule, x, condition.at(schedule, s), s, rng);
      continue;
    }
    const Tensor eps_hat = denoiser.predict(x, condition.at(schedule, s), s);
    const double ab_s = schedule.alpha_bar(s);
    const double ab_next = schedule.alpha_bar(next);
    const std::vector<double> x0 = predict_x0(x.data(), eps_hat.data(), ab_s);
    const double alpha_eff = ab_s / ab_next;
    const double beta_eff = 1.0 - alpha_eff;
    const double c0 = std::sqrt(ab_next) * beta_eff / (1.0 - ab_s);
    const double cx = std::sqrt(alpha_eff) * (1.0 - ab_next) / (1.0 - ab_s);
    const double sigma = next > 0 ? std::sqrt((1.0 - ab_next) / (1.0 - ab_s) * beta_eff) : 0.0;
    auto xv = x.data();
    std::vector<double> out(xv.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
      out[j] = c0 * x0[j] + cx * xv[j];
      if (next > 0) out[j] += sigma * rng.normal();
    }
    x = Tensor::from(x.shape(), std::move(out));
  }
  return x;
}

}  // namespace dpdiff
