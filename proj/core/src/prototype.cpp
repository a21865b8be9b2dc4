// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/prototype.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dpdiff/errors.hpp"

namespace dpdiff {

namespace {

constexpr double kQueryInitStd = 0.02;

std::vector<double> row_norms(const Tensor& x, const char* what) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  auto v = x.data();
  std::vector<double> norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += v[i * c + j] * v[i * c + j];
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) {
      throw NumericalDomainError(std::string("zero-norm ") + what + " at row " + std::to_string(i));
    }
  }
  return norms;
}

void require_same_width(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
}

double log_sum_exp(const std::vector<double>& v) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double x : v) peak = std::max(peak, x);
  if (std::isinf(peak)) return peak;
  double s = 0.0;
  for (double x : v) s += std::exp(x - peak);
  return peak + std::log(s);
}

constexpr double kWarmupTolerance = 1e-3;

}  // namespace

PrototypeExtractor PrototypeExtractor::create(std::size_t count, std::size_t dim, std::size_t heads,
                                              std::size_t ffn_hidden, Rng& rng) {
  if (count == 0) throw ConfigError("prototype count must be positive");
  PrototypeExtractor e;
  e.queries = nn::normal_param({count, dim}, kQueryInitStd, rng);
  e.attn = nn::MultiHeadAttention::create(dim, heads, rng);
  e.ffn = nn::FeedForward::create(dim, ffn_hidden ? ffn_hidden : 4 * dim, rng);
  return e;
}

Tensor PrototypeExtractor::operator()(const Tensor& tokens) const {
  if (tokens.rank() != 2 || tokens.cols() != dim()) {
    throw DimensionError("prototype extractor expects [N x " + std::to_string(dim()) + "] tokens, got " +
                         shape_str(tokens.shape()));
  }
  Tensor refined = add(attn(queries, tokens), queries);
  return add(ffn(refined), refined);
}

void PrototypeExtractor::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".queries", queries});
  attn.collect(prefix + ".attn", out);
  ffn.collect(prefix + ".ffn", out);
}

Tensor extract_prototypes(const PrototypeExtractor& extractor, const Tensor& tokens) { return extractor(tokens); }

Tensor local_alignment_loss(const Tensor& tokens, const Tensor& local_protos) {
  require_same_width(tokens, local_protos, "local_alignment_loss");
  const std::size_t n = tokens.rows();
  const std::size_t m = local_protos.rows();
  const std::size_t c = tokens.cols();
  const auto x_norm = row_norms(tokens, "token");
  const auto p_norm = row_norms(local_protos, "prototype");
  auto xv = tokens.data();
  auto pv = local_protos.data();

  std::vector<std::size_t> chosen(n);
  std::vector<double> chosen_cos(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_m = 0;
    for (std::size_t k = 0; k < m; ++k) {
      double dot = 0.0;
      for (std::size_t f = 0; f < c; ++f) dot += xv[i * c + f] * pv[k * c + f];
      const double cos = dot / (x_norm[i] * p_norm[k]);
      if (cos > best) {
        best = cos;
        best_m = k;
      }
    }
    chosen[i] = best_m;
    chosen_cos[i] = best;
    total += 1.0 - best;
  }
  const double value = total / static_cast<double>(n);
  return make_result(
      {1}, {value}, {tokens, local_protos},
      [tokens, local_protos, n, c, chosen = std::move(chosen), chosen_cos = std::move(chosen_cos),
       x_norm = std::move(x_norm), p_norm = std::move(p_norm)](std::span<const double> g,
                                                              std::span<const double>) mutable {
        auto xv = tokens.data();
        auto pv = local_protos.data();
        std::span<double> gx = tokens.requires_grad() ? tokens.grad_buffer() : std::span<double>{};
        std::span<double> gp = local_protos.requires_grad() ? local_protos.grad_buffer() : std::span<double>{};
        // d(1 - cos)/dx = -(p / (|x||p|) - cos * x / |x|^2), symmetric in p.
        const double w = -g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t k = chosen[i];
          const double inv = 1.0 / (x_norm[i] * p_norm[k]);
          const double cos = chosen_cos[i];
          for (std::size_t f = 0; f < c; ++f) {
            const double x = xv[i * c + f];
            const double p = pv[k * c + f];
            if (!gx.empty()) gx[i * c + f] += w * (p * inv - cos * x / (x_norm[i] * x_norm[i]));
            if (!gp.empty()) gp[k * c + f] += w * (x * inv - cos * p / (p_norm[k] * p_norm[k]));
          }
        }
      });
}

double default_sinkhorn_epsilon(std::span<const double> cost) {
  double s = 0.0;
  for (double v : cost) s += v;
  const double mean_cost = cost.empty() ? 0.0 : s / static_cast<double>(cost.size());
  return std::max(0.05 * mean_cost, 1e-8);
}

OTPlan sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b, double epsilon,
                     int max_iter, double tol) {
  if (cost.rank() != 2) throw DimensionError("sinkhorn: cost must be a matrix");
  const std::size_t n = cost.rows();
  const std::size_t k = cost.cols();
  if (a.size() != n || b.size() != k) throw DimensionError("sinkhorn: marginal sizes do not match the cost matrix");
  if (!(epsilon > 0.0)) throw ArgumentError("sinkhorn: epsilon must be positive");
  if (max_iter < 1) throw ArgumentError("sinkhorn: max_iter must be at least 1");
  auto c = cost.data();
  for (double v : c) {
    if (!std::isfinite(v)) throw ArgumentError("sinkhorn: non-finite cost");
  }
  for (double w : a) {
    if (!(w > 0.0)) throw ArgumentError("sinkhorn: source weights must be positive");
  }
  for (double w : b) {
    if (!(w > 0.0)) throw ArgumentError("sinkhorn: target weights must be positive");
  }

  std::vector<double> f(n, 0.0);
  std::vector<double> g(k, 0.0);
  std::vector<double> scratch;
  OTPlan out;
  out.epsilon = epsilon;
  std::vector<double> plan(n * k);

  // Runs Sinkhorn sweeps at one regularization level until the marginals are
  // within `stop` or `cap` sweeps have run. Returns the sweeps used.
  auto solve = [&](double eps, double stop, int cap, std::vector<double>* trace) {
    int used = 0;
    for (int it = 1; it <= cap; ++it) {
      scratch.resize(k);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) scratch[j] = (g[j] - c[i * k + j]) / eps;
        f[i] = eps * (std::log(a[i]) - log_sum_exp(scratch));
      }
      scratch.resize(n);
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - c[i * k + j]) / eps;
        g[j] = eps * (std::log(b[j]) - log_sum_exp(scratch));
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) plan[i * k + j] = std::exp((f[i] + g[j] - c[i * k + j]) / eps);
      }
      double violation = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += plan[i * k + j];
        violation = std::max(violation, std::abs(s - a[i]));
      }
      for (std::size_t j = 0; j < k; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += plan[i * k + j];
        violation = std::max(violation, std::abs(s - b[j]));
      }
      if (trace) trace->push_back(violation);
      used = it;
      if (violation < stop) break;
    }
    return used;
  };

  // Epsilon scaling: halve from the cost spread down to `epsilon`, warm
  // starting the potentials. Small epsilon converges slowly from zero.
  const auto [lo, hi] = std::minmax_element(c.begin(), c.end());
  for (double eps = (*hi - *lo) / 2.0; eps > epsilon; eps /= 2.0) {
    out.warmup_iterations += solve(eps, std::max(tol, kWarmupTolerance), max_iter, nullptr);
  }
  out.iterations_used = solve(epsilon, tol, max_iter, &out.violation_trace);
  out.converged = out.violation_trace.back() < tol;
  for (double& v : plan) v = std::max(v, std::numeric_limits<double>::min());
  out.plan = Tensor::from({n, k}, std::move(plan));
  out.cost = cost.detach();
  return out;
}

GlobalAlignment global_alignment(const Tensor& tokens, const Tensor& global_protos, const SinkhornOptions& options) {
  require_same_width(tokens, global_protos, "global_alignment_loss");
  const std::size_t n = tokens.rows();
  const std::size_t k = global_protos.rows();
  Tensor cost = pairwise_sq_dist(tokens, global_protos);
  const double epsilon = options.epsilon.value_or(default_sinkhorn_epsilon(cost.data()));
  const std::vector<double> a(n, 1.0 / static_cast<double>(n));
  const std::vector<double> b(k, 1.0 / static_cast<double>(k));
  GlobalAlignment out;
  out.plan = sinkhorn_plan(cost, a, b, epsilon, options.max_iter, options.tol);
  double entropy = 0.0;
  double linear = 0.0;
  auto p = out.plan.plan.data();
  auto cv = cost.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    entropy += p[i] * std::log(p[i]);
    linear += p[i] * cv[i];
  }
  out.linear_term = linear;
  out.entropic_term = epsilon * entropy;
  out.loss = add_scalar(sum(mul(cost, out.plan.plan)), out.entropic_term);
  return out;
}

Tensor global_alignment_loss(const Tensor& tokens, const Tensor& global_protos, const SinkhornOptions& options) {
  return global_alignment(tokens, global_protos, options).loss;
}

std::vector<std::vector<double>> prototype_similarity_map(const Tensor& tokens, const Tensor& protos) {
  require_same_width(tokens, protos, "prototype_similarity_map");
  const auto x_norm = row_norms(tokens, "token");
  const auto p_norm = row_norms(protos, "prototype");
  const std::size_t n = tokens.rows();
  const std::size_t c = tokens.cols();
  auto xv = tokens.data();
  auto pv = protos.data();
  std::vector<std::vector<double>> maps(protos.rows(), std::vector<double>(n));
  for (std::size_t k = 0; k < protos.rows(); ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t f = 0; f < c; ++f) dot += xv[i * c + f] * pv[k * c + f];
      maps[k][i] = dot / (x_norm[i] * p_norm[k]);
    }
  }
  return maps;
}

}  // namespace dpdiff
