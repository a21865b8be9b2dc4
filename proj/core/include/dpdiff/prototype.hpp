// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpdiff/nn.hpp"
#include "dpdiff/optim.hpp"
#include "dpdiff/rng.hpp"
#include "dpdiff/tensor.hpp"

namespace dpdiff {

/// Learnable queries that cross-attend over feature tokens to produce a set
/// of prototypes:  T' = Attn(T, x, x) + T,  P = FFN(T') + T'.
///
/// The local and global banks are two independent instances of this type.
struct PrototypeExtractor {
  Tensor queries;  // [count x C]
  nn::MultiHeadAttention attn;
  nn::FeedForward ffn;

  /// ffn_hidden 0 means 4 * dim.
  static PrototypeExtractor create(std::size_t count, std::size_t dim, std::size_t heads, std::size_t ffn_hidden,
                                   Rng& rng);

  std::size_t count() const { return queries.rows(); }
  std::size_t dim() const { return queries.cols(); }

  Tensor operator()(const Tensor& tokens) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

Tensor extract_prototypes(const PrototypeExtractor& extractor, const Tensor& tokens);

/// Mean over tokens of min_m (1 - cos(x_i, p_m)). The min is hard; ties go to
/// the lowest prototype index and only the selected pair receives gradient.
Tensor local_alignment_loss(const Tensor& tokens, const Tensor& local_protos);

/// Entropic optimal-transport plan between two discrete measures.
struct OTPlan {
  Tensor plan;  // [N x K], strictly positive
  Tensor cost;  // [N x K]
  double epsilon = 0.0;
  /// Sweeps at the target epsilon.
  int iterations_used = 0;
  /// Sweeps spent at the larger warm-up epsilons.
  int warmup_iterations = 0;
  bool converged = false;
  /// Max marginal violation after each sweep at the target epsilon.
  std::vector<double> violation_trace;
};

struct SinkhornOptions {
  std::optional<double> epsilon;  // defaults to 0.05 * mean(cost)
  int max_iter = 200;
  double tol = 1e-6;
};

/// Cost-relative default regularization: 0.05 * mean(cost), floored at 1e-8.
double default_sinkhorn_epsilon(std::span<const double> cost);

/// Log-domain Sinkhorn with epsilon scaling: potentials are warm-started at
/// halving regularization levels from the cost spread down to `epsilon`.
/// Stops once both marginals are within `tol` or after `max_iter` sweeps at
/// the target level (each warm-up level is capped at `max_iter` as well).
OTPlan sinkhorn_plan(const Tensor& cost, std::span<const double> a, std::span<const double> b, double epsilon,
                     int max_iter = 200, double tol = 1e-6);

struct GlobalAlignment {
  Tensor loss;  // differentiable through the cost only
  OTPlan plan;
  double linear_term = 0.0;
  double entropic_term = 0.0;
};

/// <plan, C> + eps * sum plan log plan with C_ik = |x_i - p_k|^2 and uniform
/// marginals. The plan is held constant when differentiating.
GlobalAlignment global_alignment(const Tensor& tokens, const Tensor& global_protos, const SinkhornOptions& options = {});

Tensor global_alignment_loss(const Tensor& tokens, const Tensor& global_protos, const SinkhornOptions& options = {});

/// Cosine similarity of every token to every prototype: result[p][i]. No gradient.
std::vector<std::vector<double>> prototype_similarity_map(const Tensor& tokens, const Tensor& protos);

}  // namespace dpdiff
