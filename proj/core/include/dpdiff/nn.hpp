// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>

#include "dpdiff/optim.hpp"
#include "dpdiff/rng.hpp"
#include "dpdiff/tensor.hpp"

namespace dpdiff::nn {

/// Gaussian-initialized parameter tensor.
Tensor normal_param(Shape shape, double stddev, Rng& rng);

/// y = x W (+ b). W is [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias

  static Linear create(std::size_t in, std::size_t out, bool with_bias, Rng& rng);
  static Linear zeros(std::size_t in, std::size_t out, bool with_bias);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

/// Multi-head attention with bias-free projections:
/// out = concat_h softmax(Q_h K_h^T / sqrt(d)) V_h, then W_o.
struct MultiHeadAttention {
  Linear q;
  Linear k;
  Linear v;
  Linear o;
  std::size_t heads = 1;

  static MultiHeadAttention create(std::size_t dim, std::size_t heads, Rng& rng);

  Tensor operator()(const Tensor& queries, const Tensor& keys_values) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

/// Two-layer GELU MLP with biases.
struct FeedForward {
  Linear up;
  Linear down;

  static FeedForward create(std::size_t dim, std::size_t hidden, Rng& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;
};

/// Scaled dot-product attention for one head; exposed for tests.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace dpdiff::nn
