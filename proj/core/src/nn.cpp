// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/nn.hpp"

#include <cmath>
#include <vector>

#include "dpdiff/errors.hpp"

namespace dpdiff::nn {

Tensor normal_param(Shape shape, double stddev, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (double& v : values) v = rng.normal(0.0, stddev);
  return Tensor::from(std::move(shape), std::move(values), true);
}

Linear Linear::create(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  Linear layer;
  layer.weight = normal_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) layer.bias = Tensor::zeros({out}, true);
  return layer;
}

Linear Linear::zeros(std::size_t in, std::size_t out, bool with_bias) {
  Linear layer;
  layer.weight = Tensor::zeros({in, out}, true);
  if (with_bias) layer.bias = Tensor::zeros({out}, true);
  return layer;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_row(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v) { return multi_head_attention(q, k, v, 1); }

MultiHeadAttention MultiHeadAttention::create(std::size_t dim, std::size_t heads, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  MultiHeadAttention mha;
  mha.q = Linear::create(dim, dim, false, rng);
  mha.k = Linear::create(dim, dim, false, rng);
  mha.v = Linear::create(dim, dim, false, rng);
  mha.o = Linear::create(dim, dim, false, rng);
  mha.heads = heads;
  return mha;
}

Tensor MultiHeadAttention::operator()(const Tensor& queries, const Tensor& keys_values) const {
  const std::size_t dim = q.weight.cols();
  if (queries.cols() != q.weight.rows() || keys_values.cols() != k.weight.rows()) {
    throw DimensionError("attention: input widths " + shape_str(queries.shape()) + " / " +
                         shape_str(keys_values.shape()) + " do not match projection width " + std::to_string(dim));
  }
  const Tensor qp = q(queries);
  const Tensor kp = k(keys_values);
  const Tensor vp = v(keys_values);
  return o(multi_head_attention(qp, kp, vp, heads));
}

void MultiHeadAttention::collect(const std::string& prefix, ParameterList& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

FeedForward FeedForward::create(std::size_t dim, std::size_t hidden, Rng& rng) {
  return {Linear::create(dim, hidden, true, rng), Linear::create(hidden, dim, true, rng)};
}

Tensor FeedForward::operator()(const Tensor& x) const { return down(gelu(up(x))); }

void FeedForward::collect(const std::string& prefix, ParameterList& out) const {
  up.collect(prefix + ".up", out);
  down.collect(prefix + ".down", out);
}

}  // namespace dpdiff::nn
