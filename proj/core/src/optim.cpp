// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/optim.hpp"

#include <cmath>

#include "dpdiff/errors.hpp"

namespace dpdiff {

void zero_grad(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

void Adam::step(ParameterList& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].tensor.numel(), 0.0);
      v_[i].assign(params[i].tensor.numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double correction1 = 1.0 - std::pow(options_.beta1, t);
  const double correction2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& tensor = params[i].tensor;
    if (m_[i].size() != tensor.numel()) {
      throw ContractError("Adam: shape of '" + params[i].name + "' changed between steps");
    }
    auto data = tensor.mutable_data();
    auto grad = tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * grad[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * grad[j] * grad[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      data[j] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

}  // namespace dpdiff
