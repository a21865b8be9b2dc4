// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "dpdiff/errors.hpp"

namespace dpdiff {

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (h < 1e-7 || h > 1e-3) throw ArgumentError("grad_check: step must lie in [1e-7, 1e-3]");
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = f(x);
    tape.backward(loss);
  }
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());
  x.zero_grad();
  x.set_requires_grad(had_grad);

  auto values = x.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + h;
    const double plus = f(x).item();
    values[i] = saved - h;
    const double minus = f(x).item();
    values[i] = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace dpdiff
