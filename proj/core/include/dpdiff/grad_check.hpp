// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "dpdiff/tensor.hpp"

namespace dpdiff {

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` must map `x` to a scalar tensor using only library ops. Returns the
/// maximum over coordinates of |ad - fd| / max(|ad|, |fd|, 1e-12). `x`'s data
/// is restored before returning.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = 1e-5);

}  // namespace dpdiff
