// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include "dpdiff/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

#include "dpdiff/errors.hpp"

namespace dpdiff {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMatrix>;
using Map = Eigen::Map<RowMatrix>;

std::atomic<std::uint64_t> next_id{1};
thread_local Tape* active_tape = nullptr;

MapC as_matrix(std::span<const double> values, std::size_t rows, std::size_t cols) {
  return MapC(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Map as_matrix(std::span<double> values, std::size_t rows, std::size_t cols) {
  return Map(values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
  }
}

bool is_scalar(const Tensor& t) { return t.numel() == 1 && t.rank() <= 1; }

enum class Broadcast { kEqual, kLeftScalar, kRightScalar };

Broadcast check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kEqual;
  if (is_scalar(b)) return Broadcast::kRightScalar;
  if (is_scalar(a)) return Broadcast::kLeftScalar;
  throw DimensionError(std::string(op) + ": unsupported broadcast between " + shape_str(a.shape()) +
                       " and " + shape_str(b.shape()));
}

// Shared elementwise binary driver. `fwd` computes the value, `da`/`db` the
// partial derivatives with respect to each operand.
template <typename Fwd, typename Da, typename Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, Da da, Db db) {
  const Broadcast mode = check_broadcast(a, b, op);
  const Shape& out_shape = mode == Broadcast::kLeftScalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto av = a.data();
  auto bv = b.data();
  auto ai = [&](std::size_t i) { return mode == Broadcast::kLeftScalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return mode == Broadcast::kRightScalar ? bv[0] : bv[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ai(i), bi(i));
  return make_result(out_shape, std::move(out), {a, b},
                     [a, b, mode, n, da, db](std::span<const double> g, std::span<const double>) mutable {
                       auto av = a.data();
                       auto bv = b.data();
                       const bool a_scalar = mode == Broadcast::kLeftScalar;
                       const bool b_scalar = mode == Broadcast::kRightScalar;
                       if (a.requires_grad()) {
                         auto ga = a.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = a_scalar ? av[0] : av[i];
                           const double y = b_scalar ? bv[0] : bv[i];
                           ga[a_scalar ? 0 : i] += g[i] * da(x, y);
                         }
                       }
                       if (b.requires_grad()) {
                         auto gb = b.grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = a_scalar ? av[0] : av[i];
                           const double y = b_scalar ? bv[0] : bv[i];
                           gb[b_scalar ? 0 : i] += g[i] * db(x, y);
                         }
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const std::size_t n = a.numel();
  auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [a, n, deriv](std::span<const double> g, std::span<const double>) mutable {
    auto av = a.data();
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * deriv(av[i]);
  });
}

void require_row(const Tensor& x, const Tensor& row, const char* op) {
  require_matrix(x, op);
  if (row.numel() != x.cols()) {
    throw DimensionError(std::string(op) + ": row of shape " + shape_str(row.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

// Tensor -------------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->id = next_id.fetch_add(1, std::memory_order_relaxed);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return make_tensor(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make_tensor({1}, {value}, requires_grad); }

std::size_t Tensor::rows() const { return rank() == 0 ? 1 : node_->shape.front(); }

std::size_t Tensor::cols() const {
  std::size_t n = 1;
  for (std::size_t i = 1; i < node_->shape.size(); ++i) n *= node_->shape[i];
  return n;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on a tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on && node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t = make_tensor(node_->shape, node_->data, node_->requires_grad);
  if (!node_->grad.empty()) t.node_->grad = node_->grad;
  return t;
}

Tensor Tensor::detach() const { return make_tensor(node_->shape, node_->data, false); }

// Tape ---------------------------------------------------------------------

Tape::Scope::Scope(Tape& tape) : previous_(active_tape) { active_tape = &tape; }
Tape::Scope::~Scope() { active_tape = previous_; }

Tape* Tape::active() { return active_tape; }

bool Tape::recording() { return active_tape != nullptr && !active_tape->frozen(); }

void Tape::record(Tensor output, BackwardFn fn) { nodes_.push_back({std::move(output), std::move(fn)}); }

void Tape::backward(const Tensor& loss) {
  if (frozen_) throw ContractError("backward on a frozen tape");
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) {
    clear();
    return;
  }
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn();
  }
  clear();
}

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(std::span<const double> out_grad, std::span<const double> out_value)> backward) {
  bool needs_grad = false;
  if (Tape::recording()) {
    for (const Tensor& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  Tensor out = make_tensor(std::move(shape), std::move(values), false);
  if (needs_grad) {
    out.node_->requires_grad = true;
    Tensor handle = out;
    // The closure must not own `out` (the tape node does); it reads the
    // gradient through the tape-owned handle passed at call time.
    Tape::active()->record(out, [handle, backward = std::move(backward)]() mutable {
      backward(handle.grad(), handle.data());
    });
  }
  return out;
}

// Linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g, std::span<const double>) mutable {
    auto G = as_matrix(g, m, n);
    if (a.requires_grad()) as_matrix(a.grad_buffer(), m, k).noalias() += G * as_matrix(b.data(), k, n).transpose();
    if (b.requires_grad()) as_matrix(b.grad_buffer(), k, n).noalias() += as_matrix(a.data(), m, k).transpose() * G;
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  std::vector<double> out(m * n);
  as_matrix(std::span<double>(out), n, m) = as_matrix(a.data(), m, n).transpose();
  return make_result({n, m}, std::move(out), {a}, [a, m, n](std::span<const double> g, std::span<const double>) mutable {
    as_matrix(a.grad_buffer(), m, n) += as_matrix(g, n, m).transpose();
  });
}

// Elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(
      a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(
      a, [c](double x) { return c * x; }, [c](double) { return c; });
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Tensor gelu(const Tensor& a) {
  return unary(a, gelu_value, [](double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * kInvSqrt2);
    return cdf + x * pdf;
  });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_row(x, row, "add_row");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  auto rv = row.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  }
  return make_result(x.shape(), std::move(out), {x, row}, [x, row, r, c](std::span<const double> g, std::span<const double>) mutable {
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r * c; ++i) gx[i] += g[i];
    }
    if (row.requires_grad()) {
      auto gr = row.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
      }
    }
  });
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
  require_row(x, row, "mul_row");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  std::vector<double> out(r * c);
  auto xv = x.data();
  auto rv = row.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * rv[j];
  }
  return make_result(x.shape(), std::move(out), {x, row}, [x, row, r, c](std::span<const double> g, std::span<const double>) mutable {
    auto xv = x.data();
    auto rv = row.data();
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * rv[j];
      }
    }
    if (row.requires_grad()) {
      auto gr = row.grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j] * xv[i * c + j];
      }
    }
  });
}

// Reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  const std::size_t n = a.numel();
  return make_result({1}, {total}, {a}, [a, n](std::span<const double> g, std::span<const double>) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse(const Tensor& prediction, const Tensor& target) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("mse: shapes differ, " + shape_str(prediction.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  return mean(square(sub(prediction, target)));
}

// Structure ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  const std::size_t n = a.numel();
  return make_result(std::move(shape), std::move(out), {a}, [a, n](std::span<const double> g, std::span<const double>) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  if (count == 0 || begin + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(a.shape()));
  }
  std::vector<double> out(r * count);
  auto av = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(i * c + begin), count,
                out.begin() + static_cast<std::ptrdiff_t>(i * count));
  }
  return make_result({r, count}, std::move(out), {a}, [a, r, c, begin, count](std::span<const double> g, std::span<const double>) mutable {
    auto ga = a.grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < count; ++j) ga[i * c + begin + j] += g[i * count + j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != r) throw DimensionError("concat_cols: row counts differ");
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.cols();
    auto pv = p.data();
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(i * c), c,
                  out.begin() + static_cast<std::ptrdiff_t>(i * total + offset));
    }
    offset += c;
  }
  bool needs_grad = false;
  if (Tape::recording()) {
    for (const Tensor& p : parts) needs_grad = needs_grad || p.requires_grad();
  }
  Tensor result = make_tensor({r, total}, std::move(out), false);
  result.node_->requires_grad = needs_grad;
  if (needs_grad) {
    Tensor handle = result;
    Tape::active()->record(result, [handle, parts, r, total]() mutable {
      auto g = handle.grad();
      std::size_t offset = 0;
      for (Tensor p : parts) {
        const std::size_t c = p.cols();
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offset + j];
          }
        }
        offset += c;
      }
    });
  }
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total_rows = 0;
  for (const Tensor& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != c) throw DimensionError("concat_rows: column counts differ");
    total_rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(total_rows * c);
  for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  bool needs_grad = false;
  if (Tape::recording()) {
    for (const Tensor& p : parts) needs_grad = needs_grad || p.requires_grad();
  }
  Tensor result = make_tensor({total_rows, c}, std::move(out), false);
  result.node_->requires_grad = needs_grad;
  if (needs_grad) {
    Tensor handle = result;
    Tape::active()->record(result, [handle, parts]() mutable {
      auto g = handle.grad();
      std::size_t offset = 0;
      for (Tensor p : parts) {
        const std::size_t n = p.numel();
        if (p.requires_grad()) {
          auto gp = p.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
        }
        offset += n;
      }
    });
  }
  return result;
}

// Neural-network primitives ------------------------------------------------

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require_matrix(q, "multi_head_attention");
  require_matrix(k, "multi_head_attention");
  require_matrix(v, "multi_head_attention");
  const std::size_t nq = q.rows();
  const std::size_t nk = k.rows();
  const std::size_t dim = q.cols();
  if (k.cols() != dim || v.cols() != dim || v.rows() != nk) {
    throw DimensionError("multi_head_attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                         shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  if (heads == 0 || dim % heads != 0) {
    throw DimensionError("multi_head_attention: width " + std::to_string(dim) + " is not divisible by " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t d = dim / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  auto Q = as_matrix(q.data(), nq, dim);
  auto K = as_matrix(k.data(), nk, dim);
  auto V = as_matrix(v.data(), nk, dim);
  std::vector<double> out(nq * dim);
  auto O = as_matrix(std::span<double>(out), nq, dim);
  // Attention weights for every head, kept for the backward pass. Every entry
  // is written below, so the buffer is left uninitialized.
  std::shared_ptr<double[]> probs(new double[heads * nq * nk]);
  Eigen::Array<double, 1, Eigen::Dynamic> scratch(static_cast<Eigen::Index>(nk));
  for (std::size_t h = 0; h < heads; ++h) {
    auto P = as_matrix(std::span<double>(probs.get() + h * nq * nk, nq * nk), nq, nk);
    const auto col = static_cast<Eigen::Index>(h * d);
    const auto width = static_cast<Eigen::Index>(d);
    P.noalias() = s * (Q.middleCols(col, width) * K.middleCols(col, width).transpose());
    for (std::size_t i = 0; i < nq; ++i) {
      auto row = P.row(static_cast<Eigen::Index>(i));
      const double peak = row.maxCoeff();
      // Eigen splits unaligned buffers into scalar and packet parts depending
      // on the address; an aligned scratch row keeps the split, and so every
      // bit of the result, fixed by the length alone.
      scratch = row.array() - peak;
      scratch = scratch.exp();
      double total = 0.0;
      for (Eigen::Index j = 0; j < scratch.size(); ++j) total += scratch(j);
      row = (scratch / total).matrix();
    }
    O.middleCols(col, width).noalias() = P * V.middleCols(col, width);
  }
  return make_result(
      {nq, dim}, std::move(out), {q, k, v},
      [q, k, v, nq, nk, dim, d, heads, s, probs = std::move(probs)](std::span<const double> g,
                                                                     std::span<const double>) mutable {
        auto G = as_matrix(g, nq, dim);
        auto Q = as_matrix(q.data(), nq, dim);
        auto K = as_matrix(k.data(), nk, dim);
        auto V = as_matrix(v.data(), nk, dim);
        RowMatrix dP(nq, nk);
        for (std::size_t h = 0; h < heads; ++h) {
          auto P = as_matrix(std::span<const double>(probs.get() + h * nq * nk, nq * nk), nq, nk);
          const auto col = static_cast<Eigen::Index>(h * d);
          const auto width = static_cast<Eigen::Index>(d);
          if (v.requires_grad()) {
            as_matrix(v.grad_buffer(), nk, dim).middleCols(col, width).noalias() +=
                P.transpose() * G.middleCols(col, width);
          }
          if (!q.requires_grad() && !k.requires_grad()) continue;
          dP.noalias() = G.middleCols(col, width) * V.middleCols(col, width).transpose();
          // Softmax adjoint, row by row: dS = P * (dP - <dP, P>).
          for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(nq); ++i) {
            double inner = 0.0;
            for (Eigen::Index j = 0; j < dP.cols(); ++j) inner += dP(i, j) * P(i, j);
            dP.row(i) = (P.row(i).array() * (dP.row(i).array() - inner)).matrix() * s;
          }
          if (q.requires_grad()) {
            as_matrix(q.grad_buffer(), nq, dim).middleCols(col, width).noalias() += dP * K.middleCols(col, width);
          }
          if (k.requires_grad()) {
            as_matrix(k.grad_buffer(), nk, dim).middleCols(col, width).noalias() +=
                dP.transpose() * Q.middleCols(col, width);
          }
        }
      });
}

Tensor softmax(const Tensor& x, int axis) {
  require_matrix(x, "softmax");
  if (axis != 0 && axis != 1) throw ArgumentError("softmax: axis must be 0 or 1");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  // Lines run along `axis`; `stride` steps within a line, `step` between lines.
  const std::size_t lines = axis == 1 ? r : c;
  const std::size_t len = axis == 1 ? c : r;
  const std::size_t stride = axis == 1 ? 1 : c;
  const std::size_t step = axis == 1 ? c : 1;
  auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * step;
    double peak = xv[base];
    for (std::size_t j = 1; j < len; ++j) peak = std::max(peak, xv[base + j * stride]);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(xv[base + j * stride] - peak);
      out[base + j * stride] = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < len; ++j) out[base + j * stride] *= inv;
  }
  return make_result(x.shape(), std::move(out), {x},
                     [x, lines, len, stride, step](std::span<const double> g, std::span<const double> y) mutable {
                       auto gx = x.grad_buffer();
                       for (std::size_t l = 0; l < lines; ++l) {
                         const std::size_t base = l * step;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < len; ++j) dot += g[base + j * stride] * y[base + j * stride];
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t idx = base + j * stride;
                           gx[idx] += y[idx] * (g[idx] - dot);
                         }
                       }
                     });
}

namespace {

// Normalized rows plus the per-row inverse standard deviations.
std::pair<std::vector<double>, std::vector<double>> normalize_rows(std::span<const double> xv, std::size_t r,
                                                                   std::size_t c, double eps) {
  std::vector<double> xhat(r * c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) xhat[i * c + j] = (row[j] - mu) * inv_std[i];
  }
  return {std::move(xhat), std::move(inv_std)};
}

// d(loss)/dx for xhat = (x - mean) * inv_std given d(loss)/d(xhat).
void normalize_rows_backward(std::span<const double> gxhat, std::span<const double> xhat,
                             std::span<const double> inv_std, std::size_t r, std::size_t c, std::span<double> gx) {
  const double inv_c = 1.0 / static_cast<double>(c);
  for (std::size_t i = 0; i < r; ++i) {
    double mean_g = 0.0;
    double mean_gx = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mean_g += gxhat[i * c + j];
      mean_gx += gxhat[i * c + j] * xhat[i * c + j];
    }
    mean_g *= inv_c;
    mean_gx *= inv_c;
    for (std::size_t j = 0; j < c; ++j) {
      gx[i * c + j] += inv_std[i] * (gxhat[i * c + j] - mean_g - xhat[i * c + j] * mean_gx);
    }
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, double eps) {
  require_matrix(x, "layer_norm");
  if (eps <= 0.0) throw ArgumentError("layer_norm: eps must be positive");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  auto [xhat, inv_std] = normalize_rows(x.data(), r, c, eps);
  return make_result(x.shape(), xhat, {x},
                     [x, r, c, inv_std = std::move(inv_std)](std::span<const double> g,
                                                             std::span<const double> y) mutable {
                       normalize_rows_backward(g, y, inv_std, r, c, x.grad_buffer());
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_row(x, gain, "layer_norm");
  require_row(x, bias, "layer_norm");
  if (eps <= 0.0) throw ArgumentError("layer_norm: eps must be positive");
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  auto [xhat, inv_std] = normalize_rows(x.data(), r, c, eps);
  std::vector<double> out(r * c);
  auto gv = gain.data();
  auto bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const double> g, std::span<const double>) mutable {
                       auto gv = gain.data();
                       if (gain.requires_grad() || bias.requires_grad()) {
                         std::vector<double> gg(c, 0.0);
                         std::vector<double> gb(c, 0.0);
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) {
                             gg[j] += g[i * c + j] * xhat[i * c + j];
                             gb[j] += g[i * c + j];
                           }
                         }
                         if (gain.requires_grad()) {
                           auto buf = gain.grad_buffer();
                           for (std::size_t j = 0; j < c; ++j) buf[j] += gg[j];
                         }
                         if (bias.requires_grad()) {
                           auto buf = bias.grad_buffer();
                           for (std::size_t j = 0; j < c; ++j) buf[j] += gb[j];
                         }
                       }
                       if (x.requires_grad()) {
                         std::vector<double> gxhat(r * c);
                         for (std::size_t i = 0; i < r; ++i) {
                           for (std::size_t j = 0; j < c; ++j) gxhat[i * c + j] = g[i * c + j] * gv[j];
                         }
                         normalize_rows_backward(gxhat, xhat, inv_std, r, c, x.grad_buffer());
                       }
                     });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_matrix(a, "pairwise_sq_dist");
  require_matrix(b, "pairwise_sq_dist");
  if (a.cols() != b.cols()) {
    throw DimensionError("pairwise_sq_dist: feature widths differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.rows();
  const std::size_t k = b.rows();
  const std::size_t c = a.cols();
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0.0;
      for (std::size_t f = 0; f < c; ++f) {
        const double diff = av[i * c + f] - bv[j * c + f];
        d += diff * diff;
      }
      out[i * k + j] = d;
    }
  }
  return make_result({n, k}, std::move(out), {a, b}, [a, b, n, k, c](std::span<const double> g,
                                                                      std::span<const double>) mutable {
    auto av = a.data();
    auto bv = b.data();
    std::span<double> ga = a.requires_grad() ? a.grad_buffer() : std::span<double>{};
    std::span<double> gb = b.requires_grad() ? b.grad_buffer() : std::span<double>{};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double w = 2.0 * g[i * k + j];
        if (w == 0.0) continue;
        for (std::size_t f = 0; f < c; ++f) {
          const double diff = av[i * c + f] - bv[j * c + f];
          if (!ga.empty()) ga[i * c + f] += w * diff;
          if (!gb.empty()) gb[j * c + f] -= w * diff;
        }
      }
    }
  });
}

}  // namespace dpdiff
