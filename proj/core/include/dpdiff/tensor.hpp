// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dpdiff {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is needed
  bool requires_grad = false;
  std::uint64_t id = 0;
};
}  // namespace detail

/// Dense row-major float64 array with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage. Use clone() for a deep copy and
/// detach() for a copy that is cut off from the gradient graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  /// First dimension; 1 for scalars.
  std::size_t rows() const;
  /// Product of the trailing dimensions; the row width for matrix ops.
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient values; zeros when nothing has flowed in yet.
  std::span<const double> grad() const;
  /// Writable gradient, allocated (zero-filled) on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  std::uint64_t tape_id() const { return node_->id; }

  Tensor clone() const;
  Tensor detach() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Tape;
  friend Tensor make_tensor(Shape, std::vector<double>, bool);
  friend Tensor make_result(Shape, std::vector<double>, std::initializer_list<Tensor>,
                            std::function<void(std::span<const double>, std::span<const double>)>);
  friend Tensor concat_cols(const std::vector<Tensor>&);
  friend Tensor concat_rows(const std::vector<Tensor>&);
};

Tensor make_tensor(Shape shape, std::vector<double> values, bool requires_grad);
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(std::span<const double> out_grad, std::span<const double> out_value)> backward);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

/// Records differentiable operations for one training context.
///
/// Ops record onto the tape installed by a Tape::Scope on the calling thread,
/// and only when at least one input requires a gradient. With no active tape
/// (or a frozen one) ops run forward-only, which is how frozen models are
/// evaluated concurrently.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Installs a tape as the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active();
  /// True when an op run now would be recorded.
  static bool recording();

  void record(Tensor output, BackwardFn fn);

  /// Propagates d(loss)/d(.) to every recorded node, then clears the tape.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }
  bool frozen() const { return frozen_; }

 private:
  struct Node {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Node> nodes_;
  bool frozen_ = false;
};

/// Builds an op result. When recording and any input requires a gradient the
/// result requires one too, and `backward` is recorded to run with the
/// result's gradient once it is known.
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   std::function<void(std::span<const double> out_grad, std::span<const double> out_value)> backward);

// Linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise (equal shapes, or one side a scalar tensor) -----------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor gelu(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);

// Row broadcasting ([R x C] with [C]) is explicit, never implicit.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor mul_row(const Tensor& x, const Tensor& row);

// Reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& prediction, const Tensor& target);

// Structure ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Neural-network primitives -----------------------------------------------

/// Softmax of a matrix along `axis` (0 = down columns, 1 = along rows).
Tensor softmax(const Tensor& x, int axis = 1);

/// Row-wise layer normalization with affine gain/bias of length C.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);

/// Row-wise layer normalization without the affine part.
Tensor layer_norm(const Tensor& x, double eps = 1e-6);

/// Scaled dot-product attention over `heads` equal column groups, as one op.
/// q is [Nq x D]; k and v are [Nk x D]; D must be divisible by heads.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

/// Squared Euclidean distances between rows: out[i][k] = |a_i - b_k|^2.
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

double gelu_value(double x);

}  // namespace dpdiff
