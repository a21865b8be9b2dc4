// Copyright 2026 The dpdiff Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dpdiff/errors.hpp"
#include "dpdiff/grad_check.hpp"
#include "dpdiff/nn.hpp"
#include "dpdiff/optim.hpp"
#include "dpdiff/rng.hpp"
#include "dpdiff/tensor.hpp"

namespace dpdiff {
namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor::from(std::move(shape), std::move(v));
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto out = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, SelectorRow) {
  auto out = matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {2, 5}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 2.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3] x [2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto b = random_tensor({4, 2}, rng);
  auto a = random_tensor({3, 4}, rng);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(square(matmul(x, b))); }, a), 1e-6);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(square(matmul(a, x))); }, b), 1e-6);
}

TEST(Elementwise, AddZeroScalarIsIdentity) {
  Rng rng(1);
  auto x = random_tensor({3, 3}, rng);
  auto y = add(x, Tensor::scalar(0.0));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Elementwise, MulSelfGradientIsTwiceInput) {
  Rng rng(2);
  auto x = random_tensor({2, 3}, rng);
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.data()[i]);
  EXPECT_LT(grad_check([](const Tensor& v) { return sum(mul(v, v)); }, x), 1e-8);
}

TEST(Elementwise, GeluAtZeroIsZero) { EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0); }

TEST(Elementwise, UnsupportedBroadcastThrows) {
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(mul(Tensor::zeros({2, 3}), Tensor::zeros({3})), DimensionError);
}

TEST(Softmax, UniformOnEqualLogits) {
  auto y = softmax(Tensor::from({1, 3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariant) {
  auto a = softmax(Tensor::from({1, 3}, {0.5, 1.5, 2.5}));
  auto b = softmax(Tensor::from({1, 3}, {100.5, 101.5, 102.5}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-14);
}

TEST(Softmax, MatchesExpNormalize) {
  auto y = softmax(Tensor::from({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.data()[i], std::exp(i + 1.0) / z, 1e-12);
}

TEST(Softmax, RowsSumToOneAndStayInOpenInterval) {
  Rng rng(3);
  for (int axis : {0, 1}) {
    auto y = softmax(random_tensor({5, 7}, rng, 4.0), axis);
    const std::size_t outer = axis == 1 ? 5 : 7;
    const std::size_t inner = axis == 1 ? 7 : 5;
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        const double v = axis == 1 ? y.at(o, i) : y.at(i, o);
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, SumOfSoftmaxHasNearZeroGradient) {
  Rng rng(4);
  auto x = random_tensor({1, 5}, rng);
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(softmax(x)));
  }
  for (double g : x.grad()) EXPECT_LT(std::abs(g), 1e-15);
}

TEST(LayerNorm, ConstantRowNormalizesToZero) {
  auto y = layer_norm(Tensor::full({2, 4}, 3.0), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, RowMeanEqualsBiasMeanWithUnitGain) {
  Rng rng(5);
  auto bias = random_tensor({6}, rng);
  auto y = layer_norm(random_tensor({3, 6}, rng), Tensor::full({6}, 1.0), bias, 1e-6);
  const double bias_mean = std::accumulate(bias.data().begin(), bias.data().end(), 0.0) / 6.0;
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at(r, c);
    EXPECT_LE(std::abs(m / 6.0 - bias_mean), 1e-8);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  auto gain = random_tensor({5}, rng);
  auto bias = random_tensor({5}, rng);
  auto x = random_tensor({3, 5}, rng);
  auto w = random_tensor({3, 5}, rng);
  EXPECT_LT(grad_check([&](const Tensor& v) { return sum(mul(layer_norm(v, gain, bias, 1e-6), w)); }, x), 1e-5);
  EXPECT_LT(grad_check([&](const Tensor& g) { return sum(mul(layer_norm(x, g, bias, 1e-6), w)); }, gain), 1e-5);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from({2, 2}, {1, -2, 3, 4}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  auto x = Tensor::from({3}, {0.5, -1.5, 2.0}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(scale(sum(square(x)), 0.5));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.data()[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  EXPECT_THROW(tape.backward(square(x)), ContractError);
}

TEST(Backward, FrozenTapeRejectsBackward) {
  auto x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tape::Scope scope(tape);
  auto loss = sum(x);
  tape.freeze();
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Backward, UnreachableLeafKeepsZeroGradient) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto unused = Tensor::from({2}, {3, 4}, true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, SharedSubexpressionsAccumulate) {
  Rng rng(8);
  auto x0 = random_tensor({2, 3}, rng);
  auto f = [](const Tensor& x) { return sum(gelu(x)); };
  auto g = [](const Tensor& x) { return sum(mul(x, square(x))); };
  auto grad_of = [&](auto fn) {
    auto x = x0.clone();
    x.set_requires_grad(true);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(fn(x));
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  auto both = grad_of([&](const Tensor& x) { return add(f(x), g(x)); });
  auto gf = grad_of(f);
  auto gg = grad_of(g);
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], gf[i] + gg[i], 1e-12);
}

TEST(Backward, AttentionBlockGradient) {
  Rng rng(9);
  auto mha = nn::MultiHeadAttention::create(8, 2, rng);
  auto kv = random_tensor({5, 8}, rng);
  auto q = random_tensor({3, 8}, rng);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(square(mha(x, kv))); }, q), 1e-4);
  EXPECT_LT(grad_check([&](const Tensor& x) { return sum(square(mha(q, x))); }, kv), 1e-4);
}

TEST(Forward, RepeatedPassIsBitIdentical) {
  auto run = [] {
    Rng rng(10);
    auto mha = nn::MultiHeadAttention::create(8, 4, rng);
    auto x = random_tensor({6, 8}, rng);
    auto y = mha(x, x);
    return std::vector<double>(y.data().begin(), y.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = Tensor::from({1}, {1.0}, true);
  ParameterList params{{"p", p}};
  p.grad_buffer()[0] = 0.7;
  Adam adam(AdamOptions{.lr = 0.01});
  adam.step(params);
  EXPECT_NEAR(p.data()[0], 1.0 - 0.01, 1e-9);
  EXPECT_EQ(adam.step_count(), 1);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  auto p = Tensor::from({2}, {1.0, -2.0}, true);
  ParameterList params{{"p", p}};
  Adam adam;
  adam.step(params);
  EXPECT_EQ(p.data()[0], 1.0);
  EXPECT_EQ(p.data()[1], -2.0);
}

TEST(Adam, ConvergesOnQuadratic) {
  auto p = Tensor::from({1}, {0.0}, true);
  ParameterList params{{"p", p}};
  Adam adam(AdamOptions{.lr = 0.1});
  for (int i = 0; i < 100; ++i) {
    zero_grad(params);
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(sum(square(add_scalar(p, -3.0))));
    adam.step(params);
  }
  EXPECT_LT(std::abs(p.data()[0] - 3.0), 0.05);
}

TEST(Adam, NanGradientNamesParameter) {
  auto p = Tensor::from({1}, {0.0}, true);
  ParameterList params{{"denoiser.head.weight", p}};
  p.grad_buffer()[0] = std::nan("");
  Adam adam;
  try {
    adam.step(params);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("denoiser.head.weight"), std::string::npos);
  }
}

TEST(GradCheck, LinearFunctionIsExact) {
  auto x = Tensor::from({2, 3}, {1, -2, 3, 4, -5, 6});
  EXPECT_EQ(grad_check([](const Tensor& v) { return sum(v); }, x, 0x1.0p-10), 0.0);
}

TEST(GradCheck, StepOutsideRangeRejected) {
  auto x = Tensor::from({1}, {1.0});
  auto f = [](const Tensor& v) { return sum(v); };
  EXPECT_THROW(grad_check(f, x, 1e-8), ArgumentError);
  EXPECT_THROW(grad_check(f, x, 1e-2), ArgumentError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42);
  Rng b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = a.derive(3);
  Rng d = b.derive(3);
  EXPECT_EQ(c.normal(), d.normal());
}

TEST(Rng, NormalMoments) {
  Rng rng(11);
  double s = 0.0;
  double s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

}  // namespace
}  // namespace dpdiff
