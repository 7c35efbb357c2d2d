#include <gtest/gtest.h>

#include "satdm/nn.hpp"
#include "satdm/rng.hpp"
#include "satdm/tensor.hpp"
#include "testutil.hpp"

using namespace satdm;

TEST(Tensor, ShapeAndDataAgree) {
  auto t = Tensor<double>::zeros({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor<double>::from({1.0, 2.0}, {3}), DimensionError);
}

TEST(Tensor, SumBackwardIsOnes) {
  auto x = Tensor<double>::from({1.0, 2.0, 3.0}, {3});
  x.set_requires_grad(true);
  auto loss = sum(x);
  backward(loss);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 1.0);
}

TEST(Tensor, SumOfSquaresBackward) {
  auto x = Tensor<double>::from({1.0, -2.0}, {2});
  x.set_requires_grad(true);
  auto loss = sum(square(x));
  backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
}

TEST(Tensor, BackwardRequiresScalar) {
  auto x = Tensor<double>::ones({2});
  x.set_requires_grad(true);
  auto y = mul_scalar(x, 2.0);
  EXPECT_THROW(backward(y), ContractError);
}

// Shared subexpressions must be visited exactly once: grads on a diamond
// graph come out exact, and double-visiting would double them.
TEST(Tensor, TapeVisitsSharedNodesOnce) {
  auto x = Tensor<double>::from({3.0}, {});
  x.set_requires_grad(true);
  auto y = mul_scalar(x, 2.0);   // y = 2x
  auto z = mul(y, y);            // z = 4x^2, dz/dx = 8x = 24
  Tape<double> tape(z);
  EXPECT_EQ(tape.num_nodes(), 3u);  // y, z, x
  tape.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 24.0);
}

TEST(Tensor, TapeConsumedAfterBackward) {
  auto x = Tensor<double>::from({2.0}, {});
  x.set_requires_grad(true);
  auto y = square(x);
  Tape<double> tape(y);
  tape.backward();
  EXPECT_THROW(tape.backward(), ContractError);
  EXPECT_TRUE(y.parents().empty());  // graph released
}

TEST(Tensor, DetachBlocksGradient) {
  auto x = Tensor<double>::from({5.0}, {});
  x.set_requires_grad(true);
  auto y = mul(x.detach(), x);  // d/dx should be 5, not 10
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

TEST(Tensor, NoGradGuardSuppressesGraph) {
  auto x = Tensor<double>::ones({4});
  x.set_requires_grad(true);
  NoGradGuard guard;
  auto y = mul_scalar(x, 3.0);
  EXPECT_TRUE(y.parents().empty());
}

TEST(Tensor, FiniteCheckModeCatchesNan) {
  FiniteCheckGuard guard(true);
  auto x = Tensor<double>::from({-1.0}, {});
  EXPECT_THROW(log(x), NumericalError);
  auto ok = Tensor<double>::from({1.0}, {});
  EXPECT_NO_THROW(log(ok));
}

TEST(Tensor, ElementwiseGradsMatchFiniteDifferences) {
  Rng rng(7);
  auto a = Tensor<double>::randn(rng, {3, 4});
  auto b = Tensor<double>::randn(rng, {3, 4});
  // keep b away from zero for div
  for (auto& v : b.mutable_data()) v = (v >= 0 ? v + 0.5 : v - 0.5);
  test::GradCheck chk;
  chk.run({&a, &b}, [&] {
    auto u = add(mul(a, b), div(sigmoid(a), b));
    auto w = sub(exp(mul_scalar(a, 0.3)), silu(b));
    return mean(add(square(u), square(w)));
  });
  EXPECT_LE(chk.max_err, 1e-6) << chk.worst;
}

TEST(Tensor, LogSqrtClampGrads) {
  Rng rng(9);
  auto a = Tensor<double>::randn(rng, {10});
  for (auto& v : a.mutable_data()) v = std::abs(v) + 0.7;  // keep clear of clamp kinks and log(0)
  test::GradCheck chk;
  chk.run({&a}, [&] { return sum(mul(log(a), sqrt(clamp(a, 0.1, 10.0)))); });
  EXPECT_LE(chk.max_err, 1e-6) << chk.worst;
}

TEST(Tensor, ReshapeSliceConcatGrads) {
  Rng rng(11);
  auto a = Tensor<double>::randn(rng, {2, 3, 2, 2});
  auto b = Tensor<double>::randn(rng, {2, 2, 2, 2});
  test::GradCheck chk;
  chk.run({&a, &b}, [&] {
    auto cat = concat_axis1(a, b);                 // 2 x 5 x 2 x 2
    auto left = slice_axis1(cat, 0, 2);
    auto right = slice_axis1(cat, 3, 5);
    auto flat = reshape(mul(left, right), Shape{2, 8});
    return mean(square(flat));
  });
  EXPECT_LE(chk.max_err, 1e-6) << chk.worst;
}

TEST(Tensor, SliceItemGrads) {
  Rng rng(13);
  auto a = Tensor<double>::randn(rng, {3, 2, 2, 2});
  test::GradCheck chk;
  chk.run({&a}, [&] {
    auto x0 = slice_item(a, 0);
    auto x2 = slice_item(a, 2);
    return mean(square(sub(x0, mul_scalar(x2, 2.0))));
  });
  EXPECT_LE(chk.max_err, 1e-6) << chk.worst;
}

TEST(Tensor, SoftmaxRowsSumToOneAndGrads) {
  Rng rng(17);
  auto a = Tensor<double>::randn(rng, {4, 6});
  auto y = softmax_lastdim(a);
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 6; ++c) s += y.at(r * 6 + c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  test::GradCheck chk;
  auto w = Tensor<double>::randn(rng, {4, 6});
  chk.run({&a}, [&] { return sum(mul(softmax_lastdim(a), w)); });
  EXPECT_LE(chk.max_err, 1e-6) << chk.worst;
}

TEST(Tensor, BmmMatchesManualAndGrads) {
  Rng rng(19);
  auto a = Tensor<double>::randn(rng, {2, 3, 4});
  auto b = Tensor<double>::randn(rng, {2, 4, 5});
  auto c = bmm(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  // manual check of one element
  double acc = 0;
  for (std::size_t k = 0; k < 4; ++k) acc += a.at(1 * 12 + 2 * 4 + k) * b.at(1 * 20 + k * 5 + 3);
  EXPECT_NEAR(c.at(1 * 15 + 2 * 5 + 3), acc, 1e-12);

  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      auto x = ta ? Tensor<double>::randn(rng, Shape{2, 4, 3}) : Tensor<double>::randn(rng, Shape{2, 3, 4});
      auto y = tb ? Tensor<double>::randn(rng, Shape{2, 5, 4}) : Tensor<double>::randn(rng, Shape{2, 4, 5});
      test::GradCheck chk;
      chk.run({&x, &y}, [&] { return mean(square(bmm(x, y, ta, tb))); });
      EXPECT_LE(chk.max_err, 1e-6) << "ta=" << ta << " tb=" << tb << " " << chk.worst;
    }
  }
}

TEST(Tensor, DropoutMaskAndDeterminism) {
  Rng rng1(23), rng2(23);
  auto x = Tensor<double>::ones({1000});
  x.set_requires_grad(true);
  auto y1 = dropout(x, 0.25, rng1, true);
  auto y2 = dropout(x, 0.25, rng2, true);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    EXPECT_DOUBLE_EQ(y1.at(i), y2.at(i));
    if (y1.at(i) == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(y1.at(i), 1.0 / 0.75, 1e-12);
    }
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1000.0, 0.25, 3 * 0.014);
  // disabled -> identity (same node)
  Rng rng3(1);
  auto y3 = dropout(x, 0.25, rng3, false);
  EXPECT_EQ(y3.id(), x.id());
}

TEST(Rng, DeterministicAndForkIndependent) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(42);
  auto f1 = c.fork(1), f2 = c.fork(2);
  EXPECT_NE(f1.next_u64(), f2.next_u64());
  // restore round-trips
  Rng d(7);
  d.next_u64();
  Rng e;
  e.restore(d.key(), d.counter());
  EXPECT_EQ(d.next_u64(), e.next_u64());
}

TEST(Rng, NormalMomentsSane) {
  Rng rng(100);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 3.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(var, 1.0, 3.0 * std::sqrt(2.0 / n));
}
