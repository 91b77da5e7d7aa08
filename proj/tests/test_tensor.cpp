#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "geomf/tensor.hpp"

using namespace geomf;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v));
}

double max_rel_error(const Tensor& a, const Tensor& b) {
  double num = 0.0;
  double den = 1e-6;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max({den, std::abs(a[i]), std::abs(b[i])});
  }
  return num / den;
}

// Compares tape gradients of f against central differences for every input.
void expect_gradients_match(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            const std::vector<Tensor>& inputs, double tol = 1e-6) {
  Tape tape;
  std::vector<Tensor> watched;
  for (const Tensor& x : inputs) watched.push_back(tape.watch(x));
  Tensor loss = f(watched);
  tape.backward(loss);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto scalar_f = [&](const Tensor& probe) {
      std::vector<Tensor> args = inputs;
      args[k] = probe;
      return f(args).item();
    };
    Tensor fd = finite_diff_gradient(scalar_f, inputs[k], 1e-5);
    EXPECT_LT(max_rel_error(tape.grad(watched[k]), fd), tol) << "input " << k;
  }
}

// Weighted sum so that every output element carries a distinct upstream gradient.
Tensor weighted_total(const Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return sum_all(mul(y, Tensor(y.shape(), w)));
}

}  // namespace

TEST(Tensor, MatmulSmallExample) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_DOUBLE_EQ(c.at({0, 0}), 19);
  EXPECT_DOUBLE_EQ(c.at({0, 1}), 22);
  EXPECT_DOUBLE_EQ(c.at({1, 0}), 43);
  EXPECT_DOUBLE_EQ(c.at({1, 1}), 50);
}

TEST(Tensor, SoftmaxOfLogTwo) {
  Tensor y = softmax(Tensor({2}, {std::log(2.0), 0.0}), 0);
  EXPECT_NEAR(y[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(y[1], 1.0 / 3.0, 1e-12);
}

TEST(Tensor, SoftmaxLargeLogitsStayFinite) {
  Tensor y = softmax(Tensor({3}, {1000.0, 999.0, -1000.0}), 0);
  double total = 0.0;
  for (double v : y.values()) {
    EXPECT_TRUE(std::isfinite(v));
    total += v;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Tensor, GeluAtOne) {
  EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
  EXPECT_NEAR(gelu(Tensor({1}, {1.0}))[0], 0.841345, 1e-6);
  EXPECT_DOUBLE_EQ(gelu(0.0), 0.0);
}

TEST(Tensor, SumAndMul) {
  EXPECT_DOUBLE_EQ(sum(Tensor({3}, {1, 2, 3}), 0).item(), 6.0);
  Tensor p = mul(Tensor({2}, {2, 3}), Tensor({2}, {4, 5}));
  EXPECT_DOUBLE_EQ(p[0], 8.0);
  EXPECT_DOUBLE_EQ(p[1], 15.0);
}

TEST(Tensor, DivideByZeroThrows) {
  EXPECT_THROW(div(Tensor({1}, {1.0}), Tensor({1}, {0.0})), NumericError);
}

TEST(Tensor, ShapeErrors) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), DimensionError);
  EXPECT_THROW(add(Tensor({2, 3}), Tensor({2})), DimensionError);
  EXPECT_THROW(reshape(Tensor({2, 3}), {4}), DimensionError);
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(sum(Tensor({2}), 1), IndexError);
  EXPECT_THROW(gather_rows(Tensor({2, 3}), std::vector<std::size_t>{2}), IndexError);
}

TEST(Tensor, BackwardNeedsScalarAndRunsOnce) {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1, 2}));
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
  Tensor l = sum_all(y);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), Error);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 2.0);
}

TEST(Tensor, UntouchedInputHasZeroGradient) {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1, 2}));
  Tensor unused = tape.watch(Tensor({3}, {1, 2, 3}));
  tape.backward(sum_all(x));
  Tensor g = tape.grad(unused);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(Tensor, UntrackedOpsRecordNothing) {
  Tensor y = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_FALSE(y.tracked());
}

TEST(Tensor, BroadcastForms) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = add(a, Tensor({3}, {10, 20, 30}));
  EXPECT_DOUBLE_EQ(row.at({1, 2}), 36);
  Tensor col = add(a, Tensor({2, 1}, {100, 200}));
  EXPECT_DOUBLE_EQ(col.at({0, 1}), 102);
  EXPECT_DOUBLE_EQ(col.at({1, 0}), 204);
  Tensor s = mul(a, Tensor({1}, {2}));
  EXPECT_DOUBLE_EQ(s.at({1, 1}), 10);
}

TEST(Tensor, PermuteMatchesIndexing) {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor p = permute(a, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(p.at({k, i, j}), a.at({i, j, k}));
}

TEST(Tensor, ConcatAlongMiddleAxis) {
  Tensor a({2, 1, 2}, {1, 2, 3, 4});
  Tensor b({2, 2, 2}, {5, 6, 7, 8, 9, 10, 11, 12});
  Tensor c = concat({a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 2}));
  EXPECT_EQ(c.at({0, 0, 1}), 2);
  EXPECT_EQ(c.at({0, 2, 0}), 7);
  EXPECT_EQ(c.at({1, 0, 0}), 3);
  EXPECT_EQ(c.at({1, 1, 1}), 10);
}

class TensorGradient : public ::testing::TestWithParam<int> {
 protected:
  std::mt19937_64 rng{static_cast<std::uint64_t>(GetParam())};
};

TEST_P(TensorGradient, Elementwise) {
  for (BinaryKind kind : {BinaryKind::kAdd, BinaryKind::kSub, BinaryKind::kMul}) {
    for (Shape bshape : {Shape{2, 3, 4}, Shape{4}, Shape{3, 1}, Shape{1}}) {
      expect_gradients_match(
          [kind](const std::vector<Tensor>& x) { return weighted_total(elementwise(kind, x[0], x[1])); },
          {random_tensor({2, 3, 4}, rng), random_tensor(bshape, rng)});
    }
  }
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(div(x[0], x[1])); },
                         {random_tensor({2, 3}, rng), random_tensor({3}, rng, 0.5, 2.0)});
}

TEST_P(TensorGradient, MatmulAndLinear) {
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(matmul(x[0], x[1])); },
                         {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(matmul(x[0], x[1])); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)});
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(linear(x[0], x[1])); },
                         {random_tensor({2, 3, 4}, rng), random_tensor({4, 2}, rng)});
}

TEST_P(TensorGradient, ReductionsAndSoftmax) {
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_gradients_match([axis](const std::vector<Tensor>& x) { return weighted_total(mean(x[0], axis)); },
                           {random_tensor({2, 3, 4}, rng)});
    expect_gradients_match([axis](const std::vector<Tensor>& x) { return weighted_total(softmax(x[0], axis)); },
                           {random_tensor({2, 3, 4}, rng)});
  }
}

TEST_P(TensorGradient, Pointwise) {
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(gelu(x[0])); },
                         {random_tensor({3, 4}, rng)});
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(sqrt(x[0])); },
                         {random_tensor({5}, rng, 0.5, 2.0)});
  expect_gradients_match(
      [](const std::vector<Tensor>& x) { return weighted_total(add_scalar(scale(x[0], -1.5), 0.25)); },
      {random_tensor({5}, rng)});
}

TEST_P(TensorGradient, ShapeOps) {
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(permute(x[0], {1, 2, 0})); },
                         {random_tensor({2, 3, 4}, rng)});
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(transpose(x[0])); },
                         {random_tensor({3, 4}, rng)});
  expect_gradients_match([](const std::vector<Tensor>& x) { return weighted_total(concat({x[0], x[1]}, 1)); },
                         {random_tensor({2, 1, 3}, rng), random_tensor({2, 2, 3}, rng)});
  const std::vector<std::size_t> ids{2, 0, 2, 1};
  expect_gradients_match([&](const std::vector<Tensor>& x) { return weighted_total(gather_rows(x[0], ids)); },
                         {random_tensor({3, 2}, rng)});
}

TEST_P(TensorGradient, SharedSubexpression) {
  expect_gradients_match(
      [](const std::vector<Tensor>& x) {
        Tensor h = gelu(matmul(x[0], x[1]));
        return weighted_total(add(mul(h, h), softmax(h, 1)));
      },
      {random_tensor({3, 4}, rng), random_tensor({4, 3}, rng)});
}

INSTANTIATE_TEST_SUITE_P(Seeds, TensorGradient, ::testing::Values(1, 2, 3));
