#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "gsop/gradcheck.hpp"
#include "gsop/ops.hpp"
#include "gsop/pool.hpp"
#include "gsop/tensor.hpp"

using namespace gsop;

namespace {

Tensor<double> leaf(Shape s, std::mt19937_64& rng) { return random_normal<double>(std::move(s), rng, 1.0, true); }

double check(Tensor<double>& x, const std::function<Tensor<double>()>& f) {
  return gradcheck({{"x", &x}}, f).max_error();
}

}  // namespace

TEST(Tensor, ShapeAndStorage) {
  Tensor<float> t(Shape{2, 3, 4}, 1.5f);
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(to_string(t.shape()), "[2x3x4]");
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
}

TEST(Matmul, IdentityCases) {
  Tensor<double> i3(Shape{3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(i3, i3).values(), i3.values());
  Tensor<double> a(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> i2(Shape{2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_EQ(matmul(a, i2).values(), a.values());
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor<double> a(Shape{2, 3}), b(Shape{2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  auto a = leaf({5, 4}, rng);
  auto b = leaf({4, 3}, rng);
  auto report = gradcheck({{"a", &a}, {"b", &b}}, [&] { return sum(matmul(a, b)); });
  EXPECT_LT(report.max_error(), 1e-4);
}

TEST(Backward, LinearAndQuadraticForms) {
  std::mt19937_64 rng(2);
  auto x = leaf({3, 4}, rng);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  x.zero_grad();
  backward(scale(sum(mul(x, x)), 0.5));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, RepeatedCallsAccumulateOnLeaves) {
  Tensor<double> x(Shape{3}, std::vector<double>{1, 2, 3}, true);
  auto loss = sum(x);
  backward(loss);
  backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, TwoConsumersSumContributions) {
  std::mt19937_64 rng(3);
  auto x = leaf({6}, rng);
  // x*x + 3x consumed separately vs. the fused derivative 2x + 3.
  backward(sum(add(mul(x, x), scale(x, 3.0))));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(x.grad()[i], 2 * x[i] + 3, 1e-14);
}

TEST(Backward, NonScalarLossIsUsageError) {
  Tensor<double> x(Shape{2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), UsageError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor<double> x(Shape{2}, 1.0, true);
  NoGradGuard g;
  auto y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Activations, ReferenceValues) {
  Tensor<double> x(Shape{3}, std::vector<double>{0.0, -2.0, 3.0});
  EXPECT_EQ(sigmoid(x)[0], 0.5);
  EXPECT_DOUBLE_EQ(leaky_relu(x, 0.1)[1], -0.2);
  EXPECT_EQ(leaky_relu(x, 0.1)[2], 3.0);
  EXPECT_EQ(relu(x)[1], 0.0);
}

TEST(Activations, SigmoidSymmetryAndRange) {
  std::mt19937_64 rng(4);
  auto x = random_normal<double>({1000}, rng, 20.0);
  auto s = sigmoid(x), t = sigmoid(scale(x, -1.0));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    EXPECT_NEAR(s[i] + t[i], 1.0, 1e-15);
  }
  auto xf = random_normal<float>({1000}, rng, 10.0);
  for (float v : sigmoid(xf).values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Activations, Gradients) {
  std::mt19937_64 rng(5);
  auto x = leaf({4, 5}, rng);
  auto w = projection_weights(20, 9);
  EXPECT_LT(check(x, [&] { return weighted_sum(sigmoid(x), std::span<const double>(w)); }), 1e-4);
  EXPECT_LT(check(x, [&] { return weighted_sum(leaky_relu(x, 0.1), std::span<const double>(w)); }), 1e-4);
  EXPECT_LT(check(x, [&] { return weighted_sum(relu(x), std::span<const double>(w)); }), 1e-4);
}

TEST(Broadcast, MulAndAddGradients) {
  std::mt19937_64 rng(6);
  auto x = leaf({2, 3, 4, 4}, rng);
  auto c = leaf({2, 3, 1, 1}, rng);
  auto p = leaf({2, 1, 4, 4}, rng);
  auto w = projection_weights(96, 1);
  auto f = [&] { return weighted_sum(add(mul(x, c), mul(x, p)), std::span<const double>(w)); };
  EXPECT_LT(gradcheck({{"x", &x}, {"c", &c}, {"p", &p}}, f).max_error(), 1e-4);
}

TEST(Elementwise, MaximumAndConcat) {
  std::mt19937_64 rng(7);
  auto a = leaf({2, 3, 2, 2}, rng);
  auto b = leaf({2, 3, 2, 2}, rng);
  auto w = projection_weights(48, 2);
  auto f = [&] { return weighted_sum(concat_channels(maximum(a, b), a), std::span<const double>(w)); };
  EXPECT_LT(gradcheck({{"a", &a}, {"b", &b}}, f).max_error(), 1e-4);
  auto m = maximum(a, add_scalar(a, -1.0));
  EXPECT_EQ(m.values(), a.values());
}

TEST(Pooling, GlobalAverage) {
  Tensor<double> x(Shape{2, 3, 5, 5}, 1.25);
  for (double v : global_avg_pool(x).values()) EXPECT_EQ(v, 1.25);
  std::mt19937_64 rng(8);
  auto y = leaf({2, 3, 4, 5}, rng);
  auto w = projection_weights(6, 3);
  EXPECT_LT(check(y, [&] { return weighted_sum(global_avg_pool(y), std::span<const double>(w)); }), 1e-4);
}

TEST(Pooling, MaxPoolShapeAndGradient) {
  Tensor<float> x(Shape{1, 2, 56, 56});
  auto y = max_pool2d(x, 3, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 28, 28}));
  std::mt19937_64 rng(9);
  auto z = leaf({2, 2, 7, 7}, rng);
  auto w = projection_weights(2 * 2 * 4 * 4, 4);
  EXPECT_LT(check(z, [&] { return weighted_sum(max_pool2d(z, 3, 2, 1), std::span<const double>(w)); }), 1e-4);
}

TEST(Pooling, AdaptiveAverage) {
  Tensor<float> x(Shape{1, 128, 14, 14});
  EXPECT_EQ(adaptive_avg_pool2d(x, 8, 8).shape(), (Shape{1, 128, 8, 8}));
  EXPECT_THROW(adaptive_avg_pool2d(x, 15, 8), DimensionError);
  // Brute-force bin oracle for 5 -> 3: bins [0,2), [1,4), [3,5).
  Tensor<double> r(Shape{1, 1, 1, 5}, std::vector<double>{1, 2, 3, 4, 5});
  auto p = adaptive_avg_pool2d(r, 1, 3);
  EXPECT_DOUBLE_EQ(p[0], 1.5);
  EXPECT_DOUBLE_EQ(p[1], 3.0);
  EXPECT_DOUBLE_EQ(p[2], 4.5);
  std::mt19937_64 rng(10);
  auto z = leaf({2, 2, 7, 6}, rng);
  auto w = projection_weights(2 * 2 * 3 * 4, 5);
  EXPECT_LT(check(z, [&] { return weighted_sum(adaptive_avg_pool2d(z, 3, 4), std::span<const double>(w)); }), 1e-4);
}

TEST(Resample, IdentityConstantAndShape) {
  std::mt19937_64 rng(11);
  auto m = random_normal<double>({2, 1, 8, 8}, rng);
  EXPECT_EQ(resize_bilinear(m, 8, 8).values(), m.values());
  Tensor<double> c(Shape{1, 2, 8, 8}, 0.375);
  for (double v : resize_bilinear(c, 14, 14).values()) EXPECT_DOUBLE_EQ(v, 0.375);
  for (double v : resize_bilinear(c, 5, 3).values()) EXPECT_DOUBLE_EQ(v, 0.375);
  EXPECT_EQ(resize_bilinear(m, 14, 14).shape(), (Shape{2, 1, 14, 14}));
}

TEST(Resample, HalfPixelReferenceValues) {
  // 2 -> 4 upsampling with half-pixel centers: sources -0.25, 0.25, 0.75, 1.25.
  Tensor<double> r(Shape{1, 1, 1, 2}, std::vector<double>{0.0, 4.0});
  auto y = resize_bilinear(r, 1, 4);
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 3.0);
  EXPECT_DOUBLE_EQ(y[3], 4.0);
  std::mt19937_64 rng(12);
  auto z = leaf({1, 2, 3, 4}, rng);
  auto w = projection_weights(2 * 7 * 6, 6);
  EXPECT_LT(check(z, [&] { return weighted_sum(resize_bilinear(z, 7, 6), std::span<const double>(w)); }), 1e-4);
}

TEST(Loss, SoftmaxCrossEntropyGradient) {
  std::mt19937_64 rng(13);
  auto logits = leaf({4, 5}, rng);
  std::vector<std::int32_t> labels{0, 3, 4, 1};
  auto f = [&] { return softmax_cross_entropy(logits, std::span<const std::int32_t>(labels)); };
  EXPECT_LT(check(logits, f), 1e-4);
  Tensor<double> uniform(Shape{2, 4}, 0.0);
  EXPECT_NEAR(softmax_cross_entropy(uniform, std::span<const std::int32_t>(labels.data(), 2)).item(), std::log(4.0),
              1e-15);
}

TEST(Linear, GradientAndBias) {
  std::mt19937_64 rng(14);
  auto x = leaf({3, 6}, rng);
  auto w = leaf({4, 6}, rng);
  auto b = leaf({4}, rng);
  auto r = projection_weights(12, 7);
  auto f = [&] { return weighted_sum(linear(x, w, &b), std::span<const double>(r)); };
  EXPECT_LT(gradcheck({{"x", &x}, {"w", &w}, {"b", &b}}, f).max_error(), 1e-4);
}

TEST(Determinism, ForwardIsBitwiseRepeatable) {
  std::mt19937_64 r1(15), r2(15);
  auto a = random_normal<float>({64, 48}, r1), b = random_normal<float>({48, 32}, r1);
  auto c = random_normal<float>({64, 48}, r2), d = random_normal<float>({48, 32}, r2);
  EXPECT_EQ(matmul(a, b).values(), matmul(c, d).values());
}
