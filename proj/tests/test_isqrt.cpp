#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gsop/certify.hpp"
#include "gsop/isqrt.hpp"
#include "oracles.hpp"

using namespace gsop;

namespace {

Tensor<double> from_eigen(const Eigen::MatrixXd& m) {
  const auto d = static_cast<std::size_t>(m.rows());
  return Tensor<double>(Shape{d, d}, oracle::from_matrix(m));
}

Eigen::MatrixXd to_eigen(const Tensor<double>& t) { return oracle::to_matrix(t.data().data(), t.dim(t.rank() - 1)); }

Tensor<double> identity(std::size_t d) {
  Tensor<double> t(Shape{d, d}, 0.0);
  for (std::size_t i = 0; i < d; ++i) t.mutable_data()[i * d + i] = 1.0;
  return t;
}

}  // namespace

TEST(NewtonSchulz, CoreFixesIdentityBitwise) {
  auto i4 = identity(4);
  for (std::size_t k : {1, 3, 5, 9}) EXPECT_EQ(newton_schulz_core(i4.data(), 4, k), i4.values());
}

TEST(NewtonSchulz, IdentityThroughNormalization) {
  auto i4 = identity(4);
  auto y = newton_schulz_sqrt(i4, 5);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], i4[i], 1e-12);
}

TEST(NewtonSchulz, DiagonalExample) {
  Tensor<double> a(Shape{2, 2}, std::vector<double>{4, 0, 0, 1});
  for (PreNorm p : {PreNorm::trace, PreNorm::frobenius}) {
    auto y = to_eigen(newton_schulz_sqrt(a, 5, p));
    const Eigen::MatrixXd A = to_eigen(a);
    EXPECT_LT((y * y - A).norm() / A.norm(), 1e-2) << to_string(p);
  }
}

TEST(NewtonSchulz, WellConditionedMatchesEigenOracle) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    const Eigen::MatrixXd A = oracle::random_spd(64, 1.0, 100.0, rng);
    const Eigen::MatrixXd S = oracle::sqrtm(A);
    const Eigen::MatrixXd Y = to_eigen(newton_schulz_sqrt(from_eigen(A), 5));
    EXPECT_LT((Y - S).norm() / S.norm(), 5e-2);
  }
}

// A = B^T B + 0.1 I has condition numbers in the thousands; five iterations
// do not reach 5e-2 there, while more iterations converge to the oracle.
TEST(NewtonSchulz, IllConditionedConvergesWithMoreIterations) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 3; ++t) {
    auto b = random_normal<double>({64, 64}, rng);
    const Eigen::MatrixXd B = to_eigen(b);
    const Eigen::MatrixXd A = B.transpose() * B + 0.1 * Eigen::MatrixXd::Identity(64, 64);
    const Eigen::MatrixXd S = oracle::sqrtm(A);
    double prev = 1e300;
    for (std::size_t k : {5, 8, 12}) {
      const double err = (to_eigen(newton_schulz_sqrt(from_eigen(A), k)) - S).norm() / S.norm();
      EXPECT_LT(err, prev);
      prev = err;
    }
    EXPECT_LT(prev, 5e-2);
  }
}

TEST(NewtonSchulz, ResidualNonIncreasing) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Eigen::MatrixXd A = oracle::random_spd(16, 1.0, 99.0, rng);
    const Eigen::MatrixXd Ah = A / A.norm();
    const auto packed = oracle::from_matrix(Ah);
    double prev = 1e300;
    for (std::size_t k = 1; k <= 8; ++k) {
      auto y = newton_schulz_core(std::span<const double>(packed), 16, k);
      const Eigen::MatrixXd Y = oracle::to_matrix(y.data(), 16);
      const double r = (Y * Y - Ah).norm();
      EXPECT_LE(r, prev * (1 + 1e-12)) << "trial " << t << " k " << k;
      prev = r;
    }
  }
}

TEST(NewtonSchulz, SymmetryPreserved) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 10; ++t) {
    const Eigen::MatrixXd A = oracle::random_spd(12, 0.5, 20.0, rng);
    Tensor<float> af(Shape{12, 12});
    for (std::size_t i = 0; i < 144; ++i) af.mutable_data()[i] = static_cast<float>(A(i / 12, i % 12));
    auto y = newton_schulz_sqrt(af, 5);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) EXPECT_LT(std::abs(y[i * 12 + j] - y[j * 12 + i]), 1e-5f);
  }
}

TEST(NewtonSchulz, BatchedMatchesPerItem) {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd A = oracle::random_spd(5, 1.0, 9.0, rng), B = oracle::random_spd(5, 0.1, 3.0, rng);
  auto va = oracle::from_matrix(A), vb = oracle::from_matrix(B);
  std::vector<double> both(va);
  both.insert(both.end(), vb.begin(), vb.end());
  auto y = newton_schulz_sqrt(Tensor<double>(Shape{2, 5, 5}, both), 5).values();
  auto ya = newton_schulz_sqrt(from_eigen(A), 5).values(), yb = newton_schulz_sqrt(from_eigen(B), 5).values();
  EXPECT_EQ(std::vector<double>(y.begin(), y.begin() + 25), ya);
  EXPECT_EQ(std::vector<double>(y.begin() + 25, y.end()), yb);
}

TEST(NewtonSchulz, DegenerateInputGivesZeros) {
  const std::size_t before = degenerate_sqrt_events().load();
  Tensor<double> z(Shape{3, 3}, 0.0, true);
  auto y = newton_schulz_sqrt(z, 5);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(degenerate_sqrt_events().load(), before + 1);
  backward(sum(y));
  for (double g : z.grad()) EXPECT_EQ(g, 0.0);
}

TEST(NewtonSchulz, Errors) {
  EXPECT_THROW(newton_schulz_sqrt(Tensor<double>(Shape{3, 4}), 5), DimensionError);
  EXPECT_THROW(newton_schulz_sqrt(identity(3), 0), ConfigError);
  EXPECT_EQ(parse_prenorm("trace"), PreNorm::trace);
  EXPECT_THROW(parse_prenorm("spectral"), ConfigError);
}

TEST(NewtonSchulz, GradientBothPreNorms) {
  std::mt19937_64 rng(6);
  for (PreNorm p : {PreNorm::trace, PreNorm::frobenius}) {
    auto a = from_eigen(oracle::random_spd(6, 0.5, 5.0, rng));
    auto r = projection_weights(36, 11);
    auto f = [&] { return weighted_sum(newton_schulz_sqrt(a, 5, p), std::span<const double>(r)); };
    EXPECT_LT(gradcheck({{"A", &a}}, f).max_error(), 1e-3) << to_string(p);
  }
}

class IsqrtGradients : public ::testing::TestWithParam<int> {};

TEST_P(IsqrtGradients, HeadMatchesFiniteDifferences) {
  auto report = certify("isqrt", static_cast<std::uint64_t>(GetParam()));
  EXPECT_LT(report.max_error(), 1e-3) << report.worst()->name;
}

INSTANTIATE_TEST_SUITE_P(Seeds, IsqrtGradients, ::testing::Values(1, 2, 3));

TEST(UpperTriangle, LengthsAndRoundTrip) {
  EXPECT_EQ(IsqrtConfig{}.representation_length(), 32896u);
  IsqrtConfig c128;
  c128.c_reduced = 128;
  EXPECT_EQ(c128.representation_length(), 8256u);
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd A = oracle::random_spd(7, 0.1, 2.0, rng);
  auto m = oracle::from_matrix(A);
  Tensor<double> t(Shape{1, 7, 7}, m);
  for (bool w : {false, true}) {
    auto packed = upper_triangle(t, w);
    EXPECT_EQ(packed.shape(), (Shape{1, 28}));
    auto back = symmetric_from_upper(packed.data(), 7, w);
    for (std::size_t i = 0; i < 49; ++i) EXPECT_NEAR(back[i], m[i], 1e-15);
  }
  // Row-major order: (0,0), (0,1), ..., (0,6), (1,1), ...
  auto p = upper_triangle(t);
  EXPECT_EQ(p[1], m[1]);
  EXPECT_EQ(p[7], m[8]);
}

TEST(IsqrtHead, ShapesAndConstantInput) {
  std::mt19937_64 rng(8);
  IsqrtConfig cfg;
  cfg.c_reduced = 6;
  IsqrtCovHead<double> head(10, cfg, rng);
  EXPECT_EQ(head.output_dim(), 21u);
  auto x = random_normal<double>({3, 10, 4, 4}, rng);
  EXPECT_EQ(head.forward(x, Mode::train).shape(), (Shape{3, 21}));
  Tensor<double> flat(Shape{2, 10, 4, 4}, 1.25);
  for (double v : head.forward(flat, Mode::eval).values()) EXPECT_EQ(v, 0.0);
}
