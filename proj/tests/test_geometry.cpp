#include <gtest/gtest.h>

#include "engram/geometry.hpp"
#include "support.hpp"

using namespace engram;
using engram::test::random_unit;

TEST(Cosine, Endpoints) {
  const std::vector<float> u = {0.6f, 0.8f}, v = {-0.8f, 0.6f}, w = {-0.6f, -0.8f};
  EXPECT_NEAR(cosine(u, u), 1.0, 1e-12);
  EXPECT_NEAR(cosine(u, v), 0.0, 1e-7);
  EXPECT_NEAR(cosine(u, w), -1.0, 1e-12);
  EXPECT_THROW(cosine(u, std::vector<float>{1.0f}), Error);
}

TEST(FisherRao, SimplifiedHandValue) {
  std::vector<float> a(8, 0.0f), b(8, 0.0f);
  b[0] = 0.1f;
  const PrecisionGaussian ga{a, 0.01, Bits::f32}, gb{b, 0.01, Bits::f32};
  EXPECT_NEAR(fr_simplified(ga, gb), 1.0, 1e-6);
  EXPECT_EQ(fr_simplified(ga, ga), 0.0);
  const PrecisionGaussian wide_a{a, 0.04, Bits::f32}, wide_b{b, 0.04, Bits::f32};
  EXPECT_NEAR(fr_simplified(wide_a, wide_b), 0.5, 1e-6);
  const PrecisionGaussian mixed{b, 0.01, Bits::b4};
  EXPECT_THROW(fr_simplified(ga, mixed), Error);
}

TEST(FisherRao, ScalarOracle) {
  // sqrt(2) * acosh(1.25), evaluated as sqrt(2) * ln(1.25 + sqrt(1.25^2 - 1))
  const double expected = std::sqrt(2.0) * std::log(1.25 + std::sqrt(1.25 * 1.25 - 1.0));
  EXPECT_NEAR(expected, 0.9803, 1e-4);
  EXPECT_NEAR(fr_univariate(0.0, 0.1, 0.1, 0.1), expected, 1e-12);
  const std::vector<float> a = {0.0f}, b = {0.1f};
  EXPECT_NEAR(frqad({a, 0.01, Bits::f32}, {b, 0.01, Bits::f32}), expected, 1e-7);
}

TEST(FisherRao, UnivariateAgainstHalfPlaneFormula) {
  // FR distance between N(m1,s1^2) and N(m2,s2^2) through the Poincare
  // half-plane: sqrt(2) * 2 asinh( |(m/sqrt2, s) - (m'/sqrt2, s')| / (2 sqrt(s s')) )
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1), pos(0.01, 2);
  for (int i = 0; i < 1000; ++i) {
    const double m1 = u(rng), m2 = u(rng), s1 = pos(rng), s2 = pos(rng);
    const double dx = (m1 - m2) / std::sqrt(2.0), dy = s1 - s2;
    const double oracle = std::sqrt(2.0) * 2.0 * std::asinh(std::sqrt(dx * dx + dy * dy) / (2.0 * std::sqrt(s1 * s2)));
    EXPECT_NEAR(fr_univariate(m1, s1, m2, s2), oracle, 1e-9 * std::max(1.0, oracle));
  }
}

TEST(Frqad, ZeroOnIdentical) {
  std::mt19937_64 rng(1);
  const auto v = random_unit(64, rng);
  const PrecisionGaussian g{v, 1.0 / 64, Bits::b4};
  EXPECT_EQ(frqad(g, g), 0.0);
}

TEST(Frqad, PureVarianceMismatchPositive) {
  std::mt19937_64 rng(1);
  const auto v = random_unit(64, rng);
  EXPECT_GT(frqad({v, 1.0 / 64, Bits::f32}, {v, 1.0 / 64, Bits::b4}), 0.0);
}

TEST(Frqad, Symmetric) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_unit(32, rng), b = random_unit(32, rng);
    const PrecisionGaussian ga{a, 1.0 / 32, Bits::f32}, gb{b, 1.0 / 32, Bits::b2};
    EXPECT_NEAR(frqad(ga, gb), frqad(gb, ga), 1e-12);
  }
}

TEST(Frqad, TriangleInequality) {
  std::mt19937_64 rng(8);
  const std::array<Bits, 4> bits = {Bits::f32, Bits::b8, Bits::b4, Bits::b2};
  for (int i = 0; i < 500; ++i) {
    const auto a = random_unit(16, rng), b = random_unit(16, rng), c = random_unit(16, rng);
    const PrecisionGaussian ga{a, 1.0 / 16, bits[rng() % 4]}, gb{b, 1.0 / 16, bits[rng() % 4]},
        gc{c, 1.0 / 16, bits[rng() % 4]};
    EXPECT_LE(frqad(ga, gc), frqad(ga, gb) + frqad(gb, gc) + 1e-9);
  }
}

TEST(Frqad, EffectiveVariance) {
  const std::vector<float> v = {1.0f};
  EXPECT_DOUBLE_EQ((PrecisionGaussian{v, 0.5, Bits::b4}.effective_variance()), 4.0);
  EXPECT_DOUBLE_EQ((PrecisionGaussian{v, 0.5, Bits::b2, 0.5}.effective_variance()), 2.0);
  EXPECT_THROW(frqad({v, 0.0, Bits::f32}, {v, 1.0, Bits::f32}), Error);
}

TEST(Frqad, DemotionRegimeIncreasesDistance) {
  // equal means on the demoted side: shrinking precision only widens the variance gap
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_unit(32, rng);
    const PrecisionGaussian q{a, 1.0 / 32, Bits::f32};
    double prev = frqad(q, {a, 1.0 / 32, Bits::f32});
    for (auto b : {Bits::b8, Bits::b4, Bits::b2}) {
      const double d = frqad(q, {a, 1.0 / 32, b});
      EXPECT_GT(d, prev);
      prev = d;
    }
  }
}

TEST(Ramp, Weights) {
  EXPECT_EQ(ramp_weight(0), 0.0);
  EXPECT_EQ(ramp_weight(10), 0.5);
  EXPECT_EQ(ramp_weight(20), 1.0);
  EXPECT_EQ(ramp_weight(500), 1.0);
  double prev = -1;
  for (std::uint64_t a = 0; a <= 100; ++a) {
    EXPECT_GE(ramp_weight(a), prev);
    prev = ramp_weight(a);
  }
}

TEST(Ramp, EndpointsMatchComponents) {
  std::mt19937_64 rng(12);
  const auto q = random_unit(32, rng);
  std::vector<std::vector<float>> mems;
  for (int i = 0; i < 30; ++i) mems.push_back(random_unit(32, rng));
  const PrecisionGaussian qg{q, 1.0 / 32, Bits::f32};
  for (const auto& m : mems) {
    const PrecisionGaussian mg{m, 1.0 / 32, Bits::b4};
    EXPECT_EQ(graduated_score(qg, mg, 0), cosine(q, m));
    EXPECT_DOUBLE_EQ(graduated_score(qg, mg, 1000), distance_to_similarity(frqad(qg, mg)));
  }
  // at saturation the score order is the FRQAD order
  std::vector<std::size_t> by_score(mems.size()), by_dist(mems.size());
  std::iota(by_score.begin(), by_score.end(), 0);
  by_dist = by_score;
  auto score = [&](std::size_t i) { return graduated_score(qg, {mems[i], 1.0 / 32, Bits::b4}, 1000); };
  auto dist = [&](std::size_t i) { return frqad(qg, {mems[i], 1.0 / 32, Bits::b4}); };
  std::sort(by_score.begin(), by_score.end(), [&](auto a, auto b) { return score(a) > score(b); });
  std::sort(by_dist.begin(), by_dist.end(), [&](auto a, auto b) { return dist(a) < dist(b); });
  EXPECT_EQ(by_score, by_dist);
}
