#include <gtest/gtest.h>

#include "engram/quant.hpp"
#include "support.hpp"

using namespace engram;
using engram::test::random_unit;

namespace {

// Density of one coordinate of a uniform unit vector, evaluated directly.
double coord_density(double y, double d) {
  const double s = 1.0 - y * y;
  if (s <= 0.0) return 0.0;
  const double log_c = std::lgamma(d / 2.0) - std::lgamma(0.5) - std::lgamma((d - 1.0) / 2.0);
  return std::exp(log_c + (d - 3.0) / 2.0 * std::log(s));
}

template <typename F>
double simpson(F f, double a, double b, int n = 4000) {
  if (b <= a) return 0.0;
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

// Quadrature Lloyd step, independent of the closed-form path.
double quadrature_residual(const Codebook& cb, double d) {
  const auto c = cb.centroids();
  const double edge = 12.0 / std::sqrt(d);  // beyond ~12 sigma the mass is negligible
  double worst = 0.0, lo = -1.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double hi = i + 1 < c.size() ? 0.5 * (c[i] + c[i + 1]) : 1.0;
    const double a = std::max(lo, -edge), b = std::min(hi, edge);
    const double mass = simpson([&](double y) { return coord_density(y, d); }, a, b);
    const double m1 = simpson([&](double y) { return y * coord_density(y, d); }, a, b);
    if (mass > 1e-12) worst = std::max(worst, std::abs(m1 / mass - c[i]));
    lo = hi;
  }
  return worst;
}

double mse(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - double(b[i])) * (a[i] - double(b[i]));
  return s;
}

}  // namespace

TEST(Rotation, OrthogonalSmall) {
  for (std::uint64_t seed : {0, 1, 7, 42}) EXPECT_LT(make_rotation(4, seed).orthogonality_error(), 1e-6);
}

TEST(Rotation, Deterministic) { EXPECT_EQ(make_rotation(32, 9), make_rotation(32, 9)); }

TEST(Rotation, ColumnNormsAtFullDimension) {
  const auto r = make_rotation(768, 42);
  for (std::size_t c = 0; c < 768; ++c) {
    double s = 0.0;
    for (std::size_t k = 0; k < 768; ++k) s += r(k, c) * r(k, c);
    ASSERT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(Rotation, RejectsTinyDimension) { EXPECT_THROW(make_rotation(1, 0), Error); }

TEST(Codebook, TwoBitSymmetric) {
  const auto cb = make_codebook(Bits::b2, 768);
  ASSERT_EQ(cb.size(), 4u);
  EXPECT_NEAR(cb[0], -cb[3], 1e-12);
  EXPECT_NEAR(cb[1], -cb[2], 1e-12);
}

TEST(Codebook, EightBitStrictlyIncreasing) {
  const auto cb = make_codebook(Bits::b8, 256);
  ASSERT_EQ(cb.size(), 256u);
  for (std::size_t i = 1; i < cb.size(); ++i) EXPECT_LT(cb[i - 1], cb[i]);
}

TEST(Codebook, GaussianLimitLevels) {
  // high-dimensional coordinates are N(0, 1/d); the 2-bit Lloyd-Max levels for
  // a unit Gaussian are +-0.4528 and +-1.5104
  const double d = 4096;
  const auto cb = make_codebook(Bits::b2, 4096);
  EXPECT_NEAR(cb[3] * std::sqrt(d), 1.5104, 2e-3);
  EXPECT_NEAR(cb[2] * std::sqrt(d), 0.4528, 2e-3);
}

TEST(Codebook, LloydResidualByQuadrature) {
  for (std::size_t d : {64u, 256u})
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
      const auto cb = make_codebook(b, d);
      EXPECT_LT(quadrature_residual(cb, double(d)), 1e-6) << "b=" << bit_count(b) << " d=" << d;
    }
}

TEST(Codebook, LloydFixedPointMonteCarlo) {
  // 10^6 coordinates drawn as sign * sqrt(Beta(1/2, (d-1)/2)); every cell mean
  // must match its centroid within sampling error
  const double d = 256;
  std::mt19937_64 rng(123);
  std::gamma_distribution<double> ga(0.5, 1.0), gb((d - 1.0) / 2.0, 1.0);
  std::vector<double> ys(1'000'000);
  for (auto& y : ys) {
    const double x = ga(rng), z = gb(rng);
    y = std::sqrt(x / (x + z)) * ((rng() & 1) ? 1.0 : -1.0);
  }
  for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
    const auto cb = make_codebook(b, 256);
    std::vector<double> n(cb.size()), s(cb.size()), s2(cb.size());
    for (double y : ys) {
      const auto k = cb.nearest(y);
      n[k] += 1;
      s[k] += y;
      s2[k] += y * y;
    }
    for (std::size_t k = 0; k < cb.size(); ++k) {
      if (n[k] < 30) continue;
      const double mean = s[k] / n[k];
      const double var = std::max(0.0, s2[k] / n[k] - mean * mean);
      EXPECT_LT(std::abs(mean - cb[k]), 6.0 * std::sqrt(var / n[k]) + 1e-6) << "b=" << bit_count(b) << " cell " << k;
    }
  }
}

TEST(Codebook, RejectsFullPrecision) { EXPECT_THROW(make_codebook(Bits::f32, 16), Error); }

class QuantFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { q_ = new Quantizer(Quantizer::create(256, 42)); }
  static void TearDownTestSuite() { delete q_; }
  static Quantizer* q_;
};
Quantizer* QuantFixture::q_ = nullptr;

TEST_F(QuantFixture, PackingRoundTrip) {
  std::mt19937_64 rng(5);
  for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
    std::vector<std::uint16_t> idx(37);
    for (auto& v : idx) v = static_cast<std::uint16_t>(rng() % (1u << bit_count(b)));
    const auto packed = pack_indices(idx, b);
    EXPECT_EQ(packed.size(), packed_size(b, idx.size()));
    EXPECT_EQ(unpack_indices(packed, b, idx.size()), idx);
  }
}

TEST_F(QuantFixture, PackingLayoutLsbFirst) {
  // two 2-bit indices 1 and 2 -> bits 1,0 then 0,1 -> 0b1001
  const std::vector<std::uint16_t> idx = {1, 2};
  EXPECT_EQ(pack_indices(idx, Bits::b2), std::vector<std::uint8_t>{0x09});
}

TEST_F(QuantFixture, ExactlyRepresentableVector) {
  // x = R^T v with every v_j a centroid reconstructs exactly; the norm of such
  // an x is generally not 1, so the rotated-domain coder is used directly
  const auto& rot = q_->rotation();
  const auto& cb = q_->codebook(Bits::b4);
  std::mt19937_64 rng(11);
  std::vector<double> v(256);
  for (auto& c : v) c = cb[rng() % cb.size()];
  const auto x64 = rot.apply_transpose(std::span<const double>(v));
  const auto qv = detail::code_rotated(rot.apply(std::span<const double>(x64)), rot, cb);
  const auto back = q_->dequantize(qv);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_NEAR(back[i], x64[i], 1e-6);
}

TEST_F(QuantFixture, IdempotentSecondPass) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto x = random_unit(256, rng);
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
      const auto q1 = q_->quantize(x, b);
      const auto y = q_->dequantize(q1);
      const auto q2 = detail::code_rotated(q_->rotation().apply(std::span<const float>(y)), q_->rotation(),
                                           q_->codebook(b));
      EXPECT_EQ(q1, q2);
    }
  }
}

TEST_F(QuantFixture, RequantizeIsDefinitional) {
  std::mt19937_64 rng(4);
  const auto x = random_unit(256, rng);
  const auto q8 = q_->quantize(x, Bits::b8);
  const auto q4 = q_->requantize(q8, Bits::b4);
  const auto y8 = q_->dequantize(q8);
  const auto direct =
      detail::code_rotated(q_->rotation().apply(std::span<const float>(y8)), q_->rotation(), q_->codebook(Bits::b4));
  EXPECT_EQ(q4, direct);
  EXPECT_EQ(q_->requantize(q4, Bits::b4), q4);
  EXPECT_THROW(q_->requantize(q4, Bits::b8), Error);
}

TEST_F(QuantFixture, Preconditions) {
  std::vector<float> x(256, 0.0f);
  x[0] = 2.0f;
  EXPECT_THROW(q_->quantize(x, Bits::b4), Error);
  std::vector<float> wrong(10, 0.0f);
  wrong[0] = 1.0f;
  EXPECT_THROW(q_->quantize(wrong, Bits::b4), Error);
  std::mt19937_64 rng(1);
  auto qv = q_->quantize(random_unit(256, rng), Bits::b4);
  qv.codebook_id ^= 1;
  EXPECT_THROW(q_->dequantize(qv), Error);
}

TEST_F(QuantFixture, FidelityAndNormEnvelope) {
  std::mt19937_64 rng(8);
  std::map<Bits, double> fid, err;
  const int n = 300;
  for (int t = 0; t < n; ++t) {
    const auto x = random_unit(256, rng);
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
      const auto y = q_->dequantize(q_->quantize(x, b));
      const double norm = l2_norm(std::span<const float>(y));
      EXPECT_GE(norm, 0.5);
      EXPECT_LE(norm, 1.5);
      double dot = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) dot += double(x[i]) * y[i];
      fid[b] += dot / norm / n;
      err[b] += mse(x, y) / n;
    }
  }
  EXPECT_GE(fid[Bits::b4], 0.99);
  EXPECT_GE(fid[Bits::b2], 0.75);
  EXPECT_LT(fid[Bits::b2], fid[Bits::b4]);
  EXPECT_LT(fid[Bits::b4], fid[Bits::b8]);
  EXPECT_GT(err[Bits::b2], err[Bits::b4]);
  EXPECT_GT(err[Bits::b4], err[Bits::b8]);
  // 2-bit distortion sits below the sqrt(3 pi / 2) 4^-b envelope
  EXPECT_LE(err[Bits::b2], std::sqrt(3.0 * std::numbers::pi / 2.0) / 16.0);
  // every width sits below the sqrt(3) pi / 2 * 4^-b constant
  for (auto [b, e] : err) EXPECT_LE(e, std::sqrt(3.0) * std::numbers::pi / 2.0 * std::pow(4.0, -bit_count(b)));
}

TEST_F(QuantFixture, PersistenceRoundTrip) {
  engram::test::TempDir dir("quant");
  q_->save(dir.path());
  const auto loaded = Quantizer::load(dir.path());
  EXPECT_EQ(loaded.rotation(), q_->rotation());
  for (auto b : {Bits::b2, Bits::b4, Bits::b8}) EXPECT_EQ(loaded.codebook(b), q_->codebook(b));
  EXPECT_THROW(Quantizer::open_or_create(dir.path(), 128, 42), Error);
}

TEST_F(QuantFixture, CorruptBlobDetected) {
  engram::test::TempDir dir("quantc");
  q_->save(dir.path());
  const auto p = Quantizer::codebook_path(dir.path(), Bits::b4);
  std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(40);
  f.put('\x7f');
  f.close();
  EXPECT_THROW(Quantizer::load(dir.path()), Error);
}
