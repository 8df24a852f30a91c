#include <gtest/gtest.h>

#include "engram/forgetting.hpp"
#include "support.hpp"

using namespace engram;
using engram::test::at_hours;
using engram::test::random_unit;

namespace {

MemoryRecord rec(std::uint64_t a, double imp, std::uint32_t conf, double emo) {
  MemoryRecord m;
  m.access_count = a;
  m.importance = imp;
  m.confirmations = conf;
  m.emotion = emo;
  return m;
}

}  // namespace

TEST(Strength, FloorCase) { EXPECT_EQ(strength(rec(0, 0, 0, 0), {}), 1.0); }

TEST(Strength, AccessTermHandValue) {
  ForgettingParams p;
  EXPECT_NEAR(strength(rec(30, 0, 0, 0), p), 2.0 * std::log(31.0), 1e-12);
  EXPECT_NEAR(2.0 * std::log(31.0), 6.868, 1e-3);
}

TEST(Strength, BenchGroups) {
  // 31 accesses, importance 0.7, 3 confirmations; 11 accesses, 0.4, 1; 1 access, 0.2
  ForgettingParams p;
  EXPECT_NEAR(strength(rec(31, 0.7, 3, 0), p), 2 * std::log(32.0) + 0.7 + 3, 1e-12);
  EXPECT_NEAR(strength(rec(11, 0.4, 1, 0), p), 2 * std::log(12.0) + 0.4 + 1, 1e-12);
  EXPECT_NEAR(strength(rec(1, 0.2, 0, 0), p), 2 * std::log(2.0) + 0.2, 1e-12);
}

TEST(Strength, SpacingEffect) {
  ForgettingParams p;
  double prev_gain = 1e9;
  for (std::uint64_t a = 1; a < 200; ++a) {
    const double gain = strength(rec(a + 1, 0.5, 0, 0), p) - strength(rec(a, 0.5, 0, 0), p);
    EXPECT_LT(gain, prev_gain);
    EXPECT_GT(gain, 0.0);
    prev_gain = gain;
  }
}

TEST(Retention, TableValues) {
  EXPECT_NEAR(retention(11.28, 12), 0.345, 1e-3);
  EXPECT_NEAR(retention(6.67, 12), 0.165, 1e-3);
  EXPECT_EQ(retention(5.0, 0), 1.0);
  EXPECT_NEAR(half_life(11.28), 7.8, 0.05);
  EXPECT_NEAR(half_life(6.67), 4.6, 0.05);
  EXPECT_NEAR(half_life(11.28), 11.28 * std::log(2.0), 1e-12);
}

TEST(Retention, StrictlyDecreasing) {
  double prev = 2.0;
  for (double t = 0; t < 100; t += 0.5) {
    EXPECT_LT(retention(7.0, t), prev);
    prev = retention(7.0, t);
  }
}

TEST(Lifecycle, Boundaries) {
  EXPECT_EQ(classify(0.81), Lifecycle::active);
  EXPECT_EQ(classify(0.80), Lifecycle::warm);
  EXPECT_EQ(classify(0.5), Lifecycle::cold);
  EXPECT_EQ(classify(0.345), Lifecycle::cold);
  EXPECT_EQ(classify(0.2), Lifecycle::archive);
  EXPECT_EQ(classify(0.05), Lifecycle::forgotten);
  EXPECT_EQ(precision_for(Lifecycle::active), Bits::f32);
  EXPECT_EQ(precision_for(Lifecycle::warm), Bits::b8);
  EXPECT_EQ(precision_for(Lifecycle::cold), Bits::b4);
  EXPECT_EQ(precision_for(Lifecycle::archive), Bits::b2);
  EXPECT_FALSE(precision_for(Lifecycle::forgotten));
}

TEST(Trust, EffectiveRate) {
  EXPECT_EQ(effective_rate(0.1, 1.0), 0.1);
  EXPECT_DOUBLE_EQ(effective_rate(0.1, 0.0), 0.3);
  EXPECT_DOUBLE_EQ(effective_rate(0.1, 0.5), 0.2);
  double prev = 0;
  for (double tau = 0; tau <= 1.0; tau += 0.1) {
    const double r = trusted_retention(8.0, 12.0, tau);
    EXPECT_GT(r, prev);
    prev = r;
  }
}

class DecayFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    store_ = std::make_unique<Store>(dir_ / "memory.db", 32);
  }
  static void SetUpTestSuite() { quant_ = Quantizer::create(32, 1); }
  MemoryId put(double imp, std::uint32_t conf, Timestamp t, const std::string& agent = "local") {
    MemoryRecord m;
    m.text = "memory " + std::to_string(n_++);
    m.importance = imp;
    m.confirmations = conf;
    m.source_agent = agent;
    return store_->put_memory(m, random_unit(32, rng_), t);
  }
  engram::test::TempDir dir_{"decay"};
  std::unique_ptr<Store> store_;
  static inline Quantizer quant_;
  std::mt19937_64 rng_{5};
  int n_ = 0;
};

TEST_F(DecayFixture, FreshMemoryStaysActive) {
  const auto id = put(0.5, 0, at_hours(0));
  const auto rep = decay_pass(*store_, quant_, at_hours(0), {});
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_EQ(rep.entries[0].new_r, 1.0);
  EXPECT_EQ(rep.entries[0].new_state, Lifecycle::active);
  EXPECT_EQ(rep.entries[0].new_bits, 32);
  EXPECT_EQ(rep.changed(), 0u);
  EXPECT_EQ(store_->get_embedding(id)->bits, Bits::f32);
}

TEST_F(DecayFixture, DemotionsRequantize) {
  const auto id = put(0.0, 0, at_hours(0));
  const double s = 2 * std::log(2.0);
  // pick a time inside the cold band: R = 0.3
  const auto t = at_hours(-s * std::log(0.3));
  const auto rep = decay_pass(*store_, quant_, t, {});
  EXPECT_EQ(rep.entries[0].new_state, Lifecycle::cold);
  EXPECT_EQ(store_->get_embedding(id)->bits, Bits::b4);
  EXPECT_EQ(store_->get_memory(id).lifecycle, Lifecycle::cold);
  EXPECT_TRUE(store_->verify().empty());
}

TEST_F(DecayFixture, NeverPromotes) {
  std::vector<MemoryId> ids;
  for (int i = 0; i < 20; ++i) ids.push_back(put(0.05 * i, i % 4, at_hours(0)));
  std::map<MemoryId, int> bits;
  for (double h : {1.0, 2.0, 3.5, 5.0, 8.0, 13.0}) {
    decay_pass(*store_, quant_, at_hours(h), {});
    for (auto id : ids) {
      const auto e = store_->get_embedding(id);
      const int b = e ? bit_count(e->bits) : 0;
      if (bits.count(id)) EXPECT_LE(b, bits[id]);
      bits[id] = b;
    }
  }
}

TEST_F(DecayFixture, ForgottenDropsEmbeddingThenCollected) {
  const auto id = put(0.0, 0, at_hours(0));
  auto rep = decay_pass(*store_, quant_, at_hours(100), {});
  EXPECT_EQ(rep.entries[0].new_state, Lifecycle::forgotten);
  EXPECT_FALSE(store_->get_embedding(id));
  EXPECT_TRUE(store_->exists(id));
  ScanFilter f;
  f.lifecycles = std::set<Lifecycle>{Lifecycle::forgotten};
  EXPECT_EQ(store_->scan(f).size(), 1u);
  EXPECT_TRUE(store_->verify().empty());
  rep = decay_pass(*store_, quant_, at_hours(101), {});
  EXPECT_EQ(rep.collected, 1u);
  EXPECT_FALSE(store_->exists(id));
}

TEST_F(DecayFixture, ScanForgottenMatchesReport) {
  for (int i = 0; i < 3; ++i) put(0.0, 0, at_hours(0));
  for (int i = 0; i < 4; ++i) put(1.0, 10, at_hours(0));
  const auto rep = decay_pass(*store_, quant_, at_hours(20), {});
  std::set<MemoryId> forgotten;
  for (const auto& e : rep.entries)
    if (e.new_state == Lifecycle::forgotten) forgotten.insert(e.id);
  EXPECT_EQ(forgotten.size(), 3u);
  ScanFilter f;
  f.lifecycles = std::set<Lifecycle>{Lifecycle::forgotten};
  std::set<MemoryId> scanned;
  for (const auto& m : store_->scan(f)) scanned.insert(m.id);
  EXPECT_EQ(scanned, forgotten);
}

TEST_F(DecayFixture, LowTrustDecaysFaster) {
  store_->set_trust("rumor", 0.0);
  const auto trusted = put(0.5, 0, at_hours(0));
  const auto rumor = put(0.5, 0, at_hours(0), "rumor");
  const auto rep = decay_pass(*store_, quant_, at_hours(2), {});
  std::map<MemoryId, DecayEntry> e;
  for (const auto& x : rep.entries) e[x.id] = x;
  EXPECT_DOUBLE_EQ(e[rumor].lambda_eff, 3.0 * e[trusted].lambda_eff);
  EXPECT_LT(e[rumor].new_r, e[trusted].new_r);
}

TEST_F(DecayFixture, ReportJsonl) {
  put(0.5, 0, at_hours(0));
  const auto rep = decay_pass(*store_, quant_, at_hours(3), {});
  std::ostringstream out;
  rep.write_jsonl(out);
  std::istringstream in(out.str());
  std::string head, line;
  std::getline(in, head);
  std::getline(in, line);
  EXPECT_EQ(nlohmann::json::parse(head)["kind"], "decay_pass");
  const auto j = nlohmann::json::parse(line);
  EXPECT_TRUE(j.contains("new_state"));
  EXPECT_TRUE(j.contains("strength"));
}

TEST(Params, Validation) {
  ForgettingParams p;
  p.s_min = 0;
  EXPECT_THROW(p.validate(), Error);
}

namespace {

// Kolmogorov-Smirnov distance between samples and the normalized density
// exp(-V/T) integrated on a fine grid.
double ks_against_grid(std::vector<double> xs, const LangevinConfig& c) {
  std::sort(xs.begin(), xs.end());
  const double lo = xs.front() - 1.0, hi = xs.back() + 1.0;
  const int n = 200000;
  const double h = (hi - lo) / n;
  std::vector<double> cdf(n + 1, 0.0);
  double prev = std::exp(-langevin_potential(c, lo) / c.temperature);
  for (int i = 1; i <= n; ++i) {
    const double cur = std::exp(-langevin_potential(c, lo + i * h) / c.temperature);
    cdf[i] = cdf[i - 1] + 0.5 * (prev + cur) * h;
    prev = cur;
  }
  const double z = cdf[n];
  double worst = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const double pos = (xs[k] - lo) / h;
    const auto i = std::min<std::size_t>(static_cast<std::size_t>(pos), n - 1);
    const double f = (cdf[i] + (cdf[i + 1] - cdf[i]) * (pos - double(i))) / z;
    worst = std::max({worst, std::abs(f - double(k) / xs.size()), std::abs(f - double(k + 1) / xs.size())});
  }
  return worst;
}

}  // namespace

TEST(Langevin, StationaryDensity) {
  for (double lambda : {0.0, 0.5, 2.0}) {
    LangevinConfig c;
    c.lambda = lambda;
    c.steps = 200'000;
    c.seed = 17;
    const auto xs = langevin_sim(c);
    EXPECT_LT(ks_against_grid(xs, c), 0.02) << "lambda=" << lambda;
  }
}

TEST(Langevin, MeanMovesTowardForgettingMinimum) {
  double prev = -1.0;
  for (double lambda : {0.0, 0.5, 2.0, 8.0}) {
    LangevinConfig c;
    c.lambda = lambda;
    c.steps = 100'000;
    c.seed = 3;
    const auto xs = langevin_sim(c);
    const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    // closed form: (k_u mu_u + lambda k_f mu_f) / (k_u + lambda k_f)
    EXPECT_NEAR(mean, lambda / (1.0 + lambda), 0.05);
    EXPECT_GT(mean, prev);
    prev = mean;
  }
}

TEST(Langevin, DeterministicAndValidated) {
  LangevinConfig c;
  c.steps = 1000;
  EXPECT_EQ(langevin_sim(c), langevin_sim(c));
  EXPECT_EQ(langevin_sim(c).size(), 1000u);
  c.dt = 0;
  EXPECT_THROW(langevin_sim(c), Error);
  c.dt = 5.0;  // unstable step
  c.k_u = 10;
  EXPECT_THROW(langevin_sim(c), Error);
}
