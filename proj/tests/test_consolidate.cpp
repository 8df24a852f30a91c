#include <gtest/gtest.h>

#include "engram/consolidate.hpp"
#include "support.hpp"

using namespace engram;
using engram::test::at_hours;
using engram::test::random_unit;

TEST(PatternConfidence, HandValues) {
  EXPECT_DOUBLE_EQ(pattern_confidence(10, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(pattern_confidence(10, 0.5), 0.0);
  EXPECT_NEAR(pattern_confidence(20, 0.8), 0.6, 1e-12);
  EXPECT_NEAR(pattern_confidence(5, 0.0), 0.5, 1e-12);
  EXPECT_THROW(pattern_confidence(-1, 0.5), Error);
  EXPECT_THROW(pattern_confidence(1, 1.5), Error);
}

TEST(PatternConfidence, BoundedOnGrid) {
  for (double e = 0; e <= 40; e += 0.5)
    for (double r = 0; r <= 1.0; r += 0.01) {
      const double c = pattern_confidence(e, r);
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
}

TEST(PatternConfidence, SymmetricAndSaturating) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 10000; ++i) {
    const double r = u(rng), e = 30 * u(rng);
    EXPECT_NEAR(pattern_confidence(e, r), pattern_confidence(e, 1 - r), 1e-15);
    EXPECT_LE(pattern_confidence(std::min(e, 9.0), r), pattern_confidence(e, r));
    EXPECT_EQ(pattern_confidence(10 + e, r), pattern_confidence(10, r));
  }
}

namespace {
Pattern pat(std::uint64_t id, double conf, std::uint64_t evidence, std::string subject = "user") {
  return {id, std::move(subject), "predicate " + std::to_string(id), evidence, evidence, 1.0, conf, {}};
}
}  // namespace

TEST(SoftPrompt, ThresholdsAndOrder) {
  const auto sp = generate_soft_prompt({pat(1, 0.69, 50), pat(2, 0.7, 5), pat(3, 0.95, 4), pat(4, 0.9, 10)}, {},
                                       at_hours(0));
  EXPECT_EQ(sp.pattern_ids, (std::vector<std::uint64_t>{4, 2}));
  EXPECT_EQ(sp.text.substr(0, sp.text.find('\n')),
            "Preference: user — predicate 4 (confidence 0.90, 10 observations)");
  EXPECT_EQ(sp.token_estimate, estimate_tokens(sp.text));
  EXPECT_EQ(sp.generated_at, at_hours(0));
}

TEST(SoftPrompt, EmptyWhenNothingQualifies) {
  const auto sp = generate_soft_prompt({pat(1, 0.5, 50)});
  EXPECT_TRUE(sp.text.empty());
  EXPECT_EQ(sp.token_estimate, 0u);
}

TEST(SoftPrompt, CapKeepsWholeLines) {
  std::vector<Pattern> ps;
  for (std::uint64_t i = 1; i <= 400; ++i) ps.push_back(pat(i, 0.7 + 0.25 * double(i % 13) / 13.0, 5 + i % 7));
  const auto sp = generate_soft_prompt(ps);
  EXPECT_LE(sp.token_estimate, 1500u);
  EXPECT_LT(sp.pattern_ids.size(), 400u);
  std::size_t lines = 1 + static_cast<std::size_t>(std::count(sp.text.begin(), sp.text.end(), '\n'));
  EXPECT_EQ(lines, sp.pattern_ids.size());
  // one more line would not fit
  std::map<std::uint64_t, Pattern> by_id;
  for (const auto& p : ps) by_id[p.id] = p;
  std::vector<Pattern> sorted = ps;
  std::sort(sorted.begin(), sorted.end(), [](const Pattern& a, const Pattern& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.evidence != b.evidence) return a.evidence > b.evidence;
    return a.predicate < b.predicate;
  });
  const auto& next = sorted[sp.pattern_ids.size()];
  EXPECT_GT(estimate_tokens(sp.text + "\n" + render_pattern(next)), 1500u);
  EXPECT_EQ(sp.pattern_ids.front(), sorted.front().id);
}

TEST(SoftPrompt, TokenEstimateCountsCodePoints) {
  EXPECT_EQ(estimate_tokens("abcd"), 1u);
  EXPECT_EQ(estimate_tokens("abcde"), 2u);
  EXPECT_EQ(estimate_tokens("\xc3\xa9\xc3\xa9\xc3\xa9\xc3\xa9"), 1u);
  EXPECT_EQ(estimate_tokens(""), 0u);
}

class ConsolidateTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { quant_ = Quantizer::create(32, 3); }
  MemoryId put(const std::vector<float>& v, const std::string& text, Lifecycle state = Lifecycle::warm) {
    MemoryRecord m;
    m.text = text;
    const auto id = store_.put_memory(m, v, at_hours(0));
    auto r = store_.get_memory(id);
    r.lifecycle = state;
    store_.update_memory(r);
    return id;
  }
  static std::vector<float> near(const std::vector<float>& v, std::mt19937_64& rng, double eps) {
    const auto n = random_unit(v.size(), rng);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + eps * n[i];
    return unit_float(std::span<const double>(out));
  }
  engram::test::TempDir dir_{"consolidate"};
  Store store_{dir_ / "memory.db", 32};
  static inline Quantizer quant_;
  std::mt19937_64 rng_{17};
};

TEST_F(ConsolidateTest, NearDuplicatesFormOneGist) {
  const auto base = random_unit(32, rng_);
  const auto a = put(base, "the cat sat");
  const auto b = put(near(base, rng_, 0.1), "a cat sat");
  put(random_unit(32, rng_), "unrelated");
  const auto created = consolidate_pass(store_, quant_);
  ASSERT_EQ(created.size(), 1u);
  EXPECT_EQ(created[0].member_ids, (std::vector<MemoryId>{a, b}));
  EXPECT_EQ(created[0].summary_text, "the cat sat a cat sat");
  EXPECT_NEAR(l2_norm(std::span<const float>(created[0].embedding)), 1.0, 1e-6);
  EXPECT_EQ(store_.gists().size(), 1u);
}

TEST_F(ConsolidateTest, OrthogonalGivesNothing) {
  std::vector<float> e1(32, 0.0f), e2(32, 0.0f);
  e1[0] = 1.0f;
  e2[1] = 1.0f;
  put(e1, "one");
  put(e2, "two");
  EXPECT_TRUE(consolidate_pass(store_, quant_).empty());
}

TEST_F(ConsolidateTest, Idempotent) {
  const auto base = random_unit(32, rng_);
  put(base, "x");
  put(near(base, rng_, 0.1), "y");
  EXPECT_EQ(consolidate_pass(store_, quant_).size(), 1u);
  const auto before = store_.gists();
  EXPECT_TRUE(consolidate_pass(store_, quant_).empty());
  const auto after = store_.gists();
  ASSERT_EQ(after.size(), before.size());
  EXPECT_EQ(after[0].id, before[0].id);
  EXPECT_EQ(after[0].member_ids, before[0].member_ids);
}

TEST_F(ConsolidateTest, ActiveMemoriesIgnoredAndGrowthReplacesSubset) {
  const auto base = random_unit(32, rng_);
  const auto a = put(base, "x");
  const auto b = put(near(base, rng_, 0.1), "y");
  const auto c = put(near(base, rng_, 0.1), "z", Lifecycle::active);
  EXPECT_EQ(consolidate_pass(store_, quant_)[0].member_ids, (std::vector<MemoryId>{a, b}));
  auto r = store_.get_memory(c);
  r.lifecycle = Lifecycle::cold;
  store_.update_memory(r);
  const auto grown = consolidate_pass(store_, quant_);
  ASSERT_EQ(grown.size(), 1u);
  EXPECT_EQ(grown[0].member_ids, (std::vector<MemoryId>{a, b, c}));
  ASSERT_EQ(store_.gists().size(), 1u);
}

TEST_F(ConsolidateTest, ObservePatternAccumulates) {
  Pattern p;
  for (int i = 0; i < 10; ++i) p = observe_pattern(store_, "user", "likes tea", i < 8);
  EXPECT_EQ(p.evidence, 10u);
  EXPECT_EQ(p.agree, 8u);
  EXPECT_NEAR(p.confidence, 0.6, 1e-12);
  EXPECT_EQ(store_.find_pattern("user", "likes tea")->confidence, p.confidence);
  EXPECT_THROW(observe_pattern(store_, "", "x", true), Error);
}
