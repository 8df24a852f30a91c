#include <gtest/gtest.h>

#include "engram/bench.hpp"
#include "support.hpp"

using namespace engram;
using namespace engram::bench;

TEST(Corpus, DeterministicAndUnique) {
  const auto a = make_corpus(300, 42), b = make_corpus(300, 42), c = make_corpus(300, 43);
  EXPECT_EQ(a.facts, b.facts);
  EXPECT_NE(a.facts, c.facts);
  EXPECT_EQ(std::set<std::string>(a.facts.begin(), a.facts.end()).size(), 300u);
  ASSERT_EQ(a.topic.size(), 300u);
  ASSERT_EQ(a.entities.size(), 300u);
  for (std::size_t i = 0; i < a.facts.size(); ++i) {
    EXPECT_LT(a.topic[i], 40u);
    ASSERT_EQ(a.entities[i].size(), 1u);
    EXPECT_NE(a.facts[i].find(a.entities[i][0]), std::string::npos);
  }
}

TEST(Corpus, SameTopicFactsAreCloser) {
  const auto c = make_corpus(400, 5);
  double same = 0, diff = 0;
  std::size_t ns = 0, nd = 0;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t j = i + 1; j < 100; ++j) {
      const double s = cosine(test_embedder(c.facts[i], 128, 1), test_embedder(c.facts[j], 128, 1));
      if (c.topic[i] == c.topic[j]) same += s, ++ns;
      else diff += s, ++nd;
    }
  ASSERT_GT(ns, 0u);
  EXPECT_GT(same / ns, diff / nd);
}

TEST(Paraphrase, KeepsAtLeastHalf) {
  std::mt19937_64 rng(1);
  const auto c = make_corpus(50, 9);
  for (const auto& f : c.facts) {
    const auto p = paraphrase(f, rng);
    EXPECT_NE(p, f);
    const auto orig = tokenize(f), para = tokenize(p);
    EXPECT_GE(para.size(), orig.size() / 2 + 2);
  }
}

TEST(Report, RowsAndOverall) {
  Report r{"demo", {}, {}};
  r.add("info", 3.0);
  r.add("good", 1.0, ">= 1", true);
  EXPECT_TRUE(r.passed());
  r.add("bad", 0.0, ">= 1", false);
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.row("good").value, 1.0);
  EXPECT_THROW(r.row("missing"), Error);
  std::ostringstream jl, table;
  r.write_jsonl(jl);
  r.write_table(table);
  std::istringstream in(jl.str());
  std::string line;
  std::vector<nlohmann::json> rows;
  while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[0]["pass"].is_null());
  EXPECT_EQ(rows[2]["pass"], false);
  EXPECT_EQ(rows[1]["bench"], "demo");
  EXPECT_NE(table.str().find("overall: FAIL"), std::string::npos);
}

TEST(Bench, SmallFrqadRun) {
  const auto r = bench_frqad({200, 5, 64, 3});
  EXPECT_EQ(r.row("pairs").value, 1000.0);
  EXPECT_EQ(r.row("frqad_pref_f32_pct").value, 100.0);
  EXPECT_GT(r.row("mean_4bit_fidelity").value, 0.98);
}

TEST(Bench, SmallMixedRecallRun) {
  const auto r = bench_mixed_recall({200, 5, 64, 3, 10});
  EXPECT_EQ(r.row("baseline_recall_at_10").value, 1.0);
  EXPECT_EQ(r.row("facts_f32").value + r.row("facts_4bit").value + r.row("facts_2bit").value, 200.0);
  EXPECT_GT(r.row("fidelity_4bit").value, r.row("fidelity_2bit").value);
}

TEST(Bench, ForgettingGroupsSeparate) {
  engram::test::TempDir dir("bench-forgetting");
  ForgettingOptions o;
  o.dir = dir / "store";
  const auto r = bench_forgetting(o);
  EXPECT_GT(r.row("mean_S_hot").value, r.row("mean_S_warm").value);
  EXPECT_GT(r.row("mean_S_warm").value, r.row("mean_S_cold").value);
  EXPECT_LE(r.row("retention_self_consistency_err").value, 1e-9);
}

TEST(Bench, ContinuityAcrossProcesses) {
  engram::test::TempDir dir("bench-continuity");
  ContinuityOptions o;
  o.n = 5;
  o.dim = 128;
  o.dir = dir / "store";
  const auto r = bench_continuity(o);
  EXPECT_EQ(r.row("writer_exit_code").value, 0.0);
  EXPECT_EQ(r.row("reader_exit_code").value, 0.0);
  EXPECT_EQ(r.row("recalled").value, 5.0);
}
