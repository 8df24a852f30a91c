#pragma once

// Deterministic desk-scale benchmarks. Each emits JSONL rows
// {bench, metric, value, target, pass} and a human-readable table.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <ostream>

#include "engram/engine.hpp"

namespace engram::bench {

struct Row {
  std::string bench;
  std::string metric;
  double value = 0.0;
  std::string target;  // empty: informational
  std::optional<bool> pass;
};

struct Report {
  std::string name;
  std::vector<Row> rows;
  std::vector<std::string> notes;

  void add(std::string metric, double value, std::string target = {}, std::optional<bool> pass = std::nullopt) {
    rows.push_back({name, std::move(metric), value, std::move(target), pass});
  }
  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const Row& r) { return r.pass.value_or(true); });
  }
  const Row& row(std::string_view metric) const {
    for (const auto& r : rows)
      if (r.metric == metric) return r;
    throw Error(Errc::invalid_argument, "no metric " + std::string(metric));
  }

  void write_jsonl(std::ostream& out) const {
    for (const auto& r : rows) {
      nlohmann::json j{{"bench", r.bench}, {"metric", r.metric}, {"value", r.value}};
      j["target"] = r.target.empty() ? nlohmann::json(nullptr) : nlohmann::json(r.target);
      j["pass"] = r.pass ? nlohmann::json(*r.pass) : nlohmann::json(nullptr);
      out << j.dump() << '\n';
    }
  }

  void write_table(std::ostream& out) const {
    char buf[256];
    out << "== " << name << " ==\n";
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "  %-34s %14.6g  %-14s %s\n", r.metric.c_str(), r.value, r.target.c_str(),
                    r.pass ? (*r.pass ? "PASS" : "FAIL") : "");
      out << buf;
    }
    for (const auto& n : notes) out << "  note: " << n << '\n';
    out << "  overall: " << (passed() ? "PASS" : "FAIL") << '\n';
  }
};

// ---- synthetic corpus ----

/// Short English-like facts: fixed function-word frames around topical
/// content words, so unrelated facts still share a sizeable token overlap
/// (as sentence embeddings of real text do) while facts of one topic share
/// content words as well.
struct Corpus {
  std::vector<std::string> facts;
  std::vector<std::size_t> topic;
  std::vector<std::vector<std::string>> entities;
};

namespace detail {

inline std::string pseudo_word(std::mt19937_64& rng) {
  static constexpr std::array<const char*, 20> on = {"b", "c", "d", "f", "g", "h", "k", "l", "m", "n",
                                                     "p", "r", "s", "t", "v", "z", "br", "st", "tr", "pl"};
  static constexpr std::array<const char*, 8> nu = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  std::string w;
  const int syl = 2 + static_cast<int>(rng() % 2);
  for (int i = 0; i < syl; ++i) {
    w += on[rng() % on.size()];
    w += nu[rng() % nu.size()];
  }
  return w;
}

inline std::vector<std::string> unique_words(std::mt19937_64& rng, std::size_t n, std::set<std::string>& used) {
  std::vector<std::string> out;
  while (out.size() < n) {
    auto w = pseudo_word(rng);
    if (used.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& v) {
  return v[rng() % v.size()];
}

}  // namespace detail

inline Corpus make_corpus(std::size_t n_facts, std::uint64_t seed, std::size_t n_topics = 40) {
  std::mt19937_64 rng(splitmix64(seed ^ 0xC0FFEEULL));
  std::set<std::string> used;
  struct Topic {
    std::vector<std::string> subjects, places, things;
  };
  std::vector<Topic> topics(n_topics);
  for (auto& t : topics) {
    t.subjects = detail::unique_words(rng, 4, used);
    t.places = detail::unique_words(rng, 3, used);
    t.things = detail::unique_words(rng, 6, used);
  }
  const auto verbs = detail::unique_words(rng, 30, used);
  const auto adjectives = detail::unique_words(rng, 40, used);
  const auto general = detail::unique_words(rng, 400, used);

  static const std::vector<std::string> frames = {
      "the {S} {V} the {T} of the {P} and it is {A} in the {G}",
      "in the {P} the {S} {V} a {T} that is {A} for the {G}",
      "the {T} of the {S} is {A} and it was in the {P} with the {G}",
      "it is {A} that the {S} {V} the {T} at the {P} of the {G}",
      "the {S} was in the {P} and the {T} is {A} to the {G}",
  };
  Corpus c;
  std::set<std::string> seen;
  while (c.facts.size() < n_facts) {
    const std::size_t ti = rng() % n_topics;
    const auto& t = topics[ti];
    const auto& s = detail::pick(rng, t.subjects);
    std::string out = detail::pick(rng, frames);
    auto fill = [&](const std::string& slot, const std::string& word) {
      for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot)) out.replace(pos, slot.size(), word);
    };
    fill("{S}", s);
    fill("{V}", detail::pick(rng, verbs));
    fill("{T}", detail::pick(rng, t.things));
    fill("{P}", detail::pick(rng, t.places));
    fill("{A}", detail::pick(rng, adjectives));
    fill("{G}", detail::pick(rng, general));
    out = "the user said " + out;
    if (!seen.insert(out).second) continue;
    c.facts.push_back(out);
    c.topic.push_back(ti);
    c.entities.push_back({s});
  }
  return c;
}

/// Keeps roughly `keep` of the tokens of text (at least half), drops the
/// rest and appends a few new function words.
inline std::string paraphrase(const std::string& text, std::mt19937_64& rng, double keep = 0.7) {
  auto toks = tokenize(text);
  std::vector<std::string> kept;
  for (const auto& t : toks)
    if (std::uniform_real_distribution<double>(0, 1)(rng) < keep) kept.push_back(t);
  while (kept.size() * 2 < toks.size()) kept.push_back(toks[kept.size()]);
  static const std::vector<std::string> extra = {"so", "what", "about", "tell", "me", "which"};
  std::string out = detail::pick(rng, extra) + " " + detail::pick(rng, extra);
  for (const auto& t : kept) out += " " + t;
  return out;
}

// ---- frqad ----

struct FrqadOptions {
  std::size_t n_facts = 943;
  std::size_t n_queries = 20;
  std::uint32_t dim = 768;
  std::uint64_t seed = 42;
};

inline Report bench_frqad(const FrqadOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep{"frqad", {}, {}};
  const auto corpus = make_corpus(o.n_facts, o.seed);
  const auto quant = Quantizer::create(o.dim, o.seed);
  const double var = 1.0 / o.dim;
  std::vector<std::vector<float>> f32(o.n_facts), f4(o.n_facts);
  double mse_total = 0.0, fidelity = 0.0;
  for (std::size_t i = 0; i < o.n_facts; ++i) {
    f32[i] = test_embedder(corpus.facts[i], o.dim, o.seed);
    f4[i] = quant.dequantize(quant.quantize(f32[i], Bits::b4));
    double se = 0.0;
    for (std::size_t k = 0; k < o.dim; ++k) se += (f32[i][k] - f4[i][k]) * double(f32[i][k] - f4[i][k]);
    mse_total += se;
    fidelity += cosine(f32[i], f4[i]);
  }
  std::mt19937_64 rng(splitmix64(o.seed + 1));
  std::size_t pairs = 0, pref_cos = 0, pref_fr = 0, pref_frqad = 0, negative = 0;
  double degradation = 0.0;
  for (std::size_t qi = 0; qi < o.n_queries; ++qi) {
    const auto q = test_embedder(paraphrase(corpus.facts[rng() % o.n_facts], rng), o.dim, o.seed);
    const PrecisionGaussian qg{q, var, Bits::f32};
    for (std::size_t i = 0; i < o.n_facts; ++i) {
      ++pairs;
      const double c32 = cosine(q, f32[i]), c4 = cosine(q, f4[i]);
      if (c32 < 0) ++negative;
      degradation += c32 - c4;
      if (c32 > c4) ++pref_cos;
      // equal-variance Fisher-Rao ignores precision: both copies at sigma^2_obs
      const PrecisionGaussian a{f32[i], var, Bits::f32}, b{f4[i], var, Bits::f32};
      if (fr_simplified(qg, a) < fr_simplified(qg, b)) ++pref_fr;
      const PrecisionGaussian a2{f32[i], var, Bits::f32}, b2{f4[i], var, Bits::b4};
      if (frqad(qg, a2) < frqad(qg, b2)) ++pref_frqad;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double pc = 100.0 * pref_cos / pairs, pf = 100.0 * pref_fr / pairs, pq = 100.0 * pref_frqad / pairs;
  const double bound = std::sqrt(3.0 * std::numbers::pi / 2.0) * std::pow(4.0, -4);
  const double mse = mse_total / o.n_facts;
  rep.add("pairs", double(pairs), ">= 10000", pairs >= 10000);
  rep.add("frqad_pref_f32_pct", pq, "== 100", pref_frqad == pairs);
  rep.add("cosine_pref_f32_pct", pc, "[70, 100)", pc >= 70.0 && pc < 100.0);
  rep.add("fr_equal_var_pref_f32_pct", pf);
  rep.add("mean_4bit_mse", mse, "<= " + std::to_string(bound), mse <= bound);
  rep.add("mean_4bit_mse_per_coord", mse / o.dim);
  rep.add("mean_4bit_fidelity", fidelity / o.n_facts);
  rep.add("mean_cosine_degradation", degradation / pairs);
  rep.add("negative_cosine_pairs", double(negative));
  rep.add("dim", o.dim);
  rep.add("seconds", secs);
  rep.notes.push_back("embeddings come from the deterministic token embedder, not a sentence model");
  return rep;
}

// ---- mixed-precision recall ----

struct MixedRecallOptions {
  std::size_t n_facts = 929;
  std::size_t n_queries = 20;
  std::uint32_t dim = 768;
  std::uint64_t seed = 42;
  std::size_t k = 10;
};

inline Report bench_mixed_recall(const MixedRecallOptions& o) {
  Report rep{"mixed_recall", {}, {}};
  const auto corpus = make_corpus(o.n_facts, o.seed);
  const auto quant = Quantizer::create(o.dim, o.seed);
  std::vector<std::size_t> order(o.n_facts);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(splitmix64(o.seed + 2));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n32 = o.n_facts / 2, n4 = o.n_facts * 3 / 10;
  std::vector<Snapshot::Item> base, mixed;
  double fid4 = 0.0, fid2 = 0.0;
  std::size_t c4 = 0, c2 = 0;
  for (std::size_t r = 0; r < o.n_facts; ++r) {
    const std::size_t i = order[r];
    Snapshot::Item it;
    it.rec.id = i + 1;
    it.rec.text = corpus.facts[i];
    it.has_embedding = true;
    it.base_variance = 1.0 / o.dim;
    it.vec = test_embedder(corpus.facts[i], o.dim, o.seed);
    base.push_back(it);
    if (r >= n32) {
      const Bits b = r < n32 + n4 ? Bits::b4 : Bits::b2;
      auto deq = quant.dequantize(quant.quantize(it.vec, b));
      (b == Bits::b4 ? fid4 : fid2) += cosine(it.vec, deq);
      ++(b == Bits::b4 ? c4 : c2);
      it.vec = std::move(deq);
      it.bits = b;
    }
    mixed.push_back(std::move(it));
  }
  const auto sb = Snapshot::from_items(o.dim, std::move(base));
  const auto sm = Snapshot::from_items(o.dim, std::move(mixed));
  double recall_mixed = 0.0, recall_base = 0.0;
  for (std::size_t qi = 0; qi < o.n_queries; ++qi) {
    Query q;
    q.text = paraphrase(corpus.facts[rng() % o.n_facts], rng);
    q.embedding = test_embedder(q.text, o.dim, o.seed);
    const auto truth = ch_semantic(*sb, q, o.k);
    const auto got = ch_semantic(*sm, q, o.k);
    std::set<MemoryId> t;
    for (const auto& h : truth.hits) t.insert(h.id);
    std::size_t hit = 0;
    for (const auto& h : got.hits) hit += t.count(h.id);
    recall_mixed += double(hit) / o.k;
    recall_base += 1.0;  // the baseline ranking against itself
  }
  recall_mixed /= o.n_queries;
  recall_base /= o.n_queries;
  rep.add("baseline_recall_at_10", recall_base, "== 1", recall_base == 1.0);
  rep.add("fidelity_4bit", fid4 / c4, ">= 0.99", fid4 / c4 >= 0.99);
  rep.add("fidelity_2bit", fid2 / c2, ">= 0.75", fid2 / c2 >= 0.75);
  rep.add("mixed_recall_at_10", recall_mixed, ">= 0.6", recall_mixed >= 0.6);
  rep.add("facts_f32", double(n32));
  rep.add("facts_4bit", double(c4));
  rep.add("facts_2bit", double(c2));
  rep.notes.push_back("ranking is exact cosine over dequantized embeddings; baseline is the all-f32 store");
  return rep;
}

// ---- forgetting ----

struct ForgettingOptions {
  int days = 30;
  std::size_t hot = 20, warm = 50, cold = 100;
  std::uint64_t seed = 42;
  std::uint32_t dim = 64;
  std::filesystem::path dir;  // empty: a fresh temporary directory
};

struct GroupSpec {
  const char* name;
  std::size_t count;
  double importance;
  std::uint32_t confirmations;
  int every_days;  // 0: only the initial write
};

inline Report bench_forgetting(const ForgettingOptions& o) {
  Report rep{"forgetting", {}, {}};
  auto dir = o.dir.empty() ? std::filesystem::temp_directory_path() /
                                 ("engram-bench-forgetting-" + std::to_string(::getpid()) + "-" + std::to_string(o.seed))
                           : o.dir;
  std::filesystem::remove_all(dir);
  Config cfg;
  cfg.dim = o.dim;
  cfg.seed = o.seed;
  Engine eng(dir, cfg);
  const Timestamp t0 = parse_rfc3339("2025-01-01T00:00:00Z");
  const std::array<GroupSpec, 3> groups = {GroupSpec{"hot", o.hot, 0.7, 3, 1}, GroupSpec{"warm", o.warm, 0.4, 1, 3},
                                           GroupSpec{"cold", o.cold, 0.2, 0, 0}};
  const auto corpus = make_corpus(o.hot + o.warm + o.cold, o.seed);
  std::map<std::string, std::vector<MemoryId>> ids;
  std::size_t next = 0;
  for (const auto& g : groups)
    for (std::size_t i = 0; i < g.count; ++i) {
      RememberArgs a;
      a.text = corpus.facts[next++];
      a.importance = g.importance;
      a.confirmations = g.confirmations;
      ids[g.name].push_back(eng.remember(a, t0));
    }
  // accesses on the schedule; the initial write counts as the day-0 access
  for (int day = 1; day <= o.days; ++day)
    for (const auto& g : groups)
      if (g.every_days && day % g.every_days == 0)
        for (auto id : ids[g.name]) eng.store().touch(id, t0 + std::chrono::hours(24 * day));
  const Timestamp now = t0 + std::chrono::hours(24 * o.days + 12);
  const auto report = eng.decay(now);
  std::map<MemoryId, DecayEntry> by_id;
  for (const auto& e : report.entries) by_id[e.id] = e;

  std::map<std::string, double> mean_s, mean_r;
  std::map<std::string, std::map<int, std::size_t>> tiers;
  double worst_self = 0.0;
  for (const auto& g : groups) {
    double s = 0.0, r = 0.0;
    for (auto id : ids[g.name]) {
      const auto& e = by_id.at(id);
      s += e.strength;
      r += e.new_r;
      ++tiers[g.name][e.new_bits];
      const auto m = eng.store().get_memory(id);
      worst_self = std::max(worst_self, std::abs(e.new_r - std::exp(-hours_between(m.last_access_time, now) / e.strength)));
    }
    mean_s[g.name] = s / g.count;
    mean_r[g.name] = r / g.count;
  }
  auto all_at = [&](const char* g, int bits) { return tiers[g].size() == 1 && tiers[g].count(bits) == 1; };
  const double ratio = mean_s["hot"] / mean_s["cold"];
  for (const auto& g : groups) {
    rep.add(std::string("mean_S_") + g.name, mean_s[g.name]);
    rep.add(std::string("mean_R_") + g.name, mean_r[g.name]);
    rep.add(std::string("half_life_h_") + g.name, half_life(mean_s[g.name]));
  }
  rep.add("S_hot_over_S_cold", ratio, ">= 5", ratio >= 5.0);
  rep.add("hot_tier_bits", tiers["hot"].begin()->first, "== 4", all_at("hot", 4));
  rep.add("warm_tier_bits", tiers["warm"].begin()->first, "== 2", all_at("warm", 2));
  rep.add("cold_tier_bits", tiers["cold"].begin()->first, "== 0 (deleted)", all_at("cold", 0));
  rep.add("retention_self_consistency_err", worst_self, "<= 1e-9", worst_self <= 1e-9);
  rep.notes.push_back("one decay pass at day " + std::to_string(o.days) + " + 12h over the recorded access history");
  if (o.dir.empty()) std::filesystem::remove_all(dir);
  return rep;
}

// ---- continuity ----

struct ContinuityOptions {
  std::size_t n = 10;
  std::uint64_t seed = 42;
  std::uint32_t dim = 256;
  std::filesystem::path dir;
};

/// Writes facts in one process, then recalls paraphrases from a second,
/// freshly started process.
inline Report bench_continuity(const ContinuityOptions& o) {
  Report rep{"continuity", {}, {}};
  auto dir = o.dir.empty() ? std::filesystem::temp_directory_path() /
                                 ("engram-bench-continuity-" + std::to_string(::getpid()) + "-" + std::to_string(o.seed))
                           : o.dir;
  std::filesystem::remove_all(dir);
  Config cfg;
  cfg.dim = o.dim;
  cfg.seed = o.seed;
  const auto corpus = make_corpus(o.n, o.seed ^ 0x5151);
  std::mt19937_64 rng(splitmix64(o.seed + 3));
  std::vector<std::string> queries;
  for (const auto& f : corpus.facts) queries.push_back(paraphrase(f, rng));

  auto run_child = [&](auto&& fn) {
    std::fflush(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) throw Error(Errc::io, "fork failed");
    if (pid == 0) {
      int code = 1;
      try {
        code = fn();
      } catch (...) {
      }
      ::_exit(code);
    }
    int status = 0;
    ::waitpid(pid, &status, 0);
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };

  const int wrote = run_child([&] {
    Engine e(dir, cfg);
    for (const auto& f : corpus.facts) e.remember({f, {}, {}, {}, {}, {}, 0, {}});
    return 0;
  });
  const auto result_file = dir / "continuity.result";
  const int read = run_child([&] {
    Engine e(dir, cfg);
    std::ofstream out(result_file);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      RecallArgs a;
      a.text = queries[i];
      a.k = 10;
      a.consume = false;
      const auto r = e.recall(a);
      std::size_t rank = 0;
      for (std::size_t j = 0; j < r.rows.size(); ++j)
        if (r.rows[j].record.text == corpus.facts[i]) rank = j + 1;
      out << rank << '\n';
    }
    return out ? 0 : 1;
  });
  std::size_t recalled = 0, rank1 = 0;
  std::ifstream in(result_file);
  std::size_t rank;
  while (in >> rank) {
    recalled += rank > 0;
    rank1 += rank == 1;
  }
  rep.add("writer_exit_code", wrote, "== 0", wrote == 0);
  rep.add("reader_exit_code", read, "== 0", read == 0);
  rep.add("recalled", double(recalled), "== " + std::to_string(o.n), recalled == o.n);
  rep.add("at_rank_1", double(rank1), "== " + std::to_string(o.n), rank1 == o.n);
  rep.notes.push_back("uses the deterministic token embedder, not a sentence model");
  if (o.dir.empty()) std::filesystem::remove_all(dir);
  return rep;
}

}  // namespace engram::bench
