#pragma once

#include <cstdlib>
#include <fstream>
#include <random>
#include <sys/wait.h>

#include "engram/channels.hpp"

namespace engram {

struct FusionConfig {
  int k_rrf = 15;
  std::map<Channel, double> weights = {{Channel::semantic, 1.2},   {Channel::bm25, 1.0},
                                       {Channel::entity, 1.0},     {Channel::temporal, 1.0},
                                       {Channel::activation, 1.0}, {Channel::consolidation, 0.8},
                                       {Channel::hopfield, 0.8}};
  std::size_t rerank_top = 20;
  std::size_t frqad_rescore_top = 20;
  bool multihop_union_fallback = true;
  RampConfig ramp;
  double kappa_q = 1.0;

  double weight(Channel c) const {
    auto it = weights.find(c);
    return it == weights.end() ? 0.0 : it->second;
  }
  void validate() const {
    if (k_rrf < 1) throw Error(Errc::invalid_argument, "k_rrf must be at least 1");
    for (auto c : all_channels)
      if (!(weight(c) > 0.0)) throw Error(Errc::invalid_argument, std::string("weight for ") + channel_name(c) + " must be positive");
  }
};

struct FusedEntry {
  MemoryId id = 0;
  double fused = 0.0;
  std::array<std::size_t, 7> ranks{};  // 1-based, 0 when absent
  std::optional<double> rerank;
  std::optional<double> rescore;
  double final_score = 0.0;
};

struct FusedResult {
  std::vector<FusedEntry> entries;
  bool rerank_fallback = false;
  std::string rerank_error;
  bool multihop_applied = false;
  bool multihop_fallback = false;
};

/// score(m) = sum_c w_c / (k + rank_c(m)); channels where m is absent add nothing.
inline FusedResult fuse(const std::vector<ChannelResult>& results, const FusionConfig& cfg = {}) {
  cfg.validate();
  std::map<MemoryId, FusedEntry> acc;
  for (const auto& r : results) {
    const auto ci = static_cast<std::size_t>(r.channel);
    for (std::size_t i = 0; i < r.hits.size(); ++i) {
      auto& e = acc[r.hits[i].id];
      e.id = r.hits[i].id;
      if (!e.ranks[ci]) e.ranks[ci] = i + 1;
    }
  }
  FusedResult out;
  for (auto& [id, e] : acc) {
    // summed in ascending order so equal term multisets give bit-identical scores
    std::array<double, 7> terms{};
    std::size_t n = 0;
    for (auto c : all_channels)
      if (const auto rk = e.ranks[static_cast<std::size_t>(c)])
        terms[n++] = cfg.weight(c) / static_cast<double>(cfg.k_rrf + static_cast<int>(rk));
    std::sort(terms.begin(), terms.begin() + static_cast<std::ptrdiff_t>(n));
    for (std::size_t i = 0; i < n; ++i) e.fused += terms[i];
    e.final_score = e.fused;
    out.entries.push_back(e);
  }
  // Scores within 1e-9 of the largest attainable score are tied and ordered by
  // id. Decimal weights make exact ties common (0.8/16 == 1.2/24) and binary
  // rounding would otherwise break them differently once weights are rescaled.
  double top = 0.0;
  for (auto c : all_channels) top += cfg.weight(c) / static_cast<double>(cfg.k_rrf + 1);
  auto key = [top](double f) { return std::llround(f / top * 1e9); };
  std::stable_sort(out.entries.begin(), out.entries.end(), [&](const FusedEntry& a, const FusedEntry& b) {
    const auto ka = key(a.fused), kb = key(b.fused);
    return ka > kb || (ka == kb && a.id < b.id);
  });
  return out;
}

/// Ids found by both the entity and the temporal channel; the union when that
/// is empty and the fallback is enabled.
inline std::set<MemoryId> intersect_multihop(const ChannelResult& entity, const ChannelResult& temporal,
                                             bool union_fallback = true, bool* fell_back = nullptr) {
  std::set<MemoryId> a, b, out;
  for (const auto& h : entity.hits) a.insert(h.id);
  for (const auto& h : temporal.hits) b.insert(h.id);
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
  if (fell_back) *fell_back = false;
  if (out.empty() && union_fallback) {
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out, out.end()));
    if (fell_back) *fell_back = !out.empty();
  }
  return out;
}

// ---- reranking ----

class Reranker {
 public:
  virtual ~Reranker() = default;
  /// One finite score per text; throwing signals failure.
  virtual std::vector<double> score(const std::string& query, const std::vector<std::string>& texts) = 0;
};

/// Runs a shell command that reads JSON lines {"query", "text"} on stdin and
/// writes one score per line.
class ExternalReranker : public Reranker {
 public:
  explicit ExternalReranker(std::string command) : command_(std::move(command)) {}

  std::vector<double> score(const std::string& query, const std::vector<std::string>& texts) override {
    auto in = std::filesystem::temp_directory_path() /
              ("engram-rerank-" + std::to_string(std::random_device{}()) + ".jsonl");
    {
      std::ofstream f(in);
      for (const auto& t : texts) f << nlohmann::json{{"query", query}, {"text", t}}.dump() << '\n';
      if (!f) throw Error(Errc::io, "cannot write reranker input");
    }
    struct Cleanup {
      std::filesystem::path p;
      ~Cleanup() {
        std::error_code ec;
        std::filesystem::remove(p, ec);
      }
    } cleanup{in};
    const std::string cmd = command_ + " < '" + in.string() + "'";
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) throw Error(Errc::io, "cannot start reranker");
    std::string output;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, p)) > 0) output.append(buf, n);
    const int status = pclose(p);
    if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
      throw Error(Errc::io, "reranker exited with failure");
    std::vector<double> scores;
    std::istringstream lines(output);
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      std::size_t used = 0;
      double v = std::stod(line, &used);
      if (!std::isfinite(v)) throw Error(Errc::invalid_argument, "reranker produced a non-finite score");
      scores.push_back(v);
    }
    if (scores.size() != texts.size()) throw Error(Errc::invalid_argument, "reranker returned the wrong number of scores");
    return scores;
  }

 private:
  std::string command_;
};

/// Re-orders the first `top` entries by the reranker's scores. With no
/// reranker this is the identity; a failing one also leaves the order alone
/// and sets the fallback flag.
inline void apply_rerank(FusedResult& r, const Snapshot& s, const Query& q, Reranker* reranker, std::size_t top) {
  if (!reranker || top == 0 || r.entries.empty()) return;
  const std::size_t n = std::min(top, r.entries.size());
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < n; ++i) {
    auto idx = s.find(r.entries[i].id);
    texts.push_back(idx ? s.item(*idx).rec.text : std::string());
  }
  std::vector<double> scores;
  try {
    scores = reranker->score(q.text, texts);
    if (scores.size() != n) throw Error(Errc::invalid_argument, "reranker returned the wrong number of scores");
    for (double v : scores)
      if (!std::isfinite(v)) throw Error(Errc::invalid_argument, "reranker produced a non-finite score");
  } catch (const std::exception& e) {
    r.rerank_fallback = true;
    r.rerank_error = e.what();
    return;
  }
  for (std::size_t i = 0; i < n; ++i) r.entries[i].rerank = scores[i];
  std::stable_sort(r.entries.begin(), r.entries.begin() + static_cast<std::ptrdiff_t>(n),
                   [](const FusedEntry& a, const FusedEntry& b) {
                     return *a.rerank > *b.rerank || (*a.rerank == *b.rerank && a.id < b.id);
                   });
}

/// Re-orders the first top_n entries by the graduated cosine/FRQAD score
/// against the query; the tail keeps its order.
inline void rescore_frqad(FusedResult& r, const Snapshot& s, const Query& q, std::size_t top_n,
                          const FusionConfig& cfg = {}) {
  const std::size_t n = std::min(top_n, r.entries.size());
  if (n == 0 || q.embedding.empty()) return;
  const PrecisionGaussian qg{q.embedding, 1.0 / static_cast<double>(s.dim()), Bits::f32, cfg.kappa_q};
  for (std::size_t i = 0; i < n; ++i) {
    auto& e = r.entries[i];
    auto idx = s.find(e.id);
    if (!idx || !s.item(*idx).has_embedding) {
      e.rescore = -std::numeric_limits<double>::infinity();
      continue;
    }
    const auto& it = s.item(*idx);
    const PrecisionGaussian mg{it.vec, it.base_variance, it.bits, cfg.kappa_q};
    e.rescore = graduated_score(qg, mg, it.rec.access_count, cfg.ramp);
  }
  std::stable_sort(r.entries.begin(), r.entries.begin() + static_cast<std::ptrdiff_t>(n),
                   [](const FusedEntry& a, const FusedEntry& b) {
                     return *a.rescore > *b.rescore || (*a.rescore == *b.rescore && a.id < b.id);
                   });
}

/// Full read path: channels, optional multi-hop restriction, weighted RRF,
/// reranking, FRQAD re-scoring. The store is not touched.
inline FusedResult retrieve(const Snapshot& s, const Query& q, std::size_t k, Timestamp now,
                            const ChannelConfig& ccfg = {}, const FusionConfig& fcfg = {},
                            Reranker* reranker = nullptr) {
  std::vector<ChannelResult> results;
  for (auto c : all_channels) results.push_back(run_channel(c, s, q, now, ccfg));
  FusedResult fused;
  if (q.multi_hop) {
    bool fell_back = false;
    const auto keep = intersect_multihop(results[static_cast<std::size_t>(Channel::entity)],
                                         results[static_cast<std::size_t>(Channel::temporal)],
                                         fcfg.multihop_union_fallback, &fell_back);
    for (auto& r : results) std::erase_if(r.hits, [&](const Scored& h) { return !keep.count(h.id); });
    fused = fuse(results, fcfg);
    fused.multihop_applied = true;
    fused.multihop_fallback = fell_back;
  } else {
    fused = fuse(results, fcfg);
  }
  apply_rerank(fused, s, q, reranker, fcfg.rerank_top);
  rescore_frqad(fused, s, q, fcfg.frqad_rescore_top, fcfg);
  if (fused.entries.size() > k) fused.entries.resize(k);
  for (std::size_t i = 0; i < fused.entries.size(); ++i)
    fused.entries[i].final_score = 1.0 / static_cast<double>(i + 1);
  return fused;
}

/// Marks a result as used: one access per returned memory.
inline std::size_t consume(Store& store, const FusedResult& r, Timestamp now) {
  std::size_t touched = 0;
  store.atomically([&] {
    for (const auto& e : r.entries) {
      if (!store.exists(e.id)) continue;
      auto m = store.get_memory(e.id);
      store.touch(e.id, std::max(now, m.last_access_time));
      ++touched;
    }
  });
  return touched;
}

}  // namespace engram
