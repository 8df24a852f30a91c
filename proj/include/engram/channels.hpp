#pragma once

// Seven retrieval channels over an immutable in-memory snapshot of a store.

#include <map>
#include <memory>
#include <set>
#include <unordered_map>

#include "engram/embedder.hpp"
#include "engram/geometry.hpp"
#include "engram/memstore.hpp"
#include "engram/quant.hpp"

namespace engram {

enum class Channel : std::uint8_t { semantic, bm25, entity, temporal, activation, consolidation, hopfield };

inline constexpr std::array<Channel, 7> all_channels = {Channel::semantic,   Channel::bm25,          Channel::entity,
                                                        Channel::temporal,   Channel::activation,    Channel::consolidation,
                                                        Channel::hopfield};

inline const char* channel_name(Channel c) {
  switch (c) {
    case Channel::semantic: return "semantic";
    case Channel::bm25: return "bm25";
    case Channel::entity: return "entity";
    case Channel::temporal: return "temporal";
    case Channel::activation: return "activation";
    case Channel::consolidation: return "consolidation";
    case Channel::hopfield: return "hopfield";
  }
  return "?";
}

struct Query {
  std::string text;
  std::vector<float> embedding;
  std::vector<std::string> entities;
  std::optional<Timestamp> event_time_hint;
  std::optional<Timestamp> as_of;
  bool multi_hop = false;
};

struct Scored {
  MemoryId id = 0;
  double score = 0.0;
  friend bool operator==(const Scored&, const Scored&) = default;
};

struct ChannelResult {
  Channel channel = Channel::semantic;
  std::vector<Scored> hits;  // descending score, ties by ascending id
};

struct ChannelConfig {
  std::size_t k = 50;  // per-channel candidate depth
  double bm25_k1 = 1.2;
  double bm25_b = 0.75;
  double tau_rec_hours = 168.0;
  std::size_t activation_seeds = 5;
  double activation_decay = 0.7;
  int activation_iterations = 3;
  double activation_w_semantic = 0.5;
  double activation_w_activation = 0.3;
  double activation_w_structural = 0.2;
  std::size_t gist_k = 10;
  // Patterns and cue are taken at norm sqrt(d) (unit-variance coordinates);
  // with beta = 1/sqrt(d) the logits are then sqrt(d) * cosine.
  bool hopfield_unit_variance = true;
};

/// Sorts descending by score, ties by id, and keeps the first k.
inline void rank_and_truncate(std::vector<Scored>& v, std::size_t k) {
  std::sort(v.begin(), v.end(), [](const Scored& a, const Scored& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
  });
  if (v.size() > k) v.resize(k);
}

/// Read-only view of everything retrieval needs. Forgotten memories are not
/// part of it; neither are edges or gist members that touch them.
class Snapshot {
 public:
  struct Item {
    MemoryRecord rec;
    bool has_embedding = false;
    std::vector<float> vec;  // dequantized
    Bits bits = Bits::f32;
    double base_variance = 0.0;
    std::vector<std::string> tokens;
  };
  struct Gist {
    std::uint64_t id = 0;
    std::vector<std::size_t> members;  // item indices
    std::vector<float> embedding;
  };

  static std::shared_ptr<const Snapshot> load(Store& store, const Quantizer& quant) {
    auto s = std::make_shared<Snapshot>();
    s->dim_ = store.dim();
    std::map<MemoryId, EmbeddingRecord> embs;
    for (auto& e : store.embeddings()) embs.emplace(e.memory_id, std::move(e));
    for (auto& m : store.scan()) {
      if (m.lifecycle == Lifecycle::forgotten) continue;
      Item it;
      it.tokens = tokenize(m.text);
      if (auto e = embs.find(m.id); e != embs.end()) {
        it.has_embedding = true;
        it.bits = e->second.bits;
        it.base_variance = e->second.base_variance;
        it.vec = e->second.bits == Bits::f32 ? e->second.full : quant.dequantize(e->second.quantized);
      }
      it.rec = std::move(m);
      s->add(std::move(it));
    }
    for (const auto& e : store.edges()) s->add_edge(e);
    for (auto& g : store.gists()) {
      Gist out{g.id, {}, std::move(g.embedding)};
      for (auto m : g.member_ids)
        if (auto i = s->find(m)) out.members.push_back(*i);
      if (!out.members.empty()) s->gists_.push_back(std::move(out));
    }
    s->finish();
    return s;
  }

  /// Builds a snapshot from in-memory parts (tests and benches).
  static std::shared_ptr<const Snapshot> from_items(std::uint32_t dim, std::vector<Item> items,
                                                    const std::vector<GraphEdge>& edges = {},
                                                    const std::vector<GistBlock>& gists = {}) {
    auto s = std::make_shared<Snapshot>();
    s->dim_ = dim;
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.rec.id < b.rec.id; });
    for (auto& it : items) {
      if (it.rec.lifecycle == Lifecycle::forgotten) continue;
      if (it.tokens.empty()) it.tokens = tokenize(it.rec.text);
      if (it.has_embedding && it.base_variance <= 0.0) it.base_variance = 1.0 / dim;
      s->add(std::move(it));
    }
    for (const auto& e : edges) s->add_edge(e);
    for (const auto& g : gists) {
      Gist out{g.id, {}, g.embedding};
      for (auto m : g.member_ids)
        if (auto i = s->find(m)) out.members.push_back(*i);
      if (!out.members.empty()) s->gists_.push_back(std::move(out));
    }
    s->finish();
    return s;
  }

  /// Copy with one more access recorded for each id, mirroring Store::touch.
  std::shared_ptr<const Snapshot> touched(const std::vector<MemoryId>& ids, Timestamp t) const {
    auto s = std::make_shared<Snapshot>(*this);
    for (auto id : ids)
      if (auto i = s->find(id)) {
        auto& r = s->items_[*i].rec;
        r.access_count += 1;
        r.last_access_time = std::max(t, r.last_access_time);
      }
    return s;
  }

  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return items_.size(); }
  const Item& item(std::size_t i) const { return items_[i]; }
  const std::vector<Item>& items() const { return items_; }
  const std::vector<Gist>& gists() const { return gists_; }
  std::optional<std::size_t> find(MemoryId id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  const std::vector<std::pair<std::size_t, double>>& out_edges(std::size_t i) const { return out_[i]; }
  std::size_t degree(std::size_t i) const { return degree_[i]; }
  std::size_t max_degree() const { return max_degree_; }

  // BM25 statistics
  double avg_doc_len() const { return avgdl_; }
  std::size_t doc_freq(const std::string& tok) const {
    auto it = df_.find(tok);
    return it == df_.end() ? 0 : it->second;
  }
  std::size_t entity_freq(const std::string& e) const {
    auto it = entity_df_.find(e);
    return it == entity_df_.end() ? 0 : it->second;
  }
  const std::vector<std::size_t>& entity_postings(const std::string& e) const {
    static const std::vector<std::size_t> none;
    auto it = entity_post_.find(e);
    return it == entity_post_.end() ? none : it->second;
  }

 private:
  void add(Item it) {
    index_.emplace(it.rec.id, items_.size());
    items_.push_back(std::move(it));
  }
  void add_edge(const GraphEdge& e) {
    auto a = find(e.src), b = find(e.dst);
    if (!a || !b || *a == *b) return;
    if (out_.size() < items_.size()) out_.resize(items_.size());
    out_[*a].emplace_back(*b, e.weight);
  }
  void finish() {
    out_.resize(items_.size());
    degree_.assign(items_.size(), 0);
    for (std::size_t i = 0; i < out_.size(); ++i)
      for (auto [j, w] : out_[i]) {
        ++degree_[i];
        ++degree_[j];
      }
    max_degree_ = degree_.empty() ? 0 : *std::max_element(degree_.begin(), degree_.end());
    double total = 0.0;
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const auto& it = items_[i];
      total += static_cast<double>(it.tokens.size());
      std::set<std::string> uniq(it.tokens.begin(), it.tokens.end());
      for (const auto& t : uniq) ++df_[t];
      std::set<std::string> ents(it.rec.entities.begin(), it.rec.entities.end());
      for (const auto& e : ents) {
        ++entity_df_[e];
        entity_post_[e].push_back(i);
      }
    }
    avgdl_ = items_.empty() ? 0.0 : total / static_cast<double>(items_.size());
  }

  std::uint32_t dim_ = 0;
  std::vector<Item> items_;
  std::unordered_map<MemoryId, std::size_t> index_;
  std::vector<std::vector<std::pair<std::size_t, double>>> out_;
  std::vector<std::size_t> degree_;
  std::size_t max_degree_ = 0;
  std::vector<Gist> gists_;
  std::unordered_map<std::string, std::size_t> df_;
  std::unordered_map<std::string, std::size_t> entity_df_;
  std::unordered_map<std::string, std::vector<std::size_t>> entity_post_;
  double avgdl_ = 0.0;
};

// ---- channels ----

/// Exact cosine scan over dequantized embeddings.
inline ChannelResult ch_semantic(const Snapshot& s, const Query& q, std::size_t k) {
  ChannelResult r{Channel::semantic, {}};
  if (q.embedding.empty()) return r;
  for (const auto& it : s.items())
    if (it.has_embedding) r.hits.push_back({it.rec.id, cosine(q.embedding, it.vec)});
  rank_and_truncate(r.hits, k);
  return r;
}

/// Okapi BM25 with idf = ln(1 + (N - df + 0.5) / (df + 0.5)).
inline double bm25_term(double tf, double df, double n_docs, double doc_len, double avgdl, double k1, double b) {
  const double idf = std::log1p((n_docs - df + 0.5) / (df + 0.5));
  return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc_len / avgdl));
}

inline ChannelResult ch_bm25(const Snapshot& s, const Query& q, std::size_t k, const ChannelConfig& cfg = {}) {
  ChannelResult r{Channel::bm25, {}};
  auto qt = tokenize(q.text);
  std::set<std::string> terms(qt.begin(), qt.end());
  std::erase_if(terms, [&](const std::string& t) { return s.doc_freq(t) == 0; });
  if (terms.empty()) return r;
  const double n = static_cast<double>(s.size());
  for (const auto& it : s.items()) {
    double score = 0.0;
    bool hit = false;
    for (const auto& t : terms) {
      const auto tf = static_cast<double>(std::count(it.tokens.begin(), it.tokens.end(), t));
      if (tf == 0.0) continue;
      hit = true;
      score += bm25_term(tf, static_cast<double>(s.doc_freq(t)), n, static_cast<double>(it.tokens.size()),
                         s.avg_doc_len(), cfg.bm25_k1, cfg.bm25_b);
    }
    if (hit) r.hits.push_back({it.rec.id, score});
  }
  rank_and_truncate(r.hits, k);
  return r;
}

/// Direct hits score (shared entity count) + m / (1 + m), m the mean
/// ln(1 + N / df) over shared entities, so the count dominates and rarer
/// entities break ties. One hop along outgoing edges multiplies by the edge weight.
inline ChannelResult ch_entity(const Snapshot& s, const Query& q, std::size_t k) {
  ChannelResult r{Channel::entity, {}};
  std::set<std::string> ents;
  for (const auto& e : q.entities) ents.insert(normalize_entity(e));
  if (ents.empty()) return r;
  const double n = static_cast<double>(s.size());
  std::map<std::size_t, std::pair<int, double>> direct;  // shared count, idf sum
  for (const auto& e : ents)
    for (auto i : s.entity_postings(e)) {
      auto& d = direct[i];
      d.first += 1;
      d.second += std::log1p(n / static_cast<double>(s.entity_freq(e)));
    }
  std::map<std::size_t, double> score;
  for (const auto& [i, d] : direct) {
    const double m = d.second / d.first;
    score[i] = d.first + m / (1.0 + m);
  }
  std::map<std::size_t, double> hop;
  for (const auto& [i, sc] : score)
    for (auto [j, w] : s.out_edges(i)) {
      auto& h = hop[j];
      h = std::max(h, sc * w);
    }
  for (const auto& [j, h] : hop) {
    auto& sc = score[j];
    sc = std::max(sc, h);
  }
  for (const auto& [i, sc] : score) r.hits.push_back({s.item(i).rec.id, sc});
  rank_and_truncate(r.hits, k);
  return r;
}

/// exp(-dt / tau) with dt the distance to the hint, or the age at `now`.
inline ChannelResult ch_temporal(const Snapshot& s, const Query& q, std::size_t k, Timestamp now,
                                 const ChannelConfig& cfg = {}) {
  ChannelResult r{Channel::temporal, {}};
  for (const auto& it : s.items()) {
    if (q.as_of && it.rec.ingest_time > *q.as_of) continue;
    const Timestamp ref = q.event_time_hint.value_or(now);
    const double dt = std::abs(hours_between(it.rec.event_time, ref));
    r.hits.push_back({it.rec.id, std::exp(-dt / cfg.tau_rec_hours)});
  }
  rank_and_truncate(r.hits, k);
  return r;
}

/// Spreading activation from seed activations. Returns the activation
/// accumulated over all iterations, indexed like the snapshot items.
inline std::vector<double> spread_activation(const Snapshot& s, const std::vector<std::pair<std::size_t, double>>& seeds,
                                             double rho, int iterations) {
  const std::size_t n = s.size();
  std::vector<double> total(n, 0.0), cur(n, 0.0);
  for (auto [i, a] : seeds) cur[i] = std::max(0.0, a);
  for (std::size_t i = 0; i < n; ++i) total[i] += cur[i];
  for (int t = 0; t < iterations; ++t) {
    std::vector<double> next(n, 0.0);
    for (std::size_t u = 0; u < n; ++u) {
      if (cur[u] == 0.0) continue;
      const auto& out = s.out_edges(u);
      if (out.empty()) continue;
      const double share = rho * cur[u] / static_cast<double>(out.size());
      for (auto [v, w] : out) next[v] += share * w;
    }
    // lateral inhibition: below-mean activations among the active set are silenced
    double sum = 0.0;
    std::size_t active = 0;
    for (double a : next)
      if (a > 0.0) {
        sum += a;
        ++active;
      }
    if (active == 0) break;
    const double mean = sum / static_cast<double>(active);
    for (auto& a : next)
      if (a < mean) a = 0.0;
    for (std::size_t i = 0; i < n; ++i) total[i] += next[i];
    cur = std::move(next);
  }
  return total;
}

inline ChannelResult ch_activation(const Snapshot& s, const Query& q, std::size_t k, const ChannelConfig& cfg = {}) {
  ChannelResult r{Channel::activation, {}};
  auto sem = ch_semantic(s, q, cfg.activation_seeds);
  if (sem.hits.empty()) return r;
  std::vector<std::pair<std::size_t, double>> seeds;
  for (const auto& h : sem.hits) seeds.emplace_back(*s.find(h.id), h.score);
  const auto act = spread_activation(s, seeds, cfg.activation_decay, cfg.activation_iterations);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (act[i] <= 0.0) continue;
    const auto& it = s.item(i);
    const double semantic = it.has_embedding ? cosine(q.embedding, it.vec) : 0.0;
    const double structural =
        s.max_degree() ? static_cast<double>(s.degree(i)) / static_cast<double>(s.max_degree()) : 0.0;
    r.hits.push_back({it.rec.id, cfg.activation_w_semantic * semantic + cfg.activation_w_activation * act[i] +
                                     cfg.activation_w_structural * structural});
  }
  rank_and_truncate(r.hits, k);
  return r;
}

/// Cosine KNN over gist embeddings; members inherit the best matching gist score.
inline ChannelResult ch_consolidation(const Snapshot& s, const Query& q, std::size_t k, const ChannelConfig& cfg = {}) {
  ChannelResult r{Channel::consolidation, {}};
  if (q.embedding.empty() || s.gists().empty()) return r;
  std::vector<std::pair<double, std::size_t>> g;
  for (std::size_t i = 0; i < s.gists().size(); ++i) g.emplace_back(cosine(q.embedding, s.gists()[i].embedding), i);
  std::sort(g.begin(), g.end(), [&](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && s.gists()[a.second].id < s.gists()[b.second].id);
  });
  if (g.size() > cfg.gist_k) g.resize(cfg.gist_k);
  std::map<std::size_t, double> best;
  for (auto [score, gi] : g)
    for (auto m : s.gists()[gi].members) {
      auto [it, fresh] = best.try_emplace(m, score);
      if (!fresh) it->second = std::max(it->second, score);
    }
  for (auto [m, score] : best) r.hits.push_back({s.item(m).rec.id, score});
  rank_and_truncate(r.hits, k);
  return r;
}

/// One modern-Hopfield update: xi_new = X^T softmax(beta X xi).
inline std::vector<double> hopfield_update(const std::vector<std::span<const float>>& patterns,
                                           std::span<const float> xi, double beta) {
  if (patterns.empty()) return {};
  std::vector<double> logits(patterns.size());
  for (std::size_t i = 0; i < patterns.size(); ++i) logits[i] = beta * dot(patterns[i], xi);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  std::vector<double> out(xi.size(), 0.0);
  for (std::size_t i = 0; i < patterns.size(); ++i) {
    const double p = logits[i] / z;
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += p * patterns[i][j];
  }
  return out;
}

/// Retrieves with one Hopfield step over the Active and Warm memories,
/// ranking them by cosine to the updated state.
inline ChannelResult ch_hopfield(const Snapshot& s, const Query& q, std::size_t k, const ChannelConfig& cfg = {}) {
  ChannelResult r{Channel::hopfield, {}};
  if (q.embedding.empty()) return r;
  std::vector<std::size_t> idx;
  std::vector<std::span<const float>> patterns;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto& it = s.item(i);
    if (!it.has_embedding) continue;
    if (it.rec.lifecycle != Lifecycle::active && it.rec.lifecycle != Lifecycle::warm) continue;
    idx.push_back(i);
    patterns.emplace_back(it.vec);
  }
  if (patterns.empty()) return r;
  const double d = static_cast<double>(s.dim());
  // scaling both patterns and cue by sqrt(d) multiplies the logits by d
  const double beta = (1.0 / std::sqrt(d)) * (cfg.hopfield_unit_variance ? d : 1.0);
  const auto xi = hopfield_update(patterns, q.embedding, beta);
  const double nx = l2_norm(std::span<const double>(xi));
  for (std::size_t p = 0; p < idx.size(); ++p) {
    const double np = l2_norm(patterns[p]);
    const double c = nx > 0 && np > 0 ? dot(std::span<const double>(xi), patterns[p]) / (nx * np) : 0.0;
    r.hits.push_back({s.item(idx[p]).rec.id, std::clamp(c, -1.0, 1.0)});
  }
  rank_and_truncate(r.hits, k);
  return r;
}

inline ChannelResult run_channel(Channel c, const Snapshot& s, const Query& q, Timestamp now,
                                 const ChannelConfig& cfg = {}) {
  switch (c) {
    case Channel::semantic: return ch_semantic(s, q, cfg.k);
    case Channel::bm25: return ch_bm25(s, q, cfg.k, cfg);
    case Channel::entity: return ch_entity(s, q, cfg.k);
    case Channel::temporal: return ch_temporal(s, q, cfg.k, now, cfg);
    case Channel::activation: return ch_activation(s, q, cfg.k, cfg);
    case Channel::consolidation: return ch_consolidation(s, q, cfg.k, cfg);
    case Channel::hopfield: return ch_hopfield(s, q, cfg.k, cfg);
  }
  throw Error(Errc::invalid_argument, "unknown channel");
}

}  // namespace engram
