#pragma once

// In-process engine over one store directory: the operations behind every
// CLI command. Callers that write must hold the directory's WriterLock.

#include <openssl/evp.h>

#include <memory>
#include <sstream>

#include "engram/config.hpp"
#include "engram/consolidate.hpp"
#include "engram/embedder.hpp"
#include "engram/forgetting.hpp"
#include "engram/fusion.hpp"
#include "engram/lock.hpp"
#include "engram/memstore.hpp"
#include "engram/pending.hpp"

namespace engram {

struct RememberArgs {
  std::string text;
  std::optional<double> importance;
  std::optional<double> emotion;
  std::vector<std::string> entities;
  std::optional<std::string> agent;
  std::optional<Timestamp> event_time;
  std::uint32_t confirmations = 0;
  std::optional<std::vector<float>> embedding;  // replaces the configured embedder
};

inline nlohmann::json remember_args_to_json(const RememberArgs& a) {
  nlohmann::json j{{"text", a.text}, {"entities", a.entities}, {"confirmations", a.confirmations}};
  if (a.importance) j["importance"] = *a.importance;
  if (a.emotion) j["emotion"] = *a.emotion;
  if (a.agent) j["agent"] = *a.agent;
  if (a.event_time) j["event_time"] = format_rfc3339(*a.event_time);
  if (a.embedding) j["embedding"] = *a.embedding;
  return j;
}

inline RememberArgs remember_args_from_json(const nlohmann::json& j) {
  RememberArgs a;
  a.text = j.at("text").get<std::string>();
  if (j.contains("entities")) a.entities = j["entities"].get<std::vector<std::string>>();
  if (j.contains("confirmations")) a.confirmations = j["confirmations"].get<std::uint32_t>();
  if (j.contains("importance")) a.importance = j["importance"].get<double>();
  if (j.contains("emotion")) a.emotion = j["emotion"].get<double>();
  if (j.contains("agent")) a.agent = j["agent"].get<std::string>();
  if (j.contains("event_time")) a.event_time = parse_rfc3339(j["event_time"].get<std::string>());
  if (j.contains("embedding")) a.embedding = j["embedding"].get<std::vector<float>>();
  return a;
}

struct RecallArgs {
  std::string text;
  std::optional<std::size_t> k;
  std::optional<bool> multi_hop;  // default: heuristic on entity count
  std::vector<std::string> entities;
  std::optional<Timestamp> as_of;
  std::optional<Timestamp> event_time_hint;
  std::optional<std::vector<float>> embedding;
  bool consume = true;
};

struct RecallRow {
  FusedEntry entry;
  MemoryRecord record;
  int bits = 32;
};

struct RecallResult {
  std::vector<RecallRow> rows;
  bool multi_hop = false;
  bool multihop_fallback = false;
  bool rerank_fallback = false;
  std::string rerank_error;
};

struct DeletionReceipt {
  MemoryId id = 0;
  std::string sha256;  // of the record's canonical export line
  Timestamp deleted_at = unset_time;
  bool absent = false;  // record, embedding, edges and gist memberships all gone
  std::size_t integrity_issues = 0;
};

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error(Errc::io, "sha256 failed");
  return to_hex(std::span<const unsigned char>(md, len));
}

class Engine {
 public:
  static std::filesystem::path db_path(const std::filesystem::path& dir) { return dir / "memory.db"; }

  Engine(const std::filesystem::path& dir, Config cfg)
      : dir_(dir), cfg_(std::move(cfg)), store_((std::filesystem::create_directories(dir), db_path(dir)), cfg_.dim) {
    quant_ = Quantizer::open_or_create(dir_, cfg_.dim, cfg_.seed);
    if (!cfg_.reranker_command.empty()) reranker_ = std::make_unique<ExternalReranker>(cfg_.reranker_command);
  }

  const std::filesystem::path& dir() const { return dir_; }
  const Config& config() const { return cfg_; }
  Store& store() { return store_; }
  const Quantizer& quantizer() const { return quant_; }
  void set_reranker(std::unique_ptr<Reranker> r) { reranker_ = std::move(r); }
  Reranker* reranker() const { return reranker_.get(); }

  std::vector<float> embed(std::string_view text) const { return test_embedder(text, cfg_.dim, cfg_.seed); }

  /// Applies queued remembers left by a daemon that stopped before applying them.
  std::size_t replay_pending() {
    if (!std::filesystem::exists(PendingQueue::path(dir_))) return 0;
    PendingQueue q(PendingQueue::path(dir_));
    std::size_t applied = 0;
    for (const auto& e : q.entries()) {
      if (apply_pending(q.queue_id(), e)) ++applied;
      q.remove(e.seq);
    }
    return applied;
  }

  /// Exactly-once application of one queue entry. Returns false when the
  /// entry was already applied.
  bool apply_pending(const std::string& queue_id, const PendingQueue::Entry& e) {
    const PendingKey key{queue_id, e.seq};
    if (store_.pending_applied(key)) return false;
    // a reservation taken over by a direct writer falls back to a fresh id
    const MemoryId id = e.reserved_id && !store_.exists(e.reserved_id) ? e.reserved_id : 0;
    remember(remember_args_from_json(e.request), now_utc(), key, id);
    return true;
  }

  MemoryId remember(const RememberArgs& a, Timestamp now = now_utc(), const std::optional<PendingKey>& pending = {},
                    MemoryId id = 0) {
    if (a.text.empty()) throw Error(Errc::invalid_argument, "memory text must be non-empty");
    MemoryRecord rec;
    rec.id = id;
    rec.text = a.text;
    rec.entities = normalized_entities(a.entities);
    rec.importance = a.importance.value_or(cfg_.default_importance);
    rec.emotion = a.emotion.value_or(cfg_.default_emotion);
    rec.confirmations = a.confirmations;
    rec.source_agent = a.agent.value_or(cfg_.default_agent);
    if (a.event_time) rec.event_time = *a.event_time;
    std::vector<float> v;
    if (a.embedding) {
      if (a.embedding->size() != cfg_.dim)
        throw Error(Errc::dimension_mismatch, "supplied embedding has " + std::to_string(a.embedding->size()) +
                                                  " coordinates, store expects " + std::to_string(cfg_.dim));
      v = normalized(*a.embedding);
    } else {
      v = embed(a.text);
    }
    if (rec.id == 0) rec.id = allocate_id();
    const MemoryId out = store_.atomically([&] {
      const MemoryId mid = store_.put_memory(rec, v, now, std::nullopt, pending);
      link_shared_entities(mid, rec.entities);
      return mid;
    });
    dirty_ = true;
    return out;
  }

  std::shared_ptr<const Snapshot> snapshot() {
    if (dirty_ || !snap_) {
      snap_ = Snapshot::load(store_, quant_);
      dirty_ = false;
    }
    return snap_;
  }

  Query make_query(const RecallArgs& a) const {
    Query q;
    q.text = a.text;
    q.embedding = a.embedding ? normalized(*a.embedding) : embed(a.text);
    q.entities = normalized_entities(a.entities);
    q.as_of = a.as_of;
    q.event_time_hint = a.event_time_hint;
    q.multi_hop = a.multi_hop.value_or(q.entities.size() >= cfg_.multihop_min_entities);
    return q;
  }

  /// Read-only retrieval against a snapshot.
  static RecallResult recall_on(const Snapshot& s, const Query& q, std::size_t k, Timestamp now, const Config& cfg,
                                Reranker* reranker) {
    auto fused = retrieve(s, q, k, now, cfg.channels, cfg.fusion, reranker);
    RecallResult out;
    out.multi_hop = fused.multihop_applied;
    out.multihop_fallback = fused.multihop_fallback;
    out.rerank_fallback = fused.rerank_fallback;
    out.rerank_error = fused.rerank_error;
    for (const auto& e : fused.entries) {
      const auto& it = s.item(*s.find(e.id));
      out.rows.push_back({e, it.rec, it.has_embedding ? bit_count(it.bits) : 0});
    }
    return out;
  }

  /// Full pipeline; when a.consume is set the returned memories are touched.
  RecallResult recall(const RecallArgs& a, Timestamp now = now_utc()) {
    const auto q = make_query(a);
    auto snap = snapshot();
    auto out = recall_on(*snap, q, a.k.value_or(cfg_.recall_k), now, cfg_, reranker_.get());
    if (a.consume && !out.rows.empty()) touch_rows(out, now);
    return out;
  }

  void touch_rows(RecallResult& r, Timestamp now) {
    FusedResult fr;
    for (const auto& row : r.rows) fr.entries.push_back(row.entry);
    consume(store_, fr, now);
    dirty_ = true;
  }

  DecayReport decay(Timestamp now) {
    auto rep = decay_pass(store_, quant_, now, cfg_.forgetting);
    dirty_ = true;
    return rep;
  }

  std::vector<GistBlock> consolidate() {
    auto g = consolidate_pass(store_, quant_, cfg_.consolidate);
    dirty_ = true;
    return g;
  }

  Pattern observe(const std::string& subject, const std::string& predicate, bool agrees,
                  std::optional<MemoryId> source = std::nullopt) {
    return observe_pattern(store_, subject, predicate, agrees, source);
  }

  SoftPrompt prompt(Timestamp now = now_utc()) {
    auto p = generate_soft_prompt(store_.patterns(), cfg_.soft_prompt, now);
    p.id = store_.add_soft_prompt(p);
    return p;
  }

  void link(MemoryId src, MemoryId dst, const std::string& relation, double weight) {
    store_.add_edge({src, dst, relation, weight});
    dirty_ = true;
  }

  void set_trust(const std::string& agent, double trust) { store_.set_trust(agent, trust); }

  DeletionReceipt forget(MemoryId id, Timestamp now = now_utc()) {
    DeletionReceipt r;
    r.id = id;
    r.sha256 = sha256_hex(store_.canonical_line(id));
    store_.delete_memory(id);
    dirty_ = true;
    r.deleted_at = now;
    bool dangling = false;
    for (const auto& e : store_.edges()) dangling |= e.src == id || e.dst == id;
    for (const auto& g : store_.gists())
      dangling |= std::find(g.member_ids.begin(), g.member_ids.end(), id) != g.member_ids.end();
    r.absent = !store_.exists(id) && !store_.get_embedding(id) && !dangling;
    r.integrity_issues = store_.verify(cfg_.forgetting.thresholds).size();
    return r;
  }

  std::vector<std::string> verify() { return store_.verify(cfg_.forgetting.thresholds); }

  void export_to(std::ostream& out) { store_.export_canonical(out); }

  void import_from(std::istream& in) {
    store_.import_canonical(in);
    dirty_ = true;
    if (std::filesystem::exists(PendingQueue::path(dir_))) PendingQueue(PendingQueue::path(dir_)).raise_floor(store_.next_id());
  }

 private:
  // With a pending queue present, ids are reserved from its counter so they
  // never collide with ids a daemon has already acknowledged.
  MemoryId allocate_id() {
    if (!std::filesystem::exists(PendingQueue::path(dir_))) return 0;
    return PendingQueue(PendingQueue::path(dir_)).reserve_id(store_.next_id());
  }

  static std::vector<std::string> normalized_entities(const std::vector<std::string>& in) {
    std::vector<std::string> out;
    for (const auto& e : in) {
      auto n = normalize_entity(e);
      if (!n.empty() && std::find(out.begin(), out.end(), n) == out.end()) out.push_back(std::move(n));
    }
    return out;
  }

  // Memories that share an entity are linked both ways.
  void link_shared_entities(MemoryId id, const std::vector<std::string>& entities) {
    std::set<MemoryId> peers;
    for (const auto& e : entities)
      for (auto other : store_.memories_with_entity(e, cfg_.link_max_per_entity + 1))
        if (other != id) peers.insert(other);
    for (auto p : peers) {
      store_.add_edge({id, p, "shared_entity", cfg_.link_weight});
      store_.add_edge({p, id, "shared_entity", cfg_.link_weight});
    }
  }

  std::filesystem::path dir_;
  Config cfg_;
  Store store_;
  Quantizer quant_;
  std::unique_ptr<Reranker> reranker_;
  std::shared_ptr<const Snapshot> snap_;
  bool dirty_ = true;
};

}  // namespace engram
