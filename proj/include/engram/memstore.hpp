#pragma once

// Durable single-file store: memories, mixed-precision embeddings, the entity
// graph, trust scores, gist blocks, patterns and soft prompts. SQLite in WAL
// mode provides atomic multi-record commits and ordered scans.

#include <functional>
#include <iosfwd>
#include <istream>
#include <ostream>
#include <set>

#include <json.hpp>

#include "engram/common.hpp"
#include "engram/quant.hpp"
#include "engram/sqlite.hpp"

namespace engram {

inline constexpr Timestamp unset_time = Timestamp::min();

struct MemoryRecord {
  MemoryId id = 0;  // 0 asks the store to assign one
  std::string text;
  std::vector<std::string> entities;
  double importance = 0.5;
  double emotion = 0.0;
  std::uint32_t confirmations = 0;
  std::uint64_t access_count = 0;
  Timestamp event_time = unset_time;
  Timestamp ingest_time = unset_time;
  Timestamp last_access_time = unset_time;
  std::string source_agent = "local";
  Lifecycle lifecycle = Lifecycle::active;
  double strength = 0.0;   // hours, cached at the last decay pass
  double retention = 1.0;  // cached at the last decay pass
  std::optional<Timestamp> forgotten_at;

  friend bool operator==(const MemoryRecord&, const MemoryRecord&) = default;
};

struct EmbeddingRecord {
  MemoryId memory_id = 0;
  std::uint32_t dim = 0;
  Bits bits = Bits::f32;
  std::vector<float> full;    // when bits == f32
  QuantizedVector quantized;  // otherwise
  double base_variance = 0.0;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct GraphEdge {
  MemoryId src = 0;
  MemoryId dst = 0;
  std::string relation;
  double weight = 1.0;

  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

struct TrustEntry {
  std::string agent_id;
  double trust = 1.0;
};

struct GistBlock {
  std::uint64_t id = 0;
  std::vector<MemoryId> member_ids;  // sorted, distinct
  std::string summary_text;
  std::vector<float> embedding;
};

struct Pattern {
  std::uint64_t id = 0;
  std::string subject;
  std::string predicate;
  std::uint64_t evidence = 0;
  std::uint64_t agree = 0;
  double rate = 0.0;
  double confidence = 0.0;
  std::vector<MemoryId> source_ids;
};

struct SoftPrompt {
  std::uint64_t id = 0;
  std::string text;
  std::uint64_t token_estimate = 0;
  std::vector<std::uint64_t> pattern_ids;
  Timestamp generated_at = unset_time;
};

struct ScanFilter {
  std::optional<std::set<Lifecycle>> lifecycles;
  std::optional<std::string> agent;
  std::optional<Timestamp> event_from;  // inclusive
  std::optional<Timestamp> event_to;    // inclusive
};

/// Identifies one entry of a pending write queue; applied keys are recorded
/// in the same transaction as the memory so a replay can skip them.
struct PendingKey {
  std::string queue_id;
  std::uint64_t seq = 0;
};

struct LifecycleThresholds {
  double active = 0.8, warm = 0.5, cold = 0.2, archive = 0.05;
};

class Store {
 public:
  static constexpr int schema_version = 1;

  /// Opens (creating if needed) the database file. `dim` is fixed at creation;
  /// reopening with a different dim fails.
  Store(const std::filesystem::path& db_path, std::uint32_t dim) : db_(db_path), path_(db_path) {
    db_.exec("PRAGMA journal_mode=WAL");
    db_.exec("PRAGMA synchronous=FULL");
    db_.exec("PRAGMA foreign_keys=ON");
    create_schema();
    auto stored = meta("dim");
    if (!stored) {
      set_meta("dim", std::to_string(dim));
      set_meta("schema_version", std::to_string(schema_version));
      dim_ = dim;
    } else {
      dim_ = static_cast<std::uint32_t>(std::stoul(*stored));
      if (dim_ != dim)
        throw Error(Errc::dimension_mismatch,
                    "store has dim " + *stored + ", configuration asks for " + std::to_string(dim));
    }
  }

  std::uint32_t dim() const { return dim_; }
  const std::filesystem::path& path() const { return path_; }
  sql::Db& db() { return db_; }

  /// Called at named points inside write transactions; throwing aborts the write.
  std::function<void(std::string_view)> fault_hook;

  /// Runs fn inside a savepoint: all of it commits or none of it does.
  template <typename F>
  decltype(auto) atomically(F&& fn) {
    const std::string name = "sp" + std::to_string(++savepoint_counter_);
    db_.exec("SAVEPOINT " + name);
    try {
      if constexpr (std::is_void_v<std::invoke_result_t<F>>) {
        fn();
        db_.exec("RELEASE " + name);
      } else {
        auto result = fn();
        db_.exec("RELEASE " + name);
        return result;
      }
    } catch (...) {
      try {
        db_.exec("ROLLBACK TO " + name);
        db_.exec("RELEASE " + name);
      } catch (...) {
      }
      throw;
    }
  }

  // ---- memories ----

  MemoryId put_memory(MemoryRecord rec, std::span<const float> embedding, Timestamp now = now_utc(),
                      std::optional<double> base_variance = std::nullopt,
                      const std::optional<PendingKey>& pending = std::nullopt) {
    if (embedding.size() != dim_)
      throw Error(Errc::dimension_mismatch, "embedding has " + std::to_string(embedding.size()) +
                                                " coordinates, store expects " + std::to_string(dim_));
    validate(rec);
    if (rec.ingest_time == unset_time) rec.ingest_time = now;
    if (rec.event_time == unset_time) rec.event_time = rec.ingest_time;
    if (rec.last_access_time == unset_time) rec.last_access_time = rec.ingest_time;
    rec.access_count = std::max<std::uint64_t>(rec.access_count, 1);
    for (auto& e : rec.entities) e = normalize_entity(e);
    const double var = base_variance.value_or(1.0 / static_cast<double>(dim_));
    if (!(var > 0.0)) throw Error(Errc::invalid_argument, "base variance must be positive");

    return atomically([&] {
      if (rec.id != 0 && exists(rec.id)) throw Error(Errc::duplicate_id, "memory id already exists");
      if (rec.id == 0) rec.id = next_id();
      insert_memory(rec);
      bump_next_id(rec.id);
      EmbeddingRecord emb{rec.id, dim_, Bits::f32, {embedding.begin(), embedding.end()}, {}, var};
      put_embedding(emb);
      if (pending) {
        db_.prepare("INSERT INTO pending_applied(queue_id, seq, memory_id) VALUES(?,?,?)")
            .bind(1, pending->queue_id)
            .bind(2, pending->seq)
            .bind(3, rec.id)
            .run();
      }
      if (fault_hook) fault_hook("put:before-commit");
      return rec.id;
    });
  }

  /// Smallest id never handed out; ids of deleted memories are not reused.
  MemoryId next_id() {
    auto v = meta("next_id");
    return v ? static_cast<MemoryId>(std::stoull(*v)) : 1;
  }

  bool exists(MemoryId id) {
    auto st = db_.prepare("SELECT 1 FROM memories WHERE id=?");
    st.bind(1, id);
    return st.step();
  }

  MemoryRecord get_memory(MemoryId id) {
    auto st = db_.prepare(std::string(memory_select) + " WHERE id=?");
    st.bind(1, id);
    if (!st.step()) throw Error(Errc::unknown_id, "unknown memory id " + std::to_string(id));
    return read_memory(st);
  }

  /// Replaces the mutable per-memory state (lifecycle, strength, ...).
  void update_memory(const MemoryRecord& rec) {
    validate(rec);
    auto st = db_.prepare(
        "UPDATE memories SET text=?, entities=?, importance=?, emotion=?, confirmations=?, access_count=?, "
        "event_time=?, ingest_time=?, last_access_time=?, source_agent=?, lifecycle=?, strength=?, retention=?, "
        "forgotten_at=? WHERE id=?");
    bind_memory_fields(st, rec);
    st.bind(15, rec.id);
    st.run();
    if (db_.changes() == 0) throw Error(Errc::unknown_id, "unknown memory id " + std::to_string(rec.id));
  }

  /// Removes the record, its embedding, incident edges and gist memberships.
  bool delete_memory(MemoryId id) {
    return atomically([&] {
      if (!exists(id)) return false;
      db_.prepare("DELETE FROM memories WHERE id=?").bind(1, id).run();
      // gists need at least two members
      db_.exec("DELETE FROM gists WHERE id IN (SELECT g.id FROM gists g LEFT JOIN gist_members m ON m.gist_id=g.id "
               "GROUP BY g.id HAVING COUNT(m.memory_id) < 2)");
      if (fault_hook) fault_hook("delete:before-commit");
      return true;
    });
  }

  /// One more access at time t; t must not precede the last access.
  MemoryRecord touch(MemoryId id, Timestamp t) {
    return atomically([&] {
      auto rec = get_memory(id);
      if (t < rec.last_access_time)
        throw Error(Errc::time_regression, "touch time precedes the last access of memory " + std::to_string(id));
      rec.access_count += 1;
      rec.last_access_time = t;
      db_.prepare("UPDATE memories SET access_count=?, last_access_time=? WHERE id=?")
          .bind(1, rec.access_count)
          .bind(2, to_millis(t))
          .bind(3, id)
          .run();
      return rec;
    });
  }

  /// Live memories tagged with entity e, newest id first.
  std::vector<MemoryId> memories_with_entity(const std::string& e, std::size_t limit) {
    auto st = db_.prepare(
        "SELECT DISTINCT m.id FROM memories m, json_each(m.entities) j WHERE j.value = ? AND m.lifecycle != "
        "'forgotten' ORDER BY m.id DESC LIMIT ?");
    st.bind(1, e).bind(2, static_cast<std::int64_t>(limit));
    std::vector<MemoryId> out;
    while (st.step()) out.push_back(st.u64(0));
    return out;
  }

  /// The memory's line in the canonical export (record plus embedding).
  std::string canonical_line(MemoryId id) {
    auto j = memory_json(get_memory(id));
    if (auto e = get_embedding(id)) j["embedding"] = embedding_json(*e);
    return j.dump();
  }

  std::vector<MemoryRecord> scan(const ScanFilter& f = {}) {
    auto st = db_.prepare(std::string(memory_select) + " ORDER BY id");
    std::vector<MemoryRecord> out;
    while (st.step()) {
      auto rec = read_memory(st);
      if (f.lifecycles && !f.lifecycles->count(rec.lifecycle)) continue;
      if (f.agent && rec.source_agent != *f.agent) continue;
      if (f.event_from && rec.event_time < *f.event_from) continue;
      if (f.event_to && rec.event_time > *f.event_to) continue;
      out.push_back(std::move(rec));
    }
    return out;
  }

  std::size_t count() {
    auto st = db_.prepare("SELECT COUNT(*) FROM memories");
    st.step();
    return static_cast<std::size_t>(st.i64(0));
  }

  // ---- embeddings ----

  void put_embedding(const EmbeddingRecord& e) {
    if (e.dim != dim_) throw Error(Errc::dimension_mismatch, "embedding record dim");
    if (!(e.base_variance > 0.0)) throw Error(Errc::invalid_argument, "base variance must be positive");
    std::vector<unsigned char> payload;
    std::uint64_t rot_seed = 0, cb_id = 0;
    if (e.bits == Bits::f32) {
      if (e.full.size() != dim_) throw Error(Errc::dimension_mismatch, "embedding payload length");
      payload.resize(e.full.size() * sizeof(float));
      std::memcpy(payload.data(), e.full.data(), payload.size());
    } else {
      if (e.quantized.bits != e.bits || e.quantized.dim != dim_ ||
          e.quantized.packed.size() != packed_size(e.bits, dim_))
        throw Error(Errc::dimension_mismatch, "quantized payload length");
      payload.assign(e.quantized.packed.begin(), e.quantized.packed.end());
      rot_seed = e.quantized.rotation_seed;
      cb_id = e.quantized.codebook_id;
    }
    db_.prepare(
           "INSERT OR REPLACE INTO embeddings(memory_id, dim, bits, payload, base_variance, rotation_seed, "
           "codebook_id) VALUES(?,?,?,?,?,?,?)")
        .bind(1, e.memory_id)
        .bind(2, e.dim)
        .bind(3, bit_count(e.bits))
        .bind_blob(4, payload)
        .bind(5, e.base_variance)
        .bind(6, rot_seed)
        .bind(7, cb_id)
        .run();
  }

  std::optional<EmbeddingRecord> get_embedding(MemoryId id) {
    auto st = db_.prepare(std::string(embedding_select) + " WHERE memory_id=?");
    st.bind(1, id);
    if (!st.step()) return std::nullopt;
    return read_embedding(st);
  }

  std::vector<EmbeddingRecord> embeddings() {
    auto st = db_.prepare(std::string(embedding_select) + " ORDER BY memory_id");
    std::vector<EmbeddingRecord> out;
    while (st.step()) out.push_back(read_embedding(st));
    return out;
  }

  void delete_embedding(MemoryId id) { db_.prepare("DELETE FROM embeddings WHERE memory_id=?").bind(1, id).run(); }

  // ---- graph ----

  void add_edge(const GraphEdge& e) {
    if (e.src == e.dst) throw Error(Errc::invalid_argument, "graph edges may not be self-loops");
    if (!(e.weight > 0.0 && e.weight <= 1.0)) throw Error(Errc::invalid_argument, "edge weight must be in (0, 1]");
    if (!exists(e.src) || !exists(e.dst)) throw Error(Errc::unknown_id, "edge endpoint does not exist");
    db_.prepare("INSERT OR REPLACE INTO edges(src, dst, relation, weight) VALUES(?,?,?,?)")
        .bind(1, e.src)
        .bind(2, e.dst)
        .bind(3, e.relation)
        .bind(4, e.weight)
        .run();
  }

  std::vector<GraphEdge> edges() {
    auto st = db_.prepare("SELECT src, dst, relation, weight FROM edges ORDER BY src, dst, relation");
    std::vector<GraphEdge> out;
    while (st.step()) out.push_back({st.u64(0), st.u64(1), st.text(2), st.real(3)});
    return out;
  }

  // ---- trust ----

  void set_trust(const std::string& agent, double trust) {
    if (!(trust >= 0.0 && trust <= 1.0)) throw Error(Errc::invalid_argument, "trust must be in [0, 1]");
    db_.prepare("INSERT OR REPLACE INTO trust(agent_id, trust) VALUES(?,?)").bind(1, agent).bind(2, trust).run();
  }

  /// Unknown agents are fully trusted.
  double trust(const std::string& agent) {
    auto st = db_.prepare("SELECT trust FROM trust WHERE agent_id=?");
    st.bind(1, agent);
    return st.step() ? st.real(0) : 1.0;
  }

  std::vector<TrustEntry> trust_entries() {
    auto st = db_.prepare("SELECT agent_id, trust FROM trust ORDER BY agent_id");
    std::vector<TrustEntry> out;
    while (st.step()) out.push_back({st.text(0), st.real(1)});
    return out;
  }

  // ---- gists ----

  std::uint64_t add_gist(GistBlock g) {
    std::sort(g.member_ids.begin(), g.member_ids.end());
    if (g.member_ids.size() < 2) throw Error(Errc::invalid_argument, "a gist needs at least two members");
    if (std::adjacent_find(g.member_ids.begin(), g.member_ids.end()) != g.member_ids.end())
      throw Error(Errc::invalid_argument, "gist members must be distinct");
    if (g.embedding.size() != dim_) throw Error(Errc::dimension_mismatch, "gist embedding dim");
    return atomically([&] {
      for (auto m : g.member_ids)
        if (!exists(m)) throw Error(Errc::unknown_id, "gist member does not exist");
      auto st = g.id ? db_.prepare("INSERT INTO gists(id, summary, embedding) VALUES(?,?,?)")
                     : db_.prepare("INSERT INTO gists(summary, embedding) VALUES(?,?)");
      int i = 1;
      if (g.id) st.bind(i++, g.id);
      st.bind(i++, g.summary_text);
      st.bind_blob(i, float_bytes(g.embedding));
      st.run();
      const auto id = g.id ? g.id : static_cast<std::uint64_t>(db_.last_insert_id());
      auto ins = db_.prepare("INSERT INTO gist_members(gist_id, memory_id) VALUES(?,?)");
      for (auto m : g.member_ids) {
        ins.bind(1, id).bind(2, m);
        ins.run();
        ins.reset();
      }
      return id;
    });
  }

  std::vector<GistBlock> gists() {
    std::vector<GistBlock> out;
    auto st = db_.prepare("SELECT id, summary, embedding FROM gists ORDER BY id");
    while (st.step()) out.push_back({st.u64(0), {}, st.text(1), floats_from_bytes(st.blob(2))});
    auto mem = db_.prepare("SELECT gist_id, memory_id FROM gist_members ORDER BY gist_id, memory_id");
    std::size_t gi = 0;
    while (mem.step()) {
      const auto gid = mem.u64(0);
      while (gi < out.size() && out[gi].id < gid) ++gi;
      if (gi < out.size() && out[gi].id == gid) out[gi].member_ids.push_back(mem.u64(1));
    }
    return out;
  }

  void delete_gist(std::uint64_t id) { db_.prepare("DELETE FROM gists WHERE id=?").bind(1, id).run(); }

  // ---- patterns and prompts ----

  std::uint64_t upsert_pattern(const Pattern& p) {
    auto st = db_.prepare(
        "INSERT INTO patterns(subject, predicate, evidence, agree, rate, confidence, sources) VALUES(?,?,?,?,?,?,?) "
        "ON CONFLICT(subject, predicate) DO UPDATE SET evidence=excluded.evidence, agree=excluded.agree, "
        "rate=excluded.rate, confidence=excluded.confidence, sources=excluded.sources");
    st.bind(1, p.subject)
        .bind(2, p.predicate)
        .bind(3, p.evidence)
        .bind(4, p.agree)
        .bind(5, p.rate)
        .bind(6, p.confidence)
        .bind(7, nlohmann::json(p.source_ids).dump());
    st.run();
    auto q = db_.prepare("SELECT id FROM patterns WHERE subject=? AND predicate=?");
    q.bind(1, p.subject).bind(2, p.predicate);
    q.step();
    return q.u64(0);
  }

  std::optional<Pattern> find_pattern(const std::string& subject, const std::string& predicate) {
    auto st = db_.prepare(std::string(pattern_select) + " WHERE subject=? AND predicate=?");
    st.bind(1, subject).bind(2, predicate);
    if (!st.step()) return std::nullopt;
    return read_pattern(st);
  }

  std::vector<Pattern> patterns() {
    auto st = db_.prepare(std::string(pattern_select) + " ORDER BY id");
    std::vector<Pattern> out;
    while (st.step()) out.push_back(read_pattern(st));
    return out;
  }

  std::uint64_t add_soft_prompt(const SoftPrompt& p) {
    auto st = p.id ? db_.prepare(
                         "INSERT INTO soft_prompts(id, text, token_estimate, pattern_ids, generated_at) "
                         "VALUES(?,?,?,?,?)")
                   : db_.prepare(
                         "INSERT INTO soft_prompts(text, token_estimate, pattern_ids, generated_at) VALUES(?,?,?,?)");
    const int o = p.id ? 1 : 0;
    if (p.id) st.bind(1, p.id);
    st.bind(o + 1, p.text)
        .bind(o + 2, p.token_estimate)
        .bind(o + 3, nlohmann::json(p.pattern_ids).dump())
        .bind(o + 4, to_millis(p.generated_at));
    st.run();
    return p.id ? p.id : static_cast<std::uint64_t>(db_.last_insert_id());
  }

  std::vector<SoftPrompt> soft_prompts() {
    auto st = db_.prepare("SELECT id, text, token_estimate, pattern_ids, generated_at FROM soft_prompts ORDER BY id");
    std::vector<SoftPrompt> out;
    while (st.step())
      out.push_back({st.u64(0), st.text(1), st.u64(2),
                     nlohmann::json::parse(st.text(3)).get<std::vector<std::uint64_t>>(), from_millis(st.i64(4))});
    return out;
  }

  // ---- pending-queue bookkeeping ----

  bool pending_applied(const PendingKey& k) {
    auto st = db_.prepare("SELECT 1 FROM pending_applied WHERE queue_id=? AND seq=?");
    st.bind(1, k.queue_id).bind(2, k.seq);
    return st.step();
  }

  std::size_t pending_applied_count(const std::string& queue_id) {
    auto st = db_.prepare("SELECT COUNT(*) FROM pending_applied WHERE queue_id=?");
    st.bind(1, queue_id);
    st.step();
    return static_cast<std::size_t>(st.i64(0));
  }

  // ---- canonical export / import ----

  /// Line-delimited JSON, one object per line: meta, then memories (with
  /// their embedding) by id, edges, trust, gists, patterns, prompts.
  void export_canonical(std::ostream& out) {
    using nlohmann::json;
    out << json{{"kind", "meta"}, {"dim", dim_}, {"schema_version", schema_version}, {"next_id", next_id()}}.dump()
        << '\n';
    std::map<MemoryId, EmbeddingRecord> embs;
    for (auto& e : embeddings()) embs.emplace(e.memory_id, std::move(e));
    for (const auto& m : scan()) {
      nlohmann::json j = memory_json(m);
      if (auto it = embs.find(m.id); it != embs.end()) j["embedding"] = embedding_json(it->second);
      out << j.dump() << '\n';
    }
    for (const auto& e : edges())
      out << json{{"kind", "edge"}, {"src", e.src}, {"dst", e.dst}, {"relation", e.relation}, {"weight", e.weight}}
                 .dump()
          << '\n';
    for (const auto& t : trust_entries())
      out << json{{"kind", "trust"}, {"agent", t.agent_id}, {"trust", t.trust}}.dump() << '\n';
    for (const auto& g : gists())
      out << json{{"kind", "gist"},
                  {"id", g.id},
                  {"members", g.member_ids},
                  {"summary", g.summary_text},
                  {"embedding", to_hex(float_bytes(g.embedding))}}
                 .dump()
          << '\n';
    for (const auto& p : patterns())
      out << json{{"kind", "pattern"},  {"id", p.id},       {"subject", p.subject},
                  {"predicate", p.predicate}, {"evidence", p.evidence}, {"agree", p.agree},
                  {"rate", p.rate},     {"confidence", p.confidence}, {"sources", p.source_ids}}
                 .dump()
          << '\n';
    for (const auto& p : soft_prompts())
      out << json{{"kind", "soft_prompt"}, {"id", p.id},
                  {"text", p.text},        {"token_estimate", p.token_estimate},
                  {"patterns", p.pattern_ids}, {"generated_at", format_rfc3339(p.generated_at)}}
                 .dump()
          << '\n';
    auto st = db_.prepare("SELECT queue_id, seq, memory_id FROM pending_applied ORDER BY queue_id, seq");
    while (st.step())
      out << json{{"kind", "pending_applied"}, {"queue", st.text(0)}, {"seq", st.u64(1)}, {"memory", st.u64(2)}}.dump()
          << '\n';
  }

  /// Loads a canonical export into this (empty) store, preserving ids.
  void import_canonical(std::istream& in) {
    using nlohmann::json;
    if (count() != 0) throw Error(Errc::invalid_argument, "import needs an empty store");
    atomically([&] {
      std::string line;
      std::size_t lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
          j = json::parse(line);
        } catch (const json::exception& e) {
          throw Error(Errc::corrupt, "import line " + std::to_string(lineno) + ": " + e.what());
        }
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "meta") {
          if (j.at("dim").get<std::uint32_t>() != dim_) throw Error(Errc::dimension_mismatch, "import: dim mismatch");
          if (j.contains("next_id")) set_meta("next_id", std::to_string(j.at("next_id").get<MemoryId>()));
        } else if (kind == "memory") {
          auto rec = memory_from_json(j);
          validate(rec);
          if (rec.id == 0) throw Error(Errc::corrupt, "import: memory without id");
          insert_memory(rec);
          bump_next_id(rec.id);
          if (j.contains("embedding")) put_embedding(embedding_from_json(rec.id, j.at("embedding")));
        } else if (kind == "edge") {
          add_edge({j.at("src").get<MemoryId>(), j.at("dst").get<MemoryId>(), j.at("relation").get<std::string>(),
                    j.at("weight").get<double>()});
        } else if (kind == "trust") {
          set_trust(j.at("agent").get<std::string>(), j.at("trust").get<double>());
        } else if (kind == "gist") {
          auto bytes = from_hex(j.at("embedding").get<std::string>());
          add_gist({j.at("id").get<std::uint64_t>(), j.at("members").get<std::vector<MemoryId>>(),
                    j.at("summary").get<std::string>(), floats_from_bytes(bytes)});
        } else if (kind == "pattern") {
          db_.prepare(
                 "INSERT INTO patterns(id, subject, predicate, evidence, agree, rate, confidence, sources) "
                 "VALUES(?,?,?,?,?,?,?,?)")
              .bind(1, j.at("id").get<std::uint64_t>())
              .bind(2, j.at("subject").get<std::string>())
              .bind(3, j.at("predicate").get<std::string>())
              .bind(4, j.at("evidence").get<std::uint64_t>())
              .bind(5, j.at("agree").get<std::uint64_t>())
              .bind(6, j.at("rate").get<double>())
              .bind(7, j.at("confidence").get<double>())
              .bind(8, j.at("sources").dump())
              .run();
        } else if (kind == "soft_prompt") {
          add_soft_prompt({j.at("id").get<std::uint64_t>(), j.at("text").get<std::string>(),
                           j.at("token_estimate").get<std::uint64_t>(),
                           j.at("patterns").get<std::vector<std::uint64_t>>(),
                           parse_rfc3339(j.at("generated_at").get<std::string>())});
        } else if (kind == "pending_applied") {
          db_.prepare("INSERT INTO pending_applied(queue_id, seq, memory_id) VALUES(?,?,?)")
              .bind(1, j.at("queue").get<std::string>())
              .bind(2, j.at("seq").get<std::uint64_t>())
              .bind(3, j.at("memory").get<std::uint64_t>())
              .run();
        } else {
          throw Error(Errc::corrupt, "import: unknown record kind '" + kind + "'");
        }
      }
    });
  }

  /// Integrity scan. Empty result means the store is consistent.
  std::vector<std::string> verify(const LifecycleThresholds& th = {}) {
    std::vector<std::string> issues;
    {
      auto st = db_.prepare("PRAGMA integrity_check");
      while (st.step())
        if (st.text(0) != "ok") issues.push_back("sqlite: " + st.text(0));
    }
    auto q = [&](std::string_view sql, const std::string& what) {
      auto st = db_.prepare(sql);
      while (st.step()) issues.push_back(what + " " + std::to_string(st.i64(0)));
    };
    q("SELECT e.memory_id FROM embeddings e LEFT JOIN memories m ON m.id=e.memory_id WHERE m.id IS NULL",
      "embedding references missing memory");
    q("SELECT m.id FROM memories m LEFT JOIN embeddings e ON e.memory_id=m.id "
      "WHERE e.memory_id IS NULL AND m.lifecycle != 'forgotten'",
      "live memory without embedding");
    q("SELECT m.id FROM memories m JOIN embeddings e ON e.memory_id=m.id WHERE m.lifecycle = 'forgotten'",
      "forgotten memory still has an embedding");
    q("SELECT e.src FROM edges e LEFT JOIN memories a ON a.id=e.src LEFT JOIN memories b ON b.id=e.dst "
      "WHERE a.id IS NULL OR b.id IS NULL",
      "edge with missing endpoint, src");
    q("SELECT src FROM edges WHERE src=dst", "self-loop at");
    q("SELECT g.gist_id FROM gist_members g LEFT JOIN memories m ON m.id=g.memory_id WHERE m.id IS NULL",
      "gist member missing, gist");
    q("SELECT g.id FROM gists g LEFT JOIN gist_members m ON m.gist_id=g.id GROUP BY g.id "
      "HAVING COUNT(m.memory_id) < 2",
      "gist with fewer than two members");
    for (const auto& e : embeddings()) {
      const auto expected = e.bits == Bits::f32 ? e.dim * sizeof(float) : packed_size(e.bits, e.dim);
      const auto actual = e.bits == Bits::f32 ? e.full.size() * sizeof(float) : e.quantized.packed.size();
      if (expected != actual) issues.push_back("payload length mismatch for memory " + std::to_string(e.memory_id));
    }
    for (const auto& m : scan()) {
      if (m.importance < 0 || m.importance > 1 || m.emotion < 0 || m.emotion > 1 || m.retention < 0 ||
          m.retention > 1)
        issues.push_back("field out of range in memory " + std::to_string(m.id));
      if (m.lifecycle != expected_lifecycle(m.retention, th))
        issues.push_back("lifecycle inconsistent with retention in memory " + std::to_string(m.id));
    }
    return issues;
  }

  static Lifecycle expected_lifecycle(double r, const LifecycleThresholds& th) {
    if (r > th.active) return Lifecycle::active;
    if (r > th.warm) return Lifecycle::warm;
    if (r > th.cold) return Lifecycle::cold;
    if (r > th.archive) return Lifecycle::archive;
    return Lifecycle::forgotten;
  }

  static std::vector<unsigned char> float_bytes(std::span<const float> v) {
    std::vector<unsigned char> out(v.size_bytes());
    std::memcpy(out.data(), v.data(), out.size());
    return out;
  }

  static std::vector<float> floats_from_bytes(std::span<const unsigned char> b) {
    if (b.size() % sizeof(float)) throw Error(Errc::corrupt, "float payload has a partial element");
    std::vector<float> out(b.size() / sizeof(float));
    std::memcpy(out.data(), b.data(), b.size());
    return out;
  }

 private:
  static constexpr std::string_view memory_select =
      "SELECT id, text, entities, importance, emotion, confirmations, access_count, event_time, ingest_time, "
      "last_access_time, source_agent, lifecycle, strength, retention, forgotten_at FROM memories";
  static constexpr std::string_view embedding_select =
      "SELECT memory_id, dim, bits, payload, base_variance, rotation_seed, codebook_id FROM embeddings";
  static constexpr std::string_view pattern_select =
      "SELECT id, subject, predicate, evidence, agree, rate, confidence, sources FROM patterns";

  void create_schema() {
    db_.exec(R"(
      CREATE TABLE IF NOT EXISTS meta(key TEXT PRIMARY KEY, value TEXT NOT NULL);
      CREATE TABLE IF NOT EXISTS memories(
        id INTEGER PRIMARY KEY, text TEXT NOT NULL, entities TEXT NOT NULL,
        importance REAL NOT NULL, emotion REAL NOT NULL, confirmations INTEGER NOT NULL,
        access_count INTEGER NOT NULL, event_time INTEGER NOT NULL, ingest_time INTEGER NOT NULL,
        last_access_time INTEGER NOT NULL, source_agent TEXT NOT NULL, lifecycle TEXT NOT NULL,
        strength REAL NOT NULL, retention REAL NOT NULL, forgotten_at INTEGER);
      CREATE TABLE IF NOT EXISTS embeddings(
        memory_id INTEGER PRIMARY KEY REFERENCES memories(id) ON DELETE CASCADE,
        dim INTEGER NOT NULL, bits INTEGER NOT NULL, payload BLOB NOT NULL, base_variance REAL NOT NULL,
        rotation_seed INTEGER NOT NULL, codebook_id INTEGER NOT NULL);
      CREATE TABLE IF NOT EXISTS edges(
        src INTEGER NOT NULL REFERENCES memories(id) ON DELETE CASCADE,
        dst INTEGER NOT NULL REFERENCES memories(id) ON DELETE CASCADE,
        relation TEXT NOT NULL, weight REAL NOT NULL, PRIMARY KEY(src, dst, relation));
      CREATE TABLE IF NOT EXISTS trust(agent_id TEXT PRIMARY KEY, trust REAL NOT NULL);
      CREATE TABLE IF NOT EXISTS gists(id INTEGER PRIMARY KEY, summary TEXT NOT NULL, embedding BLOB NOT NULL);
      CREATE TABLE IF NOT EXISTS gist_members(
        gist_id INTEGER NOT NULL REFERENCES gists(id) ON DELETE CASCADE,
        memory_id INTEGER NOT NULL REFERENCES memories(id) ON DELETE CASCADE,
        PRIMARY KEY(gist_id, memory_id));
      CREATE TABLE IF NOT EXISTS patterns(
        id INTEGER PRIMARY KEY, subject TEXT NOT NULL, predicate TEXT NOT NULL, evidence INTEGER NOT NULL,
        agree INTEGER NOT NULL, rate REAL NOT NULL, confidence REAL NOT NULL, sources TEXT NOT NULL,
        UNIQUE(subject, predicate));
      CREATE TABLE IF NOT EXISTS soft_prompts(
        id INTEGER PRIMARY KEY, text TEXT NOT NULL, token_estimate INTEGER NOT NULL, pattern_ids TEXT NOT NULL,
        generated_at INTEGER NOT NULL);
      CREATE TABLE IF NOT EXISTS pending_applied(
        queue_id TEXT NOT NULL, seq INTEGER NOT NULL, memory_id INTEGER NOT NULL, PRIMARY KEY(queue_id, seq));
    )");
  }

  std::optional<std::string> meta(const std::string& key) {
    auto st = db_.prepare("SELECT value FROM meta WHERE key=?");
    st.bind(1, key);
    if (!st.step()) return std::nullopt;
    return st.text(0);
  }
  void bump_next_id(MemoryId used) {
    if (used + 1 > next_id()) set_meta("next_id", std::to_string(used + 1));
  }
  void set_meta(const std::string& key, const std::string& value) {
    db_.prepare("INSERT OR REPLACE INTO meta(key, value) VALUES(?,?)").bind(1, key).bind(2, value).run();
  }

  static void validate(const MemoryRecord& r) {
    if (r.text.empty()) throw Error(Errc::invalid_argument, "memory text must be non-empty");
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(r.importance)) throw Error(Errc::invalid_argument, "importance must be in [0, 1]");
    if (!unit(r.emotion)) throw Error(Errc::invalid_argument, "emotional salience must be in [0, 1]");
    if (!unit(r.retention)) throw Error(Errc::invalid_argument, "retention must be in [0, 1]");
    if (!(r.strength >= 0.0)) throw Error(Errc::invalid_argument, "strength must be non-negative");
  }

  void bind_memory_fields(sql::Stmt& st, const MemoryRecord& r) {
    st.bind(1, r.text)
        .bind(2, nlohmann::json(r.entities).dump())
        .bind(3, r.importance)
        .bind(4, r.emotion)
        .bind(5, r.confirmations)
        .bind(6, r.access_count)
        .bind(7, to_millis(r.event_time))
        .bind(8, to_millis(r.ingest_time))
        .bind(9, to_millis(r.last_access_time))
        .bind(10, r.source_agent)
        .bind(11, lifecycle_name(r.lifecycle))
        .bind(12, r.strength)
        .bind(13, r.retention);
    if (r.forgotten_at)
      st.bind(14, to_millis(*r.forgotten_at));
    else
      st.bind_null(14);
  }

  void insert_memory(const MemoryRecord& r) {
    auto st = db_.prepare(
        "INSERT INTO memories(text, entities, importance, emotion, confirmations, access_count, event_time, "
        "ingest_time, last_access_time, source_agent, lifecycle, strength, retention, forgotten_at, id) "
        "VALUES(?,?,?,?,?,?,?,?,?,?,?,?,?,?,?)");
    bind_memory_fields(st, r);
    if (r.id)
      st.bind(15, r.id);
    else
      st.bind_null(15);
    st.run();
  }

  static MemoryRecord read_memory(const sql::Stmt& st) {
    MemoryRecord r;
    r.id = st.u64(0);
    r.text = st.text(1);
    r.entities = nlohmann::json::parse(st.text(2)).get<std::vector<std::string>>();
    r.importance = st.real(3);
    r.emotion = st.real(4);
    r.confirmations = static_cast<std::uint32_t>(st.i64(5));
    r.access_count = st.u64(6);
    r.event_time = from_millis(st.i64(7));
    r.ingest_time = from_millis(st.i64(8));
    r.last_access_time = from_millis(st.i64(9));
    r.source_agent = st.text(10);
    r.lifecycle = lifecycle_from_name(st.text(11));
    r.strength = st.real(12);
    r.retention = st.real(13);
    if (!st.is_null(14)) r.forgotten_at = from_millis(st.i64(14));
    return r;
  }

  EmbeddingRecord read_embedding(const sql::Stmt& st) const {
    EmbeddingRecord e;
    e.memory_id = st.u64(0);
    e.dim = static_cast<std::uint32_t>(st.i64(1));
    e.bits = bits_from_int(static_cast<int>(st.i64(2)));
    auto payload = st.blob(3);
    e.base_variance = st.real(4);
    if (e.bits == Bits::f32) {
      e.full = floats_from_bytes(payload);
    } else {
      e.quantized = QuantizedVector{e.bits, e.dim, {payload.begin(), payload.end()}, st.u64(5), st.u64(6)};
    }
    return e;
  }

  static Pattern read_pattern(const sql::Stmt& st) {
    return {st.u64(0),  st.text(1), st.text(2), st.u64(3), st.u64(4), st.real(5),
            st.real(6), nlohmann::json::parse(st.text(7)).get<std::vector<MemoryId>>()};
  }

  static nlohmann::json memory_json(const MemoryRecord& m) {
    nlohmann::json j{{"kind", "memory"},
                     {"id", m.id},
                     {"text", m.text},
                     {"entities", m.entities},
                     {"importance", m.importance},
                     {"emotion", m.emotion},
                     {"confirmations", m.confirmations},
                     {"access_count", m.access_count},
                     {"event_time", to_millis(m.event_time)},
                     {"ingest_time", to_millis(m.ingest_time)},
                     {"last_access_time", to_millis(m.last_access_time)},
                     {"source_agent", m.source_agent},
                     {"lifecycle", lifecycle_name(m.lifecycle)},
                     {"strength", m.strength},
                     {"retention", m.retention}};
    j["forgotten_at"] = m.forgotten_at ? nlohmann::json(to_millis(*m.forgotten_at)) : nlohmann::json(nullptr);
    return j;
  }

  static MemoryRecord memory_from_json(const nlohmann::json& j) {
    MemoryRecord m;
    m.id = j.at("id").get<MemoryId>();
    m.text = j.at("text").get<std::string>();
    m.entities = j.at("entities").get<std::vector<std::string>>();
    m.importance = j.at("importance").get<double>();
    m.emotion = j.at("emotion").get<double>();
    m.confirmations = j.at("confirmations").get<std::uint32_t>();
    m.access_count = j.at("access_count").get<std::uint64_t>();
    m.event_time = from_millis(j.at("event_time").get<std::int64_t>());
    m.ingest_time = from_millis(j.at("ingest_time").get<std::int64_t>());
    m.last_access_time = from_millis(j.at("last_access_time").get<std::int64_t>());
    m.source_agent = j.at("source_agent").get<std::string>();
    m.lifecycle = lifecycle_from_name(j.at("lifecycle").get<std::string>());
    m.strength = j.at("strength").get<double>();
    m.retention = j.at("retention").get<double>();
    if (!j.at("forgotten_at").is_null()) m.forgotten_at = from_millis(j.at("forgotten_at").get<std::int64_t>());
    return m;
  }

  static nlohmann::json embedding_json(const EmbeddingRecord& e) {
    nlohmann::json j{{"dim", e.dim}, {"bits", bit_count(e.bits)}, {"base_variance", e.base_variance}};
    if (e.bits == Bits::f32) {
      j["payload"] = to_hex(float_bytes(e.full));
    } else {
      j["payload"] = to_hex(e.quantized.packed);
      j["rotation_seed"] = e.quantized.rotation_seed;
      j["codebook_id"] = e.quantized.codebook_id;
    }
    return j;
  }

  static EmbeddingRecord embedding_from_json(MemoryId id, const nlohmann::json& j) {
    EmbeddingRecord e;
    e.memory_id = id;
    e.dim = j.at("dim").get<std::uint32_t>();
    e.bits = bits_from_int(j.at("bits").get<int>());
    e.base_variance = j.at("base_variance").get<double>();
    auto bytes = from_hex(j.at("payload").get<std::string>());
    if (e.bits == Bits::f32) {
      e.full = floats_from_bytes(bytes);
    } else {
      e.quantized = QuantizedVector{e.bits, e.dim, {bytes.begin(), bytes.end()},
                                    j.at("rotation_seed").get<std::uint64_t>(), j.at("codebook_id").get<std::uint64_t>()};
    }
    return e;
  }

  sql::Db db_;
  std::filesystem::path path_;
  std::uint32_t dim_ = 0;
  std::uint64_t savepoint_counter_ = 0;
};

}  // namespace engram
