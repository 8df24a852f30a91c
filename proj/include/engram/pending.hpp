#pragma once

#include <random>

#include <json.hpp>

#include "engram/sqlite.hpp"

namespace engram {

/// Durable write-ahead queue kept apart from the main store. An entry is
/// acknowledged only after its append has committed; entries are applied in
/// sequence order and the store records each applied (queue, seq) pair.
class PendingQueue {
 public:
  struct Entry {
    std::uint64_t seq = 0;
    nlohmann::json request;
    MemoryId reserved_id = 0;
  };

  static std::filesystem::path path(const std::filesystem::path& dir) { return dir / "pending.db"; }

  explicit PendingQueue(const std::filesystem::path& db_path) : db_(db_path) {
    db_.exec("PRAGMA journal_mode=WAL");
    db_.exec("PRAGMA synchronous=FULL");
    db_.exec(
        "CREATE TABLE IF NOT EXISTS meta(key TEXT PRIMARY KEY, value TEXT NOT NULL);"
        "CREATE TABLE IF NOT EXISTS entries(seq INTEGER PRIMARY KEY AUTOINCREMENT, request TEXT NOT NULL, "
        "reserved_id INTEGER NOT NULL, enqueued_at INTEGER NOT NULL)");
    auto st = db_.prepare("SELECT value FROM meta WHERE key='queue_id'");
    if (st.step()) {
      queue_id_ = st.text(0);
    } else {
      std::random_device rd;
      const std::uint64_t r = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
                              static_cast<std::uint64_t>(now_utc().time_since_epoch().count());
      char buf[17];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r));
      queue_id_ = buf;
      db_.prepare("INSERT INTO meta(key, value) VALUES('queue_id', ?)").bind(1, queue_id_).run();
    }
  }

  const std::string& queue_id() const { return queue_id_; }

  struct Ack {
    std::uint64_t seq = 0;
    MemoryId id = 0;
  };

  /// Reserves the memory id and appends the entry in one transaction.
  /// Durable once this returns.
  Ack append(const nlohmann::json& request) {
    sql::Transaction tx(db_);
    const MemoryId id = take_id(0);
    auto st = db_.prepare("INSERT INTO entries(request, reserved_id, enqueued_at) VALUES(?,?,?)");
    st.bind(1, request.dump()).bind(2, id).bind(3, to_millis(now_utc()));
    st.run();
    const auto seq = static_cast<std::uint64_t>(db_.last_insert_id());
    tx.commit();
    if (append_hook) append_hook();
    return {seq, id};
  }

  /// Memory ids come from one counter shared by the daemon and direct
  /// writers; the result is never below floor.
  MemoryId reserve_id(MemoryId floor) {
    sql::Transaction tx(db_);
    const MemoryId id = take_id(floor);
    tx.commit();
    return id;
  }

  /// Moves the counter to at least floor without taking an id.
  void raise_floor(MemoryId floor) {
    sql::Transaction tx(db_);
    set_counter(std::max(counter(), floor));
    tx.commit();
  }

  std::vector<Entry> entries() {
    auto st = db_.prepare("SELECT seq, request, reserved_id FROM entries ORDER BY seq");
    std::vector<Entry> out;
    while (st.step()) out.push_back({st.u64(0), nlohmann::json::parse(st.text(1)), st.u64(2)});
    return out;
  }

  std::size_t size() {
    auto st = db_.prepare("SELECT COUNT(*) FROM entries");
    st.step();
    return static_cast<std::size_t>(st.i64(0));
  }

  MemoryId max_reserved_id() {
    auto st = db_.prepare("SELECT COALESCE(MAX(reserved_id), 0) FROM entries");
    st.step();
    return st.u64(0);
  }

  /// Drops an entry whose effect is already committed to the store.
  void remove(std::uint64_t seq) { db_.prepare("DELETE FROM entries WHERE seq=?").bind(1, seq).run(); }

  std::function<void()> append_hook;

 private:
  MemoryId counter() {
    auto st = db_.prepare("SELECT value FROM meta WHERE key='next_id'");
    return st.step() ? static_cast<MemoryId>(std::stoull(st.text(0))) : 1;
  }
  void set_counter(MemoryId v) {
    db_.prepare("INSERT INTO meta(key, value) VALUES('next_id', ?) ON CONFLICT(key) DO UPDATE SET value=excluded.value")
        .bind(1, std::to_string(v))
        .run();
  }
  MemoryId take_id(MemoryId floor) {
    const MemoryId id = std::max({counter(), floor, max_reserved_id() + 1});
    set_counter(id + 1);
    return id;
  }

  sql::Db db_;
  std::string queue_id_;
};

}  // namespace engram
