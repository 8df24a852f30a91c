#pragma once

// Operation dispatch shared by the daemon and the direct (in-process) path,
// so both produce the same payloads. Requests and payloads are JSON objects.

#include "engram/engine.hpp"

namespace engram {

inline std::optional<Timestamp> opt_time(const nlohmann::json& args, const char* key) {
  if (!args.contains(key) || args[key].is_null()) return std::nullopt;
  return parse_rfc3339(args[key].get<std::string>());
}

inline RecallArgs recall_args_from_json(const nlohmann::json& j) {
  RecallArgs a;
  a.text = j.value("text", std::string());
  if (j.contains("k")) a.k = j["k"].get<std::size_t>();
  if (j.contains("multi_hop") && !j["multi_hop"].is_null()) a.multi_hop = j["multi_hop"].get<bool>();
  if (j.contains("entities")) a.entities = j["entities"].get<std::vector<std::string>>();
  a.as_of = opt_time(j, "as_of");
  a.event_time_hint = opt_time(j, "event_time_hint");
  if (j.contains("embedding")) a.embedding = j["embedding"].get<std::vector<float>>();
  a.consume = j.value("consume", true);
  return a;
}

inline nlohmann::json recall_payload(const RecallResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    nlohmann::json ranks = nlohmann::json::object();
    for (auto c : all_channels) {
      const auto rk = row.entry.ranks[static_cast<std::size_t>(c)];
      ranks[channel_name(c)] = rk ? nlohmann::json(rk) : nlohmann::json(nullptr);
    }
    rows.push_back({{"rank", i + 1},
                    {"id", row.record.id},
                    {"text", row.record.text},
                    {"lifecycle", lifecycle_name(row.record.lifecycle)},
                    {"bits", row.bits},
                    {"fused", row.entry.fused},
                    {"rerank", row.entry.rerank ? nlohmann::json(*row.entry.rerank) : nlohmann::json(nullptr)},
                    {"rescore", row.entry.rescore ? nlohmann::json(*row.entry.rescore) : nlohmann::json(nullptr)},
                    {"final", row.entry.final_score},
                    {"ranks", ranks}});
  }
  return {{"rows", rows},
          {"multi_hop", r.multi_hop},
          {"multihop_fallback", r.multihop_fallback},
          {"rerank_fallback", r.rerank_fallback},
          {"rerank_error", r.rerank_error}};
}

inline nlohmann::json decay_payload(const DecayReport& rep) {
  std::ostringstream lines;
  rep.write_jsonl(lines);
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [k, v] : rep.transitions)
    counts[std::string(lifecycle_name(k.first)) + "->" + lifecycle_name(k.second)] = v;
  return {{"time", format_rfc3339(rep.pass_time)},
          {"memories", rep.entries.size()},
          {"changed", rep.changed()},
          {"collected", rep.collected},
          {"transitions", counts},
          {"report", lines.str()}};
}

inline nlohmann::json receipt_payload(const DeletionReceipt& r) {
  return {{"id", r.id},
          {"sha256", r.sha256},
          {"deleted_at", format_rfc3339(r.deleted_at)},
          {"absent", r.absent},
          {"integrity_issues", r.integrity_issues}};
}

inline bool op_writes(std::string_view op) {
  return op != "verify" && op != "export" && op != "ping" && op != "stats";
}

/// Runs one operation in-process. The caller holds the writer lock for
/// writing operations.
inline nlohmann::json execute_direct(Engine& e, const std::string& op, const nlohmann::json& args) {
  using nlohmann::json;
  if (op == "ping") return {{"pong", true}};
  if (op == "remember") return {{"id", e.remember(remember_args_from_json(args))}};
  if (op == "recall") return recall_payload(e.recall(recall_args_from_json(args)));
  if (op == "decay") return decay_payload(e.decay(opt_time(args, "now").value_or(now_utc())));
  if (op == "consolidate") {
    json gists = json::array();
    for (const auto& g : e.consolidate())
      gists.push_back({{"id", g.id}, {"members", g.member_ids}, {"summary", g.summary_text}});
    return {{"gists", gists}};
  }
  if (op == "prompt") {
    auto p = e.prompt(opt_time(args, "now").value_or(now_utc()));
    return {{"id", p.id}, {"text", p.text}, {"token_estimate", p.token_estimate}, {"patterns", p.pattern_ids}};
  }
  if (op == "observe") {
    std::optional<MemoryId> src;
    if (args.contains("source")) src = args["source"].get<MemoryId>();
    auto p = e.observe(args.at("subject").get<std::string>(), args.at("predicate").get<std::string>(),
                       args.at("agrees").get<bool>(), src);
    return {{"id", p.id},         {"evidence", p.evidence}, {"agree", p.agree},
            {"rate", p.rate},     {"confidence", p.confidence}};
  }
  if (op == "link") {
    e.link(args.at("src").get<MemoryId>(), args.at("dst").get<MemoryId>(), args.value("relation", "related"),
           args.value("weight", 1.0));
    return {{"linked", true}};
  }
  if (op == "trust") {
    e.set_trust(args.at("agent").get<std::string>(), args.at("trust").get<double>());
    return {{"agent", args.at("agent")}, {"trust", args.at("trust")}};
  }
  if (op == "forget") return receipt_payload(e.forget(args.at("id").get<MemoryId>()));
  if (op == "verify") {
    auto issues = e.verify();
    return {{"ok", issues.empty()}, {"issues", issues}};
  }
  if (op == "export") {
    std::ostringstream out;
    e.export_to(out);
    return {{"text", out.str()}};
  }
  if (op == "import") {
    std::istringstream in(args.at("text").get<std::string>());
    e.import_from(in);
    return {{"memories", e.store().count()}};
  }
  throw Error(Errc::invalid_argument, "unknown operation '" + op + "'");
}

inline nlohmann::json error_json(const std::exception& ex) {
  if (auto* e = dynamic_cast<const Error*>(&ex))
    return {{"code", errc_name(e->code())}, {"message", e->what()}, {"retryable", e->code() == Errc::busy}};
  if (dynamic_cast<const nlohmann::json::exception*>(&ex))
    return {{"code", errc_name(Errc::invalid_argument)}, {"message", ex.what()}, {"retryable", false}};
  return {{"code", "internal"}, {"message", ex.what()}, {"retryable", false}};
}

}  // namespace engram
