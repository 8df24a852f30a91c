// engram: command-line front end. Commands route through a running daemon
// for the store when one answers, otherwise run in-process.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "engram/bench.hpp"
#include "engram/daemon.hpp"

namespace {

using nlohmann::json;

// exit codes besides the daemon's 0/10/11
constexpr int exit_error = 1;
constexpr int exit_usage = 2;
constexpr int exit_busy = 3;
constexpr int exit_unknown_id = 4;
constexpr int exit_bench_failed = 5;

struct Globals {
  std::string store;
  std::string config;
  bool porcelain = false;
  std::optional<std::uint64_t> seed;
};

std::string default_store() {
  if (const char* s = std::getenv("ENGRAM_STORE")) return s;
  if (const char* h = std::getenv("HOME")) return std::string(h) + "/.engram";
  return ".engram";
}

engram::Config make_config(const Globals& g) {
  engram::Config cfg;
  if (!g.config.empty()) {
    cfg = engram::load_config(g.config);
  } else if (auto p = std::filesystem::path(g.store) / "config.json"; std::filesystem::exists(p)) {
    cfg = engram::load_config(p);
  }
  if (g.seed) cfg.seed = *g.seed;
  return cfg;
}

int exit_for(const std::string& code) {
  if (code == "invalid-argument" || code == "dimension-mismatch") return exit_usage;
  if (code == "busy") return exit_busy;
  if (code == "unknown-id") return exit_unknown_id;
  if (code == "corrupt") return engram::exit_store_corrupt;
  return exit_error;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string opt_num(const json& v, const char* f) { return v.is_null() ? "-" : fmt(f, v.get<double>()); }

void print_recall(const json& p, bool explain) {
  const auto& rows = p["rows"];
  if (rows.empty()) {
    std::cout << "no results\n";
    return;
  }
  if (p.value("multi_hop", false))
    std::cout << "multi-hop" << (p.value("multihop_fallback", false) ? " (union fallback)" : "") << '\n';
  if (p.value("rerank_fallback", false)) std::cout << "reranker unavailable: " << p.value("rerank_error", "") << '\n';
  if (explain) {
    std::printf("%4s %6s %8s %8s %8s %8s", "rank", "id", "final", "fused", "rerank", "rescore");
    for (auto c : engram::all_channels) std::printf(" %5.5s", engram::channel_name(c));
    std::printf(" %4s  %s\n", "bits", "text");
  }
  for (const auto& r : rows) {
    if (!explain) {
      std::printf("%2zu. [%llu] %s\n", r["rank"].get<std::size_t>(), static_cast<unsigned long long>(r["id"].get<std::uint64_t>()),
                  r["text"].get<std::string>().c_str());
      continue;
    }
    std::printf("%4zu %6llu %8.4f %8.5f %8s %8s", r["rank"].get<std::size_t>(),
                static_cast<unsigned long long>(r["id"].get<std::uint64_t>()), r["final"].get<double>(),
                r["fused"].get<double>(), opt_num(r["rerank"], "%.4f").c_str(), opt_num(r["rescore"], "%.4f").c_str());
    for (auto c : engram::all_channels) {
      const auto& v = r["ranks"][engram::channel_name(c)];
      std::printf(" %5s", v.is_null() ? "-" : std::to_string(v.get<int>()).c_str());
    }
    std::printf(" %4d  %s\n", r["bits"].get<int>(), r["text"].get<std::string>().c_str());
  }
}

void print_human(const std::string& op, const json& p, bool explain) {
  if (op == "remember") {
    std::cout << p["id"].get<std::uint64_t>() << '\n';
  } else if (op == "recall") {
    print_recall(p, explain);
  } else if (op == "decay") {
    std::cout << p["report"].get<std::string>();
    std::cout << "decay at " << p["time"].get<std::string>() << ": " << p["memories"] << " memories, " << p["changed"]
              << " transitions, " << p["collected"] << " collected\n";
    for (const auto& [k, v] : p["transitions"].items()) std::cout << "  " << k << ": " << v << '\n';
  } else if (op == "consolidate") {
    std::cout << p["gists"].size() << " gist(s) created\n";
    for (const auto& g : p["gists"]) std::cout << "  gist " << g["id"] << " members " << g["members"].dump() << '\n';
  } else if (op == "prompt") {
    std::cout << p["text"].get<std::string>();
    if (!p["text"].get<std::string>().empty()) std::cout << '\n';
  } else if (op == "observe") {
    std::cout << "pattern " << p["id"] << ": " << p["agree"] << "/" << p["evidence"]
              << " agree, confidence " << fmt("%.3f", p["confidence"].get<double>()) << '\n';
  } else if (op == "forget") {
    std::cout << "deleted " << p["id"] << '\n'
              << "sha256 " << p["sha256"].get<std::string>() << '\n'
              << "deleted_at " << p["deleted_at"].get<std::string>() << '\n'
              << "absent " << (p["absent"].get<bool>() ? "yes" : "no") << '\n'
              << "integrity_issues " << p["integrity_issues"] << '\n';
  } else if (op == "verify") {
    for (const auto& i : p["issues"]) std::cout << i.get<std::string>() << '\n';
    std::cout << (p["ok"].get<bool>() ? "ok" : "integrity issues found") << '\n';
  } else if (op == "import") {
    std::cout << "imported " << p["memories"] << " memories\n";
  } else {
    std::cout << p.dump(2) << '\n';
  }
}

/// Sends one operation and prints the outcome; returns the exit code.
int run_op(const Globals& g, const std::string& op, const json& args, bool explain = false,
           const std::function<void(const json&)>& on_payload = {}) {
  const auto cfg = make_config(g);
  const auto res = engram::client_call(g.store, cfg, op, args);
  const auto& r = res.response;
  if (!r.value("ok", false)) {
    const auto& e = r["error"];
    if (g.porcelain)
      std::cout << json{{"ok", false}, {"error", e}, {"served_by", r.value("served_by", "")}}.dump() << '\n';
    std::cerr << "engram " << op << ": " << e.value("code", "error") << ": " << e.value("message", "") << '\n';
    return exit_for(e.value("code", ""));
  }
  if (on_payload) {
    on_payload(r["payload"]);
  } else if (g.porcelain) {
    std::cout << json{{"ok", true}, {"served_by", r["served_by"]}, {"warm", r["warm"]}, {"payload", r["payload"]}}.dump()
              << '\n';
  } else {
    print_human(op, r["payload"], explain);
  }
  return 0;
}

int run_bench(const Globals& g, const std::string& name, const std::string& out_path, std::uint32_t dim) {
  namespace b = engram::bench;
  const std::uint64_t seed = g.seed.value_or(42);
  std::vector<b::Report> reports;
  auto want = [&](const char* n) { return name == n || name == "all"; };
  if (want("frqad")) reports.push_back(b::bench_frqad({943, 20, dim, seed}));
  if (want("mixed_recall")) reports.push_back(b::bench_mixed_recall({929, 20, dim, seed, 10}));
  if (want("forgetting")) {
    b::ForgettingOptions o;
    o.seed = seed;
    reports.push_back(b::bench_forgetting(o));
  }
  if (want("continuity")) {
    b::ContinuityOptions o;
    o.seed = seed;
    reports.push_back(b::bench_continuity(o));
  }
  if (reports.empty()) {
    std::cerr << "engram bench: unknown bench '" << name << "' (frqad, mixed_recall, forgetting, continuity, all)\n";
    return exit_usage;
  }
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    if (!file) {
      std::cerr << "engram bench: cannot write " << out_path << '\n';
      return exit_error;
    }
  }
  bool ok = true;
  for (const auto& r : reports) {
    if (g.porcelain)
      r.write_jsonl(std::cout);
    else
      r.write_table(std::cout);
    if (file) r.write_jsonl(file);
    ok &= r.passed();
  }
  return ok ? 0 : exit_bench_failed;
}

std::string read_all(std::istream& in) { return {std::istreambuf_iterator<char>(in), {}}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"engram: local memory store with quantized embeddings, forgetting and hybrid retrieval"};
  app.require_subcommand(1);
  Globals g;
  g.store = default_store();
  app.add_option("--store", g.store, "Store directory (default $ENGRAM_STORE or ~/.engram)");
  app.add_option("--config", g.config, "Config file (JSON); default <store>/config.json when present");
  app.add_flag("--porcelain", g.porcelain, "Machine-readable JSON output");
  app.add_option("--seed", g.seed, "Embedder seed override");

  int code = 0;
  auto guard = [&](auto&& fn) {
    return [&, fn] {
      try {
        code = fn();
      } catch (const engram::Error& e) {
        std::cerr << "engram: " << engram::errc_name(e.code()) << ": " << e.what() << '\n';
        code = exit_for(engram::errc_name(e.code()));
      } catch (const std::exception& e) {
        std::cerr << "engram: " << e.what() << '\n';
        code = exit_error;
      }
    };
  };

  // remember
  auto* rem = app.add_subcommand("remember", "Store a memory");
  std::string rem_text, rem_agent, rem_event, rem_vec;
  double rem_imp = -1, rem_emo = -1;
  std::uint32_t rem_conf = 0;
  std::vector<std::string> rem_entities;
  rem->add_option("text", rem_text, "Memory text")->required();
  rem->add_option("--importance", rem_imp, "Importance in [0,1] (default 0.5)")->check(CLI::Range(0.0, 1.0));
  rem->add_option("--emotion", rem_emo, "Emotional salience in [0,1] (default 0)")->check(CLI::Range(0.0, 1.0));
  rem->add_option("--entity", rem_entities, "Entity (repeatable)");
  rem->add_option("--agent", rem_agent, "Source agent");
  rem->add_option("--event-time", rem_event, "When the fact happened (RFC 3339)");
  rem->add_option("--confirmations", rem_conf, "Confirmation count");
  rem->add_option("--vector-file", rem_vec, "Whitespace-separated embedding to store instead of the built-in embedder");
  rem->callback(guard([&] {
    engram::RememberArgs a;
    a.text = rem_text;
    if (rem_imp >= 0) a.importance = rem_imp;
    if (rem_emo >= 0) a.emotion = rem_emo;
    a.entities = rem_entities;
    if (!rem_agent.empty()) a.agent = rem_agent;
    if (!rem_event.empty()) a.event_time = engram::parse_rfc3339(rem_event);
    a.confirmations = rem_conf;
    if (!rem_vec.empty()) a.embedding = engram::read_vector_file(rem_vec);
    return run_op(g, "remember", engram::remember_args_to_json(a));
  }));

  // recall
  auto* rec = app.add_subcommand("recall", "Retrieve memories for a query");
  std::string rec_text, rec_as_of, rec_hint, rec_vec;
  std::size_t rec_k = 0;
  bool rec_multi = false, rec_single = false, rec_explain = false, rec_peek = false;
  std::vector<std::string> rec_entities;
  rec->add_option("query", rec_text, "Query text")->required();
  rec->add_option("--k", rec_k, "Number of results")->check(CLI::PositiveNumber);
  rec->add_flag("--multi-hop", rec_multi, "Force the multi-hop intersection path");
  rec->add_flag("--single-hop", rec_single, "Disable the multi-hop path")->excludes("--multi-hop");
  rec->add_option("--entity", rec_entities, "Query entity (repeatable)");
  rec->add_option("--as-of", rec_as_of, "Only memories ingested by this time (RFC 3339)");
  rec->add_option("--event-time", rec_hint, "Temporal anchor for the temporal channel (RFC 3339)");
  rec->add_option("--vector-file", rec_vec, "Query embedding file");
  rec->add_flag("--explain", rec_explain, "Show per-channel ranks and scores");
  rec->add_flag("--no-touch", rec_peek, "Do not record an access for returned memories");
  rec->callback(guard([&] {
    json args{{"text", rec_text}, {"entities", rec_entities}, {"consume", !rec_peek}};
    if (rec_k) args["k"] = rec_k;
    if (rec_multi) args["multi_hop"] = true;
    if (rec_single) args["multi_hop"] = false;
    if (!rec_as_of.empty()) args["as_of"] = engram::format_rfc3339(engram::parse_rfc3339(rec_as_of));
    if (!rec_hint.empty()) args["event_time_hint"] = engram::format_rfc3339(engram::parse_rfc3339(rec_hint));
    if (!rec_vec.empty()) args["embedding"] = engram::read_vector_file(rec_vec);
    return run_op(g, "recall", args, rec_explain);
  }));

  // decay
  auto* dec = app.add_subcommand("decay", "Run a forgetting pass");
  std::string dec_now;
  dec->add_option("--now", dec_now, "Simulated pass time (RFC 3339); default wall clock");
  dec->callback(guard([&] {
    json args = json::object();
    if (!dec_now.empty()) args["now"] = engram::format_rfc3339(engram::parse_rfc3339(dec_now));
    return run_op(g, "decay", args, false, g.porcelain ? std::function<void(const json&)>([](const json& p) {
      std::cout << p["report"].get<std::string>();
    })
                                                      : std::function<void(const json&)>());
  }));

  auto* con = app.add_subcommand("consolidate", "Cluster similar memories into gists");
  con->callback(guard([&] { return run_op(g, "consolidate", json::object()); }));

  auto* pr = app.add_subcommand("prompt", "Render the soft prompt from high-confidence patterns");
  std::string pr_out;
  pr->add_option("--out", pr_out, "Also write the prompt text to this file");
  pr->callback(guard([&] {
    return run_op(g, "prompt", json::object(), false, [&](const json& p) {
      const auto text = p["text"].get<std::string>();
      if (!pr_out.empty()) {
        std::ofstream f(pr_out);
        f << text;
        if (!text.empty()) f << '\n';
      }
      if (g.porcelain)
        std::cout << json{{"ok", true}, {"payload", p}}.dump() << '\n';
      else
        print_human("prompt", p, false);
    });
  }));

  auto* obs = app.add_subcommand("observe", "Record evidence for a preference pattern");
  std::string obs_subject, obs_predicate;
  bool obs_disagree = false;
  std::uint64_t obs_source = 0;
  obs->add_option("subject", obs_subject)->required();
  obs->add_option("predicate", obs_predicate)->required();
  obs->add_flag("--disagree", obs_disagree, "The observation contradicts the pattern");
  obs->add_option("--source", obs_source, "Supporting memory id");
  obs->callback(guard([&] {
    json args{{"subject", obs_subject}, {"predicate", obs_predicate}, {"agrees", !obs_disagree}};
    if (obs_source) args["source"] = obs_source;
    return run_op(g, "observe", args);
  }));

  auto* lk = app.add_subcommand("link", "Add a directed edge between memories");
  std::uint64_t lk_src = 0, lk_dst = 0;
  std::string lk_rel = "related";
  double lk_w = 1.0;
  lk->add_option("src", lk_src)->required();
  lk->add_option("dst", lk_dst)->required();
  lk->add_option("--relation", lk_rel);
  lk->add_option("--weight", lk_w)->check(CLI::Range(0.0, 1.0));
  lk->callback(guard([&] {
    return run_op(g, "link", {{"src", lk_src}, {"dst", lk_dst}, {"relation", lk_rel}, {"weight", lk_w}});
  }));

  auto* tr = app.add_subcommand("trust", "Set the trust score of a source agent");
  std::string tr_agent;
  double tr_value = 1.0;
  tr->add_option("agent", tr_agent)->required();
  tr->add_option("trust", tr_value)->required()->check(CLI::Range(0.0, 1.0));
  tr->callback(guard([&] { return run_op(g, "trust", {{"agent", tr_agent}, {"trust", tr_value}}); }));

  auto* fg = app.add_subcommand("forget", "Delete a memory and print a deletion receipt");
  std::uint64_t fg_id = 0;
  fg->add_option("id", fg_id)->required();
  fg->callback(guard([&] { return run_op(g, "forget", {{"id", fg_id}}); }));

  auto* ver = app.add_subcommand("verify", "Check store integrity");
  ver->callback(guard([&] {
    int rc = 0;
    const int call = run_op(g, "verify", json::object(), false, [&](const json& p) {
      if (g.porcelain)
        std::cout << json{{"ok", true}, {"payload", p}}.dump() << '\n';
      else
        print_human("verify", p, false);
      if (!p["ok"].get<bool>()) rc = engram::exit_store_corrupt;
    });
    return call ? call : rc;
  }));

  auto* ex = app.add_subcommand("export", "Write the canonical JSONL export");
  std::string ex_out;
  ex->add_option("--out", ex_out, "Output file (default stdout)");
  ex->callback(guard([&] {
    return run_op(g, "export", json::object(), false, [&](const json& p) {
      const auto text = p["text"].get<std::string>();
      if (ex_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream f(ex_out, std::ios::binary);
        f << text;
        if (!f) throw engram::Error(engram::Errc::io, "cannot write " + ex_out);
      }
    });
  }));

  auto* im = app.add_subcommand("import", "Load a canonical export into an empty store");
  std::string im_in;
  im->add_option("file", im_in, "Export file ('-' for stdin)")->required();
  im->callback(guard([&] {
    std::string text;
    if (im_in == "-") {
      text = read_all(std::cin);
    } else {
      std::ifstream f(im_in, std::ios::binary);
      if (!f) throw engram::Error(engram::Errc::io, "cannot read " + im_in);
      text = read_all(f);
    }
    return run_op(g, "import", {{"text", text}});
  }));

  auto* sv = app.add_subcommand("serve", "Run the loopback daemon for the store");
  int sv_port = -1;
  double sv_idle = -1;
  sv->add_option("--port", sv_port, "Port (default config or $ENGRAM_PORT; 0 picks a free port)");
  sv->add_option("--idle-timeout", sv_idle, "Seconds without requests before exiting");
  sv->callback(guard([&] {
    engram::ServerOptions o;
    o.dir = g.store;
    o.cfg = make_config(g);
    o.port = sv_port;
    if (sv_idle >= 0) o.idle_timeout_s = sv_idle;
    engram::Server server(std::move(o));
    server.on_ready = [&](int port) {
      if (g.porcelain)
        std::cout << json{{"port", port}, {"pid", ::getpid()}}.dump() << std::endl;
      else
        std::cout << "listening on 127.0.0.1:" << port << std::endl;
    };
    return server.run();
  }));

  auto* cf = app.add_subcommand("config", "Print the effective configuration");
  cf->callback(guard([&] {
    std::cout << engram::config_to_json(make_config(g)).dump(2) << '\n';
    return 0;
  }));

  auto* bn = app.add_subcommand("bench", "Run a benchmark (frqad, mixed_recall, forgetting, continuity, all)");
  std::string bn_name = "all", bn_out;
  std::uint32_t bn_dim = 768;
  bn->add_option("name", bn_name);
  bn->add_option("--out", bn_out, "Write JSONL metric rows here");
  bn->add_option("--dim", bn_dim, "Embedding dimension for frqad and mixed_recall")->check(CLI::Range(2u, 4096u));
  bn->callback(guard([&] { return run_bench(g, bn_name, bn_out, bn_dim); }));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_usage;
  }
  return code;
}
