#pragma once

#include <fstream>

#include <json.hpp>

#include "engram/consolidate.hpp"
#include "engram/forgetting.hpp"
#include "engram/fusion.hpp"

namespace engram {

/// Every tunable default in one place; loadable from a JSON file where any
/// subset of keys may be given.
struct Config {
  std::uint32_t dim = 256;
  std::uint64_t seed = 42;  // rotation and embedder seed

  double default_importance = 0.5;
  double default_emotion = 0.0;
  std::string default_agent = "local";
  double link_weight = 0.5;        // weight of automatic shared-entity edges
  std::size_t link_max_per_entity = 16;
  std::size_t multihop_min_entities = 2;  // CLI heuristic for --multi-hop default
  std::size_t recall_k = 10;

  ForgettingParams forgetting;
  ChannelConfig channels;
  FusionConfig fusion;
  ConsolidateConfig consolidate;
  SoftPromptConfig soft_prompt;
  std::string reranker_command;  // empty: identity

  int daemon_port = 8767;
  double daemon_idle_timeout_s = 1800.0;
  int daemon_connect_timeout_ms = 200;
  int lock_wait_ms = 2000;
};

inline nlohmann::json config_to_json(const Config& c) {
  using nlohmann::json;
  json weights = json::object();
  for (auto ch : all_channels) weights[channel_name(ch)] = c.fusion.weight(ch);
  const auto& f = c.forgetting;
  return json{
      {"dim", c.dim},
      {"seed", c.seed},
      {"remember",
       {{"importance", c.default_importance},
        {"emotion", c.default_emotion},
        {"agent", c.default_agent},
        {"link_weight", c.link_weight},
        {"link_max_per_entity", c.link_max_per_entity}}},
      {"recall", {{"k", c.recall_k}, {"multihop_min_entities", c.multihop_min_entities}}},
      {"forgetting",
       {{"alpha", f.alpha},
        {"beta_imp", f.beta_imp},
        {"gamma_c", f.gamma_c},
        {"delta", f.delta},
        {"s_min_hours", f.s_min},
        {"kappa_trust", f.kappa_trust},
        {"thresholds", {f.thresholds.active, f.thresholds.warm, f.thresholds.cold, f.thresholds.archive}}}},
      {"channels",
       {{"k", c.channels.k},
        {"bm25_k1", c.channels.bm25_k1},
        {"bm25_b", c.channels.bm25_b},
        {"tau_rec_hours", c.channels.tau_rec_hours},
        {"activation_seeds", c.channels.activation_seeds},
        {"activation_decay", c.channels.activation_decay},
        {"activation_iterations", c.channels.activation_iterations},
        {"activation_mix",
         {c.channels.activation_w_semantic, c.channels.activation_w_activation, c.channels.activation_w_structural}},
        {"gist_k", c.channels.gist_k},
        {"hopfield_unit_variance", c.channels.hopfield_unit_variance}}},
      {"fusion",
       {{"k_rrf", c.fusion.k_rrf},
        {"weights", weights},
        {"rerank_top", c.fusion.rerank_top},
        {"frqad_rescore_top", c.fusion.frqad_rescore_top},
        {"multihop_union_fallback", c.fusion.multihop_union_fallback},
        {"ramp_saturation", c.fusion.ramp.saturation},
        {"kappa_q", c.fusion.kappa_q},
        {"reranker_command", c.reranker_command}}},
      {"consolidate",
       {{"cluster_threshold", c.consolidate.cluster_threshold}, {"summary_chars", c.consolidate.summary_chars}}},
      {"soft_prompt",
       {{"min_confidence", c.soft_prompt.min_confidence},
        {"min_evidence", c.soft_prompt.min_evidence},
        {"cap_tokens", c.soft_prompt.cap_tokens},
        {"chars_per_token", c.soft_prompt.chars_per_token}}},
      {"daemon",
       {{"port", c.daemon_port},
        {"idle_timeout_s", c.daemon_idle_timeout_s},
        {"connect_timeout_ms", c.daemon_connect_timeout_ms},
        {"lock_wait_ms", c.lock_wait_ms}}},
  };
}

namespace detail {
template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline Config config_from_json(const nlohmann::json& j) {
  using detail::take;
  Config c;
  try {
    take(j, "dim", c.dim);
    take(j, "seed", c.seed);
    if (j.contains("remember")) {
      const auto& r = j["remember"];
      take(r, "importance", c.default_importance);
      take(r, "emotion", c.default_emotion);
      take(r, "agent", c.default_agent);
      take(r, "link_weight", c.link_weight);
      take(r, "link_max_per_entity", c.link_max_per_entity);
    }
    if (j.contains("recall")) {
      take(j["recall"], "k", c.recall_k);
      take(j["recall"], "multihop_min_entities", c.multihop_min_entities);
    }
    if (j.contains("forgetting")) {
      const auto& f = j["forgetting"];
      auto& p = c.forgetting;
      take(f, "alpha", p.alpha);
      take(f, "beta_imp", p.beta_imp);
      take(f, "gamma_c", p.gamma_c);
      take(f, "delta", p.delta);
      take(f, "s_min_hours", p.s_min);
      take(f, "kappa_trust", p.kappa_trust);
      if (f.contains("thresholds")) {
        auto t = f["thresholds"].get<std::vector<double>>();
        if (t.size() != 4) throw Error(Errc::invalid_argument, "config: forgetting.thresholds needs four values");
        p.thresholds = {t[0], t[1], t[2], t[3]};
      }
      p.validate();
    }
    if (j.contains("channels")) {
      const auto& ch = j["channels"];
      auto& cc = c.channels;
      take(ch, "k", cc.k);
      take(ch, "bm25_k1", cc.bm25_k1);
      take(ch, "bm25_b", cc.bm25_b);
      take(ch, "tau_rec_hours", cc.tau_rec_hours);
      take(ch, "activation_seeds", cc.activation_seeds);
      take(ch, "activation_decay", cc.activation_decay);
      take(ch, "activation_iterations", cc.activation_iterations);
      if (ch.contains("activation_mix")) {
        auto m = ch["activation_mix"].get<std::vector<double>>();
        if (m.size() != 3) throw Error(Errc::invalid_argument, "config: channels.activation_mix needs three values");
        cc.activation_w_semantic = m[0];
        cc.activation_w_activation = m[1];
        cc.activation_w_structural = m[2];
      }
      take(ch, "gist_k", cc.gist_k);
      take(ch, "hopfield_unit_variance", cc.hopfield_unit_variance);
    }
    if (j.contains("fusion")) {
      const auto& f = j["fusion"];
      take(f, "k_rrf", c.fusion.k_rrf);
      if (f.contains("weights"))
        for (auto ch : all_channels)
          if (f["weights"].contains(channel_name(ch))) c.fusion.weights[ch] = f["weights"][channel_name(ch)].get<double>();
      take(f, "rerank_top", c.fusion.rerank_top);
      take(f, "frqad_rescore_top", c.fusion.frqad_rescore_top);
      take(f, "multihop_union_fallback", c.fusion.multihop_union_fallback);
      take(f, "ramp_saturation", c.fusion.ramp.saturation);
      take(f, "kappa_q", c.fusion.kappa_q);
      take(f, "reranker_command", c.reranker_command);
      c.fusion.validate();
    }
    if (j.contains("consolidate")) {
      take(j["consolidate"], "cluster_threshold", c.consolidate.cluster_threshold);
      take(j["consolidate"], "summary_chars", c.consolidate.summary_chars);
    }
    if (j.contains("soft_prompt")) {
      const auto& s = j["soft_prompt"];
      take(s, "min_confidence", c.soft_prompt.min_confidence);
      take(s, "min_evidence", c.soft_prompt.min_evidence);
      take(s, "cap_tokens", c.soft_prompt.cap_tokens);
      take(s, "chars_per_token", c.soft_prompt.chars_per_token);
    }
    if (j.contains("daemon")) {
      const auto& d = j["daemon"];
      take(d, "port", c.daemon_port);
      take(d, "idle_timeout_s", c.daemon_idle_timeout_s);
      take(d, "connect_timeout_ms", c.daemon_connect_timeout_ms);
      take(d, "lock_wait_ms", c.lock_wait_ms);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("config: ") + e.what());
  }
  if (c.dim < 2) throw Error(Errc::invalid_argument, "config: dim must be at least 2");
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, "config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// ENGRAM_PORT overrides the configured daemon port.
inline int daemon_port(const Config& c) {
  if (const char* p = std::getenv("ENGRAM_PORT")) {
    int v = 0;
    auto [end, ec] = std::from_chars(p, p + std::strlen(p), v);
    if (ec != std::errc{} || *end != '\0' || v < 0 || v > 65535)
      throw Error(Errc::invalid_argument, "ENGRAM_PORT is not a valid port");
    return v;
  }
  return c.daemon_port;
}

}  // namespace engram
