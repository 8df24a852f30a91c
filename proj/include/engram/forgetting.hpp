#pragma once

#include <map>
#include <ostream>

#include <json.hpp>

#include "engram/memstore.hpp"
#include "engram/quant.hpp"
#include "engram/random.hpp"

namespace engram {

struct ForgettingParams {
  double alpha = 2.0;       // access weight on ln(1 + a)
  double beta_imp = 1.0;    // importance weight
  double gamma_c = 1.0;     // confirmation weight
  double delta = 1.0;       // emotional salience weight
  double s_min = 1.0;       // strength floor, hours
  double kappa_trust = 2.0;
  LifecycleThresholds thresholds;

  void validate() const {
    if (alpha < 0 || beta_imp < 0 || gamma_c < 0 || delta < 0 || kappa_trust < 0)
      throw Error(Errc::invalid_argument, "forgetting weights must be non-negative");
    if (!(s_min > 0)) throw Error(Errc::invalid_argument, "strength floor must be positive");
    const auto& t = thresholds;
    if (!(1.0 > t.active && t.active > t.warm && t.warm > t.cold && t.cold > t.archive && t.archive > 0.0))
      throw Error(Errc::invalid_argument, "lifecycle thresholds must be strictly decreasing in (0, 1)");
  }
};

/// S = max(S_min, alpha ln(1 + a) + beta iota + gamma_c gamma + delta epsilon), in hours.
inline double strength(const MemoryRecord& m, const ForgettingParams& p) {
  const double s = p.alpha * std::log1p(static_cast<double>(m.access_count)) + p.beta_imp * m.importance +
                   p.gamma_c * static_cast<double>(m.confirmations) + p.delta * m.emotion;
  return std::max(p.s_min, s);
}

/// R = exp(-t / S), t in hours since the last access.
inline double retention(double s, double t_hours) {
  if (!(s > 0.0)) throw Error(Errc::invalid_argument, "strength must be positive");
  if (t_hours < 0.0) throw Error(Errc::invalid_argument, "elapsed time must be non-negative");
  return std::exp(-t_hours / s);
}

inline double half_life(double s) { return s * std::numbers::ln2; }

inline Lifecycle classify(double r, const LifecycleThresholds& th = {}) { return Store::expected_lifecycle(r, th); }

/// Storage precision for a lifecycle state; Forgotten keeps no embedding.
inline std::optional<Bits> precision_for(Lifecycle s) {
  switch (s) {
    case Lifecycle::active: return Bits::f32;
    case Lifecycle::warm: return Bits::b8;
    case Lifecycle::cold: return Bits::b4;
    case Lifecycle::archive: return Bits::b2;
    case Lifecycle::forgotten: return std::nullopt;
  }
  return std::nullopt;
}

/// lambda_eff = lambda (1 + kappa (1 - tau))
inline double effective_rate(double lambda, double trust, double kappa_trust = 2.0) {
  if (!(trust >= 0.0 && trust <= 1.0)) throw Error(Errc::invalid_argument, "trust must be in [0, 1]");
  return lambda * (1.0 + kappa_trust * (1.0 - trust));
}

inline double trusted_retention(double s, double t_hours, double trust, double kappa_trust = 2.0) {
  if (t_hours < 0.0) throw Error(Errc::invalid_argument, "elapsed time must be non-negative");
  return std::exp(-t_hours * effective_rate(1.0 / s, trust, kappa_trust));
}

struct DecayEntry {
  MemoryId id = 0;
  double old_r = 1.0, new_r = 1.0;
  Lifecycle old_state = Lifecycle::active, new_state = Lifecycle::active;
  int old_bits = 32, new_bits = 32;  // 0 once the embedding is gone
  double strength = 0.0;
  double lambda_eff = 0.0;
};

struct DecayReport {
  Timestamp pass_time = unset_time;
  std::vector<DecayEntry> entries;
  std::map<std::pair<Lifecycle, Lifecycle>, std::size_t> transitions;
  std::size_t collected = 0;  // tombstones removed by this pass

  std::size_t changed() const {
    std::size_t n = 0;
    for (const auto& [k, v] : transitions)
      if (k.first != k.second) n += v;
    return n;
  }

  void write_jsonl(std::ostream& out) const {
    nlohmann::json counts = nlohmann::json::object();
    for (const auto& [k, v] : transitions)
      counts[std::string(lifecycle_name(k.first)) + "->" + lifecycle_name(k.second)] = v;
    out << nlohmann::json{{"kind", "decay_pass"},
                          {"time", format_rfc3339(pass_time)},
                          {"memories", entries.size()},
                          {"collected", collected},
                          {"transitions", counts}}
               .dump()
        << '\n';
    for (const auto& e : entries)
      out << nlohmann::json{{"kind", "decay_entry"},    {"id", e.id},
                            {"old_r", e.old_r},         {"new_r", e.new_r},
                            {"old_state", lifecycle_name(e.old_state)},
                            {"new_state", lifecycle_name(e.new_state)},
                            {"old_bits", e.old_bits},   {"new_bits", e.new_bits},
                            {"strength", e.strength},   {"lambda_eff", e.lambda_eff}}
                 .dump()
          << '\n';
  }
};

/// Recomputes strength, trust-modulated retention and lifecycle for every
/// live memory at `now`, demoting embedding precision to match. Precision
/// never rises; a Forgotten memory loses its embedding at once and its text
/// at the next pass with a later timestamp.
inline DecayReport decay_pass(Store& store, const Quantizer& quant, Timestamp now, const ForgettingParams& p) {
  p.validate();
  DecayReport rep;
  rep.pass_time = now;
  store.atomically([&] {
    for (const auto& m : store.scan()) {
      if (m.lifecycle == Lifecycle::forgotten && m.forgotten_at && *m.forgotten_at < now) {
        store.delete_memory(m.id);
        ++rep.collected;
      }
    }
    std::map<std::string, double> trust_cache;
    for (auto m : store.scan()) {
      if (m.lifecycle == Lifecycle::forgotten) continue;
      DecayEntry e;
      e.id = m.id;
      e.old_r = m.retention;
      e.old_state = m.lifecycle;
      auto emb = store.get_embedding(m.id);
      e.old_bits = emb ? bit_count(emb->bits) : 0;

      auto [it, fresh] = trust_cache.try_emplace(m.source_agent, 0.0);
      if (fresh) it->second = store.trust(m.source_agent);
      e.strength = strength(m, p);
      e.lambda_eff = effective_rate(1.0 / e.strength, it->second, p.kappa_trust);
      const double t = std::max(0.0, hours_between(m.last_access_time, now));
      e.new_r = std::exp(-t * e.lambda_eff);
      e.new_state = classify(e.new_r, p.thresholds);

      const auto target = precision_for(e.new_state);
      if (!target) {
        if (emb) store.delete_embedding(m.id);
        e.new_bits = 0;
        m.forgotten_at = now;
      } else if (emb && bit_count(*target) < bit_count(emb->bits)) {
        EmbeddingRecord next = *emb;
        next.bits = *target;
        next.quantized = emb->bits == Bits::f32 ? quant.quantize(emb->full, *target)
                                                : quant.requantize(emb->quantized, *target);
        next.full.clear();
        store.put_embedding(next);
        e.new_bits = bit_count(*target);
      } else {
        e.new_bits = e.old_bits;
      }
      m.strength = e.strength;
      m.retention = e.new_r;
      m.lifecycle = e.new_state;
      store.update_memory(m);
      ++rep.transitions[{e.old_state, e.new_state}];
      rep.entries.push_back(e);
    }
    if (store.fault_hook) store.fault_hook("decay:before-commit");
  });
  return rep;
}

// ---- reduced Langevin dynamics ----

/// 1-D overdamped Langevin with identity metric:
///   dx = -(U'(x) + lambda Phi'(x)) dt + sqrt(2 T) dW,
/// U = k_u (x - mu_u)^2 / 2, Phi = k_f (x - mu_f)^2 / 2.
/// The stationary density is proportional to exp(-(U + lambda Phi) / T).
struct LangevinConfig {
  double k_u = 1.0, mu_u = 0.0;
  double k_f = 1.0, mu_f = 1.0;
  double lambda = 0.0;
  double temperature = 1.0;
  double dt = 0.01;
  std::size_t steps = 1'000'000;  // recorded samples
  std::size_t burn_in = 10'000;   // integrator steps discarded first
  std::size_t thin = 10;          // integrator steps per recorded sample
  double x0 = 0.0;
  std::uint64_t seed = 0;
};

inline double langevin_potential(const LangevinConfig& c, double x) {
  return 0.5 * c.k_u * (x - c.mu_u) * (x - c.mu_u) + c.lambda * 0.5 * c.k_f * (x - c.mu_f) * (x - c.mu_f);
}

inline std::vector<double> langevin_sim(const LangevinConfig& c) {
  if (!(c.dt > 0.0) || !(c.temperature > 0.0) || c.thin == 0)
    throw Error(Errc::invalid_argument, "langevin: dt, temperature and thinning must be positive");
  if (!(c.k_u > 0.0) || !(c.k_f > 0.0) || c.lambda < 0.0)
    throw Error(Errc::invalid_argument, "langevin: potentials must be confining");
  GaussianStream g(c.seed);
  const double noise = std::sqrt(2.0 * c.temperature * c.dt);
  double x = c.x0;
  auto step = [&] {
    const double drift = -c.k_u * (x - c.mu_u) - c.lambda * c.k_f * (x - c.mu_f);
    x += drift * c.dt + noise * g();
    if (!(std::abs(x) <= 1e6)) throw Error(Errc::divergence, "langevin: state diverged; reduce dt");
  };
  for (std::size_t i = 0; i < c.burn_in; ++i) step();
  std::vector<double> trace(c.steps);
  for (auto& v : trace) {
    for (std::size_t j = 0; j < c.thin; ++j) step();
    v = x;
  }
  return trace;
}

}  // namespace engram
