#pragma once

#include <numeric>

#include "engram/memstore.hpp"
#include "engram/quant.hpp"

namespace engram {

struct ConsolidateConfig {
  double cluster_threshold = 0.75;
  std::size_t summary_chars = 512;
};

namespace detail {

inline std::size_t find_root(std::vector<std::size_t>& parent, std::size_t i) {
  while (parent[i] != i) i = parent[i] = parent[parent[i]];
  return i;
}

// Cuts at a byte budget without splitting a UTF-8 sequence.
inline std::string truncate_utf8(std::string s, std::size_t max_bytes) {
  if (s.size() <= max_bytes) return s;
  std::size_t cut = max_bytes;
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  s.resize(cut);
  return s;
}

}  // namespace detail

/// Single-link clustering of Warm and Cold memories at cosine >= threshold.
/// Each cluster of two or more becomes a gist unless a gist with exactly
/// those members exists; gists whose members are a strict subset of a new
/// cluster are replaced by it. Returns the newly written gists.
inline std::vector<GistBlock> consolidate_pass(Store& store, const Quantizer& quant, const ConsolidateConfig& cfg = {}) {
  std::vector<MemoryId> ids;
  std::vector<std::string> texts;
  std::vector<std::vector<float>> vecs;
  for (const auto& m : store.scan({std::set<Lifecycle>{Lifecycle::warm, Lifecycle::cold}, {}, {}, {}})) {
    auto e = store.get_embedding(m.id);
    if (!e) continue;
    ids.push_back(m.id);
    texts.push_back(m.text);
    vecs.push_back(e->bits == Bits::f32 ? e->full : quant.dequantize(e->quantized));
  }
  const std::size_t n = ids.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(std::span<const float>(vecs[i]));
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double c = dot(std::span<const float>(vecs[i]), std::span<const float>(vecs[j])) / (norms[i] * norms[j]);
      if (c >= cfg.cluster_threshold) {
        auto a = detail::find_root(parent, i), b = detail::find_root(parent, j);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
      }
    }
  std::map<std::size_t, std::vector<std::size_t>> clusters;
  for (std::size_t i = 0; i < n; ++i) clusters[detail::find_root(parent, i)].push_back(i);

  std::vector<GistBlock> created;
  store.atomically([&] {
    auto existing = store.gists();
    for (const auto& [root, members] : clusters) {
      if (members.size() < 2) continue;
      GistBlock g;
      for (auto i : members) g.member_ids.push_back(ids[i]);
      if (std::any_of(existing.begin(), existing.end(), [&](const GistBlock& e) { return e.member_ids == g.member_ids; }))
        continue;
      for (const auto& e : existing)
        if (std::includes(g.member_ids.begin(), g.member_ids.end(), e.member_ids.begin(), e.member_ids.end()))
          store.delete_gist(e.id);
      std::vector<double> centroid(store.dim(), 0.0);
      std::string summary;
      for (auto i : members) {
        for (std::size_t k = 0; k < centroid.size(); ++k) centroid[k] += vecs[i][k];
        if (!summary.empty()) summary += ' ';
        summary += texts[i];
      }
      g.embedding = unit_float(std::span<const double>(centroid));
      g.summary_text = detail::truncate_utf8(std::move(summary), cfg.summary_chars);
      g.id = store.add_gist(g);
      created.push_back(std::move(g));
    }
  });
  return created;
}

// ---- patterns and soft prompts ----

/// min(evidence / 10, 1) * |rate - 0.5| * 2
inline double pattern_confidence(double evidence, double rate) {
  if (evidence < 0.0) throw Error(Errc::invalid_argument, "evidence must be non-negative");
  if (!(rate >= 0.0 && rate <= 1.0)) throw Error(Errc::invalid_argument, "rate must be in [0, 1]");
  return std::clamp(std::min(evidence / 10.0, 1.0) * std::abs(rate - 0.5) * 2.0, 0.0, 1.0);
}

/// Records one structured observation for (subject, predicate).
inline Pattern observe_pattern(Store& store, const std::string& subject, const std::string& predicate, bool agrees,
                               std::optional<MemoryId> source = std::nullopt) {
  if (subject.empty() || predicate.empty()) throw Error(Errc::invalid_argument, "pattern needs a subject and predicate");
  return store.atomically([&] {
    Pattern p = store.find_pattern(subject, predicate).value_or(Pattern{0, subject, predicate, 0, 0, 0.0, 0.0, {}});
    p.evidence += 1;
    if (agrees) p.agree += 1;
    p.rate = static_cast<double>(p.agree) / static_cast<double>(p.evidence);
    p.confidence = pattern_confidence(static_cast<double>(p.evidence), p.rate);
    if (source && std::find(p.source_ids.begin(), p.source_ids.end(), *source) == p.source_ids.end())
      p.source_ids.push_back(*source);
    p.id = store.upsert_pattern(p);
    return p;
  });
}

struct SoftPromptConfig {
  double min_confidence = 0.7;
  std::uint64_t min_evidence = 5;
  std::uint64_t cap_tokens = 1500;
  double chars_per_token = 4.0;
};

/// Code points in a UTF-8 string.
inline std::size_t utf8_length(std::string_view s) {
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

inline std::uint64_t estimate_tokens(std::string_view text, double chars_per_token = 4.0) {
  return static_cast<std::uint64_t>(std::ceil(static_cast<double>(utf8_length(text)) / chars_per_token));
}

inline std::string render_pattern(const Pattern& p) {
  char conf[32];
  std::snprintf(conf, sizeof conf, "%.2f", p.confidence);
  return "Preference: " + p.subject + " — " + p.predicate + " (confidence " + conf + ", " +
         std::to_string(p.evidence) + " observations)";
}

/// Qualifying patterns in descending confidence, one line each, added whole
/// until the next line would push the estimate past the cap.
inline SoftPrompt generate_soft_prompt(std::vector<Pattern> patterns, const SoftPromptConfig& cfg = {},
                                       Timestamp now = now_utc()) {
  std::erase_if(patterns, [&](const Pattern& p) { return p.confidence < cfg.min_confidence || p.evidence < cfg.min_evidence; });
  std::sort(patterns.begin(), patterns.end(), [](const Pattern& a, const Pattern& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.evidence != b.evidence) return a.evidence > b.evidence;
    if (a.subject != b.subject) return a.subject < b.subject;
    if (a.predicate != b.predicate) return a.predicate < b.predicate;
    return a.id < b.id;
  });
  SoftPrompt out;
  out.generated_at = now;
  for (const auto& p : patterns) {
    std::string candidate = out.text.empty() ? render_pattern(p) : out.text + "\n" + render_pattern(p);
    const auto tokens = estimate_tokens(candidate, cfg.chars_per_token);
    if (tokens > cfg.cap_tokens) break;
    out.text = std::move(candidate);
    out.token_estimate = tokens;
    out.pattern_ids.push_back(p.id);
  }
  return out;
}

}  // namespace engram
