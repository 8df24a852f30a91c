#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace engram {

enum class Errc {
  invalid_argument,
  dimension_mismatch,
  duplicate_id,
  unknown_id,
  time_regression,
  io,
  corrupt,
  not_unit_norm,
  id_mismatch,
  promotion,
  convergence,
  divergence,
  busy,
  unavailable,
};

inline const char* errc_name(Errc e) {
  switch (e) {
    case Errc::invalid_argument: return "invalid-argument";
    case Errc::dimension_mismatch: return "dimension-mismatch";
    case Errc::duplicate_id: return "duplicate-id";
    case Errc::unknown_id: return "unknown-id";
    case Errc::time_regression: return "time-regression";
    case Errc::io: return "io";
    case Errc::corrupt: return "corrupt";
    case Errc::not_unit_norm: return "not-unit-norm";
    case Errc::id_mismatch: return "id-mismatch";
    case Errc::promotion: return "promotion";
    case Errc::convergence: return "convergence";
    case Errc::divergence: return "divergence";
    case Errc::busy: return "busy";
    case Errc::unavailable: return "unavailable";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

using MemoryId = std::uint64_t;

// Wall-clock or simulated instant, millisecond resolution, UTC.
using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

inline Timestamp now_utc() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
}

inline std::int64_t to_millis(Timestamp t) { return t.time_since_epoch().count(); }
inline Timestamp from_millis(std::int64_t ms) { return Timestamp{std::chrono::milliseconds{ms}}; }

inline double hours_between(Timestamp from, Timestamp to) {
  return std::chrono::duration<double, std::ratio<3600>>(to - from).count();
}

inline Timestamp add_hours(Timestamp t, double h) {
  return t + std::chrono::milliseconds{static_cast<std::int64_t>(std::llround(h * 3600'000.0))};
}

namespace detail {

// Howard Hinnant's civil-date algorithms.
constexpr std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

constexpr void civil_from_days(std::int64_t z, std::int64_t& y, unsigned& m, unsigned& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

inline bool parse_uint(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  auto sub = s.substr(pos, len);
  if (!std::all_of(sub.begin(), sub.end(), [](char c) { return c >= '0' && c <= '9'; })) return false;
  auto [p, ec] = std::from_chars(sub.data(), sub.data() + sub.size(), out);
  return ec == std::errc{} && p == sub.data() + sub.size();
}

}  // namespace detail

// Accepts RFC-3339 date-times: 2024-05-01T12:00:00Z, 2024-05-01T12:00:00.250+02:00.
inline Timestamp parse_rfc3339(std::string_view s) {
  auto fail = [&] { return Error(Errc::invalid_argument, "not an RFC-3339 timestamp: " + std::string(s)); };
  int year, mon, day, hh, mm, ss;
  if (s.size() < 20 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != 't' && s[10] != ' ') ||
      s[13] != ':' || s[16] != ':')
    throw fail();
  if (!detail::parse_uint(s, 0, 4, year) || !detail::parse_uint(s, 5, 2, mon) || !detail::parse_uint(s, 8, 2, day) ||
      !detail::parse_uint(s, 11, 2, hh) || !detail::parse_uint(s, 14, 2, mm) || !detail::parse_uint(s, 17, 2, ss))
    throw fail();
  if (mon < 1 || mon > 12 || day < 1 || day > 31 || hh > 23 || mm > 59 || ss > 60) throw fail();
  std::size_t pos = 19;
  std::int64_t millis = 0;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      if (digits < 3) millis = millis * 10 + (s[pos] - '0');
      ++digits;
      ++pos;
    }
    if (digits == 0) throw fail();
    for (int i = digits; i < 3; ++i) millis *= 10;
  }
  std::int64_t offset_min = 0;
  if (pos >= s.size()) throw fail();
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else if (s[pos] == '+' || s[pos] == '-') {
    int oh, om;
    if (pos + 6 != s.size() || s[pos + 3] != ':' || !detail::parse_uint(s, pos + 1, 2, oh) ||
        !detail::parse_uint(s, pos + 4, 2, om))
      throw fail();
    offset_min = (oh * 60 + om) * (s[pos] == '-' ? -1 : 1);
    pos += 6;
  } else {
    throw fail();
  }
  if (pos != s.size()) throw fail();
  const std::int64_t days = detail::days_from_civil(year, static_cast<unsigned>(mon), static_cast<unsigned>(day));
  const std::int64_t secs = days * 86400 + hh * 3600 + mm * 60 + ss - offset_min * 60;
  return from_millis(secs * 1000 + millis);
}

inline std::string format_rfc3339(Timestamp t) {
  const std::int64_t ms = to_millis(t);
  std::int64_t secs = ms >= 0 ? ms / 1000 : (ms - 999) / 1000;
  const std::int64_t frac = ms - secs * 1000;
  std::int64_t days = secs >= 0 ? secs / 86400 : (secs - 86399) / 86400;
  std::int64_t rem = secs - days * 86400;
  std::int64_t y;
  unsigned m, d;
  detail::civil_from_days(days, y, m, d);
  char buf[96];
  if (frac == 0)
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lldZ", static_cast<long long>(y), m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                  static_cast<long long>(rem % 60));
  else
    std::snprintf(buf, sizeof buf, "%04lld-%02u-%02uT%02lld:%02lld:%02lld.%03lldZ", static_cast<long long>(y), m, d,
                  static_cast<long long>(rem / 3600), static_cast<long long>(rem % 3600 / 60),
                  static_cast<long long>(rem % 60), static_cast<long long>(frac));
  return buf;
}

// Storage precision of an embedding.
enum class Bits : std::uint8_t { b2 = 2, b4 = 4, b8 = 8, f32 = 32 };

inline int bit_count(Bits b) { return static_cast<int>(b); }

inline Bits bits_from_int(int b) {
  switch (b) {
    case 2: return Bits::b2;
    case 4: return Bits::b4;
    case 8: return Bits::b8;
    case 32: return Bits::f32;
  }
  throw Error(Errc::invalid_argument, "unsupported bit-width " + std::to_string(b));
}

enum class Lifecycle : std::uint8_t { active, warm, cold, archive, forgotten };

inline const char* lifecycle_name(Lifecycle l) {
  switch (l) {
    case Lifecycle::active: return "active";
    case Lifecycle::warm: return "warm";
    case Lifecycle::cold: return "cold";
    case Lifecycle::archive: return "archive";
    case Lifecycle::forgotten: return "forgotten";
  }
  return "?";
}

inline Lifecycle lifecycle_from_name(std::string_view s) {
  for (auto l : {Lifecycle::active, Lifecycle::warm, Lifecycle::cold, Lifecycle::archive, Lifecycle::forgotten})
    if (s == lifecycle_name(l)) return l;
  throw Error(Errc::invalid_argument, "unknown lifecycle state: " + std::string(s));
}

// Lowercase + trim. Entities are exact-string keys after this.
inline std::string normalize_entity(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  while (!s.empty() && is_space(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && is_space(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// ---- small vector helpers (double accumulation over float storage) ----

template <typename A, typename B>
double dot(std::span<const A> a, std::span<const B> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename A>
double l2_norm(std::span<const A> a) {
  return std::sqrt(dot(a, a));
}

// Rounds v / ||v|| to float, then nudges coordinates (largest magnitude
// first) so the float vector's norm is 1 to well below float epsilon.
template <typename T>
std::vector<float> unit_float(std::span<const T> v) {
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw Error(Errc::invalid_argument, "cannot normalize a zero vector");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(static_cast<double>(v[i]) / n);
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(out[a]) > std::abs(out[b]) || (std::abs(out[a]) == std::abs(out[b]) && a < b);
  });
  double r = 1.0 - dot(std::span<const float>(out), std::span<const float>(out));
  for (std::size_t i : order) {
    if (std::abs(r) < 1e-13) break;
    const double x = out[i];
    const double target = x * x + r;
    if (target <= 0.0) continue;
    const auto y = static_cast<float>(std::copysign(std::sqrt(target), x == 0.0 ? 1.0 : x));
    r -= static_cast<double>(y) * y - x * x;
    out[i] = y;
  }
  return out;
}

inline std::vector<float> normalized(std::span<const float> v) { return unit_float(v); }

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()), h);
}

inline std::string to_hex(std::span<const unsigned char> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

inline std::vector<unsigned char> from_hex(std::string_view s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (s.size() % 2) throw Error(Errc::corrupt, "odd-length hex string");
  std::vector<unsigned char> out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(s[2 * i]), lo = nibble(s[2 * i + 1]);
    if (hi < 0 || lo < 0) throw Error(Errc::corrupt, "bad hex digit");
    out[i] = static_cast<unsigned char>(hi << 4 | lo);
  }
  return out;
}

}  // namespace engram
