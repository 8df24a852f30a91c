#pragma once

#include <cmath>
#include <numbers>

#include "engram/common.hpp"

namespace engram {

inline double cosine(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw Error(Errc::dimension_mismatch, "cosine: dimension mismatch");
  const double nu = l2_norm(u), nv = l2_norm(v);
  if (!(nu > 0.0) || !(nv > 0.0)) throw Error(Errc::invalid_argument, "cosine: zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// Isotropic Gaussian view of an embedding whose variance is inflated by
/// its quantization level: var_eff = var_obs * (32 / bits)^kappa_q.
struct PrecisionGaussian {
  std::span<const float> mean;
  double base_variance = 0.0;
  Bits bits = Bits::f32;
  double kappa_q = 1.0;

  double effective_variance() const {
    return base_variance * std::pow(32.0 / static_cast<double>(bit_count(bits)), kappa_q);
  }
  double sigma() const { return std::sqrt(effective_variance()); }
};

namespace detail {
inline void check_gaussians(const PrecisionGaussian& a, const PrecisionGaussian& b) {
  if (a.mean.size() != b.mean.size()) throw Error(Errc::dimension_mismatch, "gaussians of different dimension");
  if (!(a.base_variance > 0.0) || !(b.base_variance > 0.0) || !(a.kappa_q > 0.0) || !(b.kappa_q > 0.0))
    throw Error(Errc::invalid_argument, "variances must be positive");
}
}  // namespace detail

/// ||mu1 - mu2|| / sigma, valid only when both sides share one variance.
inline double fr_simplified(const PrecisionGaussian& a, const PrecisionGaussian& b) {
  detail::check_gaussians(a, b);
  const double va = a.effective_variance(), vb = b.effective_variance();
  if (std::abs(va - vb) > 1e-12 * std::max(va, vb))
    throw Error(Errc::invalid_argument, "fr_simplified needs equal variances; use frqad");
  double s = 0.0;
  for (std::size_t k = 0; k < a.mean.size(); ++k) {
    const double diff = static_cast<double>(a.mean[k]) - static_cast<double>(b.mean[k]);
    s += diff * diff;
  }
  return std::sqrt(s / va);
}

/// Per-coordinate Fisher-Rao distance between univariate normals
/// N(mu1, s1^2) and N(mu2, s2^2).
inline double fr_univariate(double mu1, double s1, double mu2, double s2) {
  const double dm = mu1 - mu2, ds = s1 - s2;
  const double arg = (dm * dm + 2.0 * ds * ds) / (4.0 * s1 * s2);
  // acosh(1 + x) = log1p(x + sqrt(x (x + 2))) keeps precision for small x
  return std::numbers::sqrt2 * std::log1p(arg + std::sqrt(arg * (arg + 2.0)));
}

/// Quantization-aware Fisher-Rao distance: the diagonal-Gaussian geodesic,
/// root of the summed squared per-coordinate distances, with each side's
/// sigma taken from its effective (precision-inflated) variance.
inline double frqad(const PrecisionGaussian& a, const PrecisionGaussian& b) {
  detail::check_gaussians(a, b);
  const double sa = a.sigma(), sb = b.sigma();
  double s = 0.0;
  for (std::size_t k = 0; k < a.mean.size(); ++k) {
    const double dk = fr_univariate(a.mean[k], sa, b.mean[k], sb);
    s += dk * dk;
  }
  return std::sqrt(s);
}

struct RampConfig {
  /// access count at which scoring is fully Fisher-Rao
  double saturation = 20.0;
};

/// w(a) = min(a / saturation, 1)
inline double ramp_weight(std::uint64_t access_count, const RampConfig& cfg = {}) {
  return std::min(static_cast<double>(access_count) / cfg.saturation, 1.0);
}

inline double distance_to_similarity(double d) { return 1.0 / (1.0 + d); }

/// Blend of cosine and FRQAD similarity that moves toward the geodesic as a
/// memory accumulates access history.
inline double graduated_score(const PrecisionGaussian& query, const PrecisionGaussian& mem,
                              std::uint64_t access_count, const RampConfig& cfg = {}) {
  const double w = ramp_weight(access_count, cfg);
  const double cos = cosine(query.mean, mem.mean);
  if (w == 0.0) return cos;
  const double fr = distance_to_similarity(frqad(query, mem));
  return w * fr + (1.0 - w) * cos;
}

}  // namespace engram
