#pragma once

// Data-oblivious scalar quantization of unit embeddings: a fixed Haar-random
// rotation spreads every input onto coordinates with a known marginal law,
// and each coordinate is coded against a Lloyd-Max codebook for that law.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <Eigen/Dense>
#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "engram/common.hpp"
#include "engram/random.hpp"

namespace engram {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

/// d x d orthogonal matrix, row-major. Immutable after construction.
class RotationMatrix {
 public:
  RotationMatrix() = default;
  RotationMatrix(std::size_t dim, std::uint64_t seed, std::vector<double> m)
      : dim_(dim), seed_(seed), m_(std::move(m)) {
    if (m_.size() != dim_ * dim_) throw Error(Errc::dimension_mismatch, "rotation payload size");
  }

  std::size_t dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  std::span<const double> data() const { return m_; }
  double operator()(std::size_t r, std::size_t c) const { return m_[r * dim_ + c]; }

  /// y = R x
  template <typename T>
  std::vector<double> apply(std::span<const T> x) const {
    check(x.size());
    std::vector<double> y(dim_, 0.0);
    for (std::size_t r = 0; r < dim_; ++r) {
      const double* row = &m_[r * dim_];
      double s = 0.0;
      for (std::size_t c = 0; c < dim_; ++c) s += row[c] * static_cast<double>(x[c]);
      y[r] = s;
    }
    return y;
  }

  /// x = R^T y
  template <typename T>
  std::vector<double> apply_transpose(std::span<const T> y) const {
    check(y.size());
    std::vector<double> x(dim_, 0.0);
    for (std::size_t r = 0; r < dim_; ++r) {
      const double* row = &m_[r * dim_];
      const double yr = static_cast<double>(y[r]);
      for (std::size_t c = 0; c < dim_; ++c) x[c] += row[c] * yr;
    }
    return x;
  }

  /// max |(R R^T - I)_ij|
  double orthogonality_error() const {
    double worst = 0.0;
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < dim_; ++k) s += m_[i * dim_ + k] * m_[j * dim_ + k];
        worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
      }
    return worst;
  }

  friend bool operator==(const RotationMatrix&, const RotationMatrix&) = default;

 private:
  void check(std::size_t n) const {
    if (n != dim_)
      throw Error(Errc::dimension_mismatch,
                  "vector of dim " + std::to_string(n) + " against rotation of dim " + std::to_string(dim_));
  }

  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> m_;
};

/// Haar-distributed rotation: QR of a seeded standard-Gaussian matrix with the
/// sign of each column fixed so that R has a positive diagonal (Mezzadri).
inline RotationMatrix make_rotation(std::size_t d, std::uint64_t seed) {
  if (d < 2) throw Error(Errc::invalid_argument, "rotation dimension must be >= 2");
  GaussianStream g(seed);
  Eigen::MatrixXd a(d, d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = g();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd& packed = qr.matrixQR();
  for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(d); ++c)
    if (packed(c, c) < 0) q.col(c) *= -1.0;
  std::vector<double> m(d * d);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) m[r * d + c] = q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return RotationMatrix(d, seed, std::move(m));
}

/// Law of one coordinate of a uniformly random unit vector in R^d:
/// density C (1 - y^2)^((d-3)/2) on [-1, 1], i.e. y^2 ~ Beta(1/2, (d-1)/2).
class CoordinateLaw {
 public:
  explicit CoordinateLaw(std::size_t d) : d_(static_cast<double>(d)) {
    if (d < 2) throw Error(Errc::invalid_argument, "coordinate law needs d >= 2");
    using boost::math::lgamma;
    log_c_ = lgamma(d_ / 2.0) - lgamma(0.5) - lgamma((d_ - 1.0) / 2.0);
  }

  double dim() const { return d_; }

  /// P(Y > y)
  double upper_tail(double y) const {
    if (y >= 1.0) return 0.0;
    if (y <= -1.0) return 1.0;
    const double t = 0.5 * boost::math::ibetac(0.5, (d_ - 1.0) / 2.0, y * y);
    return y >= 0.0 ? t : 1.0 - t;
  }

  /// P(lo < Y < hi), accurate in both tails.
  double mass(double lo, double hi) const {
    if (lo >= 0.0) return upper_tail(lo) - upper_tail(hi);
    if (hi <= 0.0) return upper_tail(-hi) - upper_tail(-lo);
    return 1.0 - upper_tail(hi) - upper_tail(-lo);
  }

  /// integral of y f(y) over (lo, hi)
  double first_moment(double lo, double hi) const {
    auto g = [&](double y) {
      const double s = std::max(0.0, 1.0 - y * y);
      if (s == 0.0) return 0.0;
      return std::exp(log_c_ + (d_ - 1.0) / 2.0 * std::log(s)) / (d_ - 1.0);
    };
    return g(lo) - g(hi);
  }

  /// quantile of the same family at a different (real) dimension
  static double quantile(double d, double p) {
    if (p == 0.5) return 0.0;
    const double tail = p > 0.5 ? 1.0 - p : p;
    const double y = std::sqrt(boost::math::ibetac_inv(0.5, (d - 1.0) / 2.0, 2.0 * tail));
    return p > 0.5 ? y : -y;
  }

 private:
  double d_;
  double log_c_;
};

/// Strictly increasing reconstruction levels for one bit-width.
class Codebook {
 public:
  Codebook() = default;
  Codebook(Bits bits, std::size_t dim, std::vector<double> centroids)
      : bits_(bits), dim_(dim), c_(std::move(centroids)) {
    if (c_.size() != (std::size_t{1} << bit_count(bits_))) throw Error(Errc::corrupt, "codebook size");
    id_ = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(c_.data()), c_.size() * sizeof(double)),
                  fnv1a64(std::to_string(bit_count(bits_)) + ":" + std::to_string(dim_)));
  }

  Bits bits() const { return bits_; }
  std::size_t dim() const { return dim_; }
  std::uint64_t id() const { return id_; }
  std::span<const double> centroids() const { return c_; }
  double operator[](std::size_t k) const { return c_[k]; }
  std::size_t size() const { return c_.size(); }

  /// argmin_k |y - c_k|; exact ties go to the lower index.
  std::uint16_t nearest(double y) const {
    auto it = std::lower_bound(c_.begin(), c_.end(), y);
    if (it == c_.begin()) return 0;
    if (it == c_.end()) return static_cast<std::uint16_t>(c_.size() - 1);
    const auto hi = static_cast<std::size_t>(it - c_.begin());
    return static_cast<std::uint16_t>(std::abs(y - c_[hi - 1]) <= std::abs(c_[hi] - y) ? hi - 1 : hi);
  }

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  Bits bits_ = Bits::b4;
  std::size_t dim_ = 0;
  std::vector<double> c_;
  std::uint64_t id_ = 0;
};

struct LloydOptions {
  double tolerance = 1e-6;
  int max_iterations = 10'000;
};

/// One Lloyd step on the coordinate law: every centroid moves to the
/// conditional mean of its Voronoi cell.
inline std::vector<double> lloyd_step(const CoordinateLaw& law, std::span<const double> c) {
  const std::size_t k = c.size();
  std::vector<double> next(k);
  double lo = -1.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double hi = i + 1 < k ? 0.5 * (c[i] + c[i + 1]) : 1.0;
    const double p = law.mass(lo, hi);
    next[i] = p > 0.0 ? law.first_moment(lo, hi) / p : 0.5 * (lo + hi);
    lo = hi;
  }
  return next;
}

/// Lloyd-Max codebook for the rotated-coordinate law at dimension d.
/// Starts from the high-resolution (f^{1/3}) companding point set, which for
/// this family is the same law at d' = (d + 6) / 3.
inline Codebook make_codebook(Bits bits, std::size_t d, LloydOptions opt = {}) {
  if (bits == Bits::f32) throw Error(Errc::invalid_argument, "no codebook for full precision");
  const CoordinateLaw law(d);
  const std::size_t k = std::size_t{1} << bit_count(bits);
  const double d_comp = (static_cast<double>(d) + 6.0) / 3.0;
  std::vector<double> c(k);
  for (std::size_t i = 0; i < k; ++i)
    c[i] = CoordinateLaw::quantile(d_comp, (static_cast<double>(i) + 0.5) / static_cast<double>(k));

  for (int it = 0; it < opt.max_iterations; ++it) {
    auto next = lloyd_step(law, c);
    for (std::size_t i = 0; i < k / 2; ++i) {
      const double m = 0.5 * (next[k - 1 - i] - next[i]);
      next[i] = -m;
      next[k - 1 - i] = m;
    }
    double moved = 0.0;
    for (std::size_t i = 0; i < k; ++i) moved = std::max(moved, std::abs(next[i] - c[i]));
    c = std::move(next);
    if (moved < opt.tolerance) return Codebook(bits, d, std::move(c));
  }
  throw Error(Errc::convergence, "Lloyd iteration did not converge for b=" + std::to_string(bit_count(bits)) +
                                     " d=" + std::to_string(d));
}

struct QuantizedVector {
  Bits bits = Bits::b4;
  std::uint32_t dim = 0;
  std::vector<std::uint8_t> packed;
  std::uint64_t rotation_seed = 0;
  std::uint64_t codebook_id = 0;

  friend bool operator==(const QuantizedVector&, const QuantizedVector&) = default;
};

inline std::size_t packed_size(Bits bits, std::size_t dim) {
  return (static_cast<std::size_t>(bit_count(bits)) * dim + 7) / 8;
}

/// Coordinate-major bitstream; bit i of the stream is bit (i % 8) of byte i / 8.
inline std::vector<std::uint8_t> pack_indices(std::span<const std::uint16_t> idx, Bits bits) {
  const int b = bit_count(bits);
  std::vector<std::uint8_t> out(packed_size(bits, idx.size()), 0);
  std::size_t pos = 0;
  for (std::uint16_t v : idx) {
    if (v >> b) throw Error(Errc::invalid_argument, "index out of range for bit-width");
    for (int i = 0; i < b; ++i, ++pos)
      if (v >> i & 1U) out[pos / 8] |= static_cast<std::uint8_t>(1U << (pos % 8));
  }
  return out;
}

inline std::vector<std::uint16_t> unpack_indices(std::span<const std::uint8_t> bytes, Bits bits, std::size_t dim) {
  const int b = bit_count(bits);
  if (bytes.size() != packed_size(bits, dim)) throw Error(Errc::corrupt, "packed payload length mismatch");
  std::vector<std::uint16_t> idx(dim, 0);
  std::size_t pos = 0;
  for (std::size_t j = 0; j < dim; ++j)
    for (int i = 0; i < b; ++i, ++pos)
      if (bytes[pos / 8] >> (pos % 8) & 1U) idx[j] = static_cast<std::uint16_t>(idx[j] | (1U << i));
  return idx;
}

namespace detail {

inline QuantizedVector code_rotated(std::span<const double> y, const RotationMatrix& rot, const Codebook& cb) {
  std::vector<std::uint16_t> idx(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) idx[j] = cb.nearest(y[j]);
  return QuantizedVector{cb.bits(), static_cast<std::uint32_t>(y.size()), pack_indices(idx, cb.bits()), rot.seed(),
                         cb.id()};
}

inline void check_pair(const RotationMatrix& rot, const Codebook& cb) {
  if (rot.dim() != cb.dim()) throw Error(Errc::dimension_mismatch, "rotation and codebook dimensions differ");
}

}  // namespace detail

inline QuantizedVector quantize(std::span<const float> x, const RotationMatrix& rot, const Codebook& cb) {
  detail::check_pair(rot, cb);
  if (x.size() != rot.dim()) throw Error(Errc::dimension_mismatch, "quantize: input dimension mismatch");
  const double n = l2_norm(x);
  if (std::abs(n - 1.0) >= 1e-3) throw Error(Errc::not_unit_norm, "quantize: input is not unit norm");
  return detail::code_rotated(rot.apply(x), rot, cb);
}

inline std::vector<float> dequantize(const QuantizedVector& q, const RotationMatrix& rot, const Codebook& cb) {
  if (q.rotation_seed != rot.seed() || q.codebook_id != cb.id() || q.bits != cb.bits())
    throw Error(Errc::id_mismatch, "dequantize: rotation/codebook ids do not match the vector");
  if (q.dim != rot.dim()) throw Error(Errc::dimension_mismatch, "dequantize: dimension mismatch");
  const auto idx = unpack_indices(q.packed, q.bits, q.dim);
  std::vector<double> y(q.dim);
  for (std::size_t j = 0; j < y.size(); ++j) y[j] = cb[idx[j]];
  const auto x = rot.apply_transpose(std::span<const double>(y));
  return {x.begin(), x.end()};
}

/// Demotes a quantized vector to a lower bit-width through its reconstruction.
inline QuantizedVector requantize(const QuantizedVector& q, Bits to, const RotationMatrix& rot, const Codebook& from,
                                  const Codebook& target) {
  if (bit_count(to) > bit_count(q.bits))
    throw Error(Errc::promotion, "requantize: promotion needs the full-precision source");
  if (to == q.bits) return q;
  if (target.bits() != to) throw Error(Errc::invalid_argument, "requantize: target codebook has the wrong bit-width");
  const auto x = dequantize(q, rot, from);
  return detail::code_rotated(rot.apply(std::span<const float>(x)), rot, target);
}

// ---- persistence ----

namespace detail {

struct BlobHeader {
  char magic[8];
  std::uint32_t version;
  std::uint32_t dim;
  std::uint32_t bits;
  std::uint64_t seed;
  std::uint64_t checksum;
};

inline constexpr std::uint32_t blob_version = 1;

inline void write_blob(const std::filesystem::path& path, const char (&magic)[8], std::uint32_t dim,
                       std::uint32_t bits, std::uint64_t seed, std::span<const double> payload) {
  const auto bytes = std::span(reinterpret_cast<const unsigned char*>(payload.data()), payload.size_bytes());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::io, "cannot write " + tmp);
    out.write(magic, 8);
    auto put = [&](auto v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    put(blob_version);
    put(dim);
    put(bits);
    put(seed);
    put(fnv1a64(bytes));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) throw Error(Errc::io, "short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::pair<BlobHeader, std::vector<double>> read_blob(const std::filesystem::path& path, const char (&magic)[8]) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  BlobHeader h{};
  in.read(h.magic, 8);
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof v); };
  get(h.version);
  get(h.dim);
  get(h.bits);
  get(h.seed);
  get(h.checksum);
  if (!in || std::memcmp(h.magic, magic, 8) != 0) throw Error(Errc::corrupt, path.string() + ": bad magic");
  if (h.version != blob_version) throw Error(Errc::corrupt, path.string() + ": unsupported version");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() % sizeof(double)) throw Error(Errc::corrupt, path.string() + ": truncated payload");
  std::vector<double> payload(raw.size() / sizeof(double));
  std::memcpy(payload.data(), raw.data(), raw.size());
  if (fnv1a64(std::span(reinterpret_cast<const unsigned char*>(raw.data()), raw.size())) != h.checksum)
    throw Error(Errc::corrupt, path.string() + ": checksum mismatch");
  return {h, std::move(payload)};
}

inline constexpr char rotation_magic[8] = {'E', 'N', 'G', 'R', 'R', 'O', 'T', '\0'};
inline constexpr char codebook_magic[8] = {'E', 'N', 'G', 'R', 'C', 'B', 'K', '\0'};

}  // namespace detail

inline void save_rotation(const RotationMatrix& r, const std::filesystem::path& path) {
  detail::write_blob(path, detail::rotation_magic, static_cast<std::uint32_t>(r.dim()), 0, r.seed(), r.data());
}

inline RotationMatrix load_rotation(const std::filesystem::path& path) {
  auto [h, payload] = detail::read_blob(path, detail::rotation_magic);
  if (payload.size() != std::size_t{h.dim} * h.dim) throw Error(Errc::corrupt, path.string() + ": size mismatch");
  return RotationMatrix(h.dim, h.seed, std::move(payload));
}

inline void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  detail::write_blob(path, detail::codebook_magic, static_cast<std::uint32_t>(cb.dim()),
                     static_cast<std::uint32_t>(bit_count(cb.bits())), 0, cb.centroids());
}

inline Codebook load_codebook(const std::filesystem::path& path) {
  auto [h, payload] = detail::read_blob(path, detail::codebook_magic);
  return Codebook(bits_from_int(static_cast<int>(h.bits)), h.dim, std::move(payload));
}

/// Rotation plus one codebook per supported bit-width, shared by a whole store.
class Quantizer {
 public:
  Quantizer() = default;
  Quantizer(RotationMatrix rot, std::map<Bits, Codebook> books) : rot_(std::move(rot)), books_(std::move(books)) {
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) {
      if (!books_.count(b)) throw Error(Errc::corrupt, "quantizer is missing a codebook");
      detail::check_pair(rot_, books_.at(b));
    }
  }

  static Quantizer create(std::size_t d, std::uint64_t seed) {
    std::map<Bits, Codebook> books;
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) books.emplace(b, make_codebook(b, d));
    return Quantizer(make_rotation(d, seed), std::move(books));
  }

  static std::filesystem::path rotation_path(const std::filesystem::path& dir) { return dir / "rotation.bin"; }
  static std::filesystem::path codebook_path(const std::filesystem::path& dir, Bits b) {
    return dir / ("codebook_b" + std::to_string(bit_count(b)) + ".bin");
  }

  void save(const std::filesystem::path& dir) const {
    save_rotation(rot_, rotation_path(dir));
    for (const auto& [b, cb] : books_) save_codebook(cb, codebook_path(dir, b));
  }

  static Quantizer load(const std::filesystem::path& dir) {
    std::map<Bits, Codebook> books;
    for (auto b : {Bits::b2, Bits::b4, Bits::b8}) books.emplace(b, load_codebook(codebook_path(dir, b)));
    return Quantizer(load_rotation(rotation_path(dir)), std::move(books));
  }

  /// Loads the files beside a store, creating them on first use. A dimension
  /// or seed mismatch with existing files is corruption, not a reason to rebuild.
  static Quantizer open_or_create(const std::filesystem::path& dir, std::size_t d, std::uint64_t seed) {
    if (std::filesystem::exists(rotation_path(dir))) {
      auto q = load(dir);
      if (q.dim() != d || q.rotation().seed() != seed)
        throw Error(Errc::corrupt, "quantizer files do not match the configured dimension/seed");
      return q;
    }
    auto q = create(d, seed);
    q.save(dir);
    return q;
  }

  std::size_t dim() const { return rot_.dim(); }
  const RotationMatrix& rotation() const { return rot_; }
  const Codebook& codebook(Bits b) const {
    auto it = books_.find(b);
    if (it == books_.end()) throw Error(Errc::invalid_argument, "no codebook for this bit-width");
    return it->second;
  }

  QuantizedVector quantize(std::span<const float> x, Bits b) const { return engram::quantize(x, rot_, codebook(b)); }
  std::vector<float> dequantize(const QuantizedVector& q) const {
    return engram::dequantize(q, rot_, codebook(q.bits));
  }
  QuantizedVector requantize(const QuantizedVector& q, Bits to) const {
    if (to == q.bits) return q;
    if (bit_count(to) > bit_count(q.bits))
      throw Error(Errc::promotion, "requantize: promotion needs the full-precision source");
    return engram::requantize(q, to, rot_, codebook(q.bits), codebook(to));
  }

 private:
  RotationMatrix rot_;
  std::map<Bits, Codebook> books_;
};

}  // namespace engram
