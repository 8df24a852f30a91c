#pragma once

#include <filesystem>
#include <fstream>
#include <map>

#include "engram/common.hpp"
#include "engram/random.hpp"

namespace engram {

/// Lowercase ASCII-alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Deterministic bag-of-tokens embedding: every token owns a seeded Gaussian
/// direction; the text vector is their L2-normalized sum.
inline std::vector<float> test_embedder(std::string_view text, std::size_t d, std::uint64_t seed) {
  if (d < 2) throw Error(Errc::invalid_argument, "embedding dimension must be at least 2");
  const auto tokens = tokenize(text);
  if (tokens.empty()) throw Error(Errc::invalid_argument, "cannot embed text without tokens");
  std::vector<double> acc(d, 0.0);
  for (const auto& tok : tokens) {
    GaussianStream g(fnv1a64(tok, splitmix64(seed)));
    for (auto& a : acc) a += g();
  }
  return unit_float(std::span<const double>(acc));
}

/// Reads one embedding from a text file of whitespace-separated floats.
inline std::vector<float> read_vector_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot read vector file " + path.string());
  std::vector<float> v;
  float x;
  while (in >> x) v.push_back(x);
  if (!in.eof()) throw Error(Errc::invalid_argument, "vector file contains a non-numeric entry");
  if (v.empty()) throw Error(Errc::invalid_argument, "vector file is empty");
  return v;
}

}  // namespace engram
