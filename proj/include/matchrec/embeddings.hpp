#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "matchrec/error.hpp"
#include "matchrec/util.hpp"

namespace matchrec {

/// Frozen token -> vector table. Unknown tokens resolve to a deterministic
/// pseudo-random unit vector derived from (token, oov_seed).
class EmbeddingTable {
public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim, std::uint64_t oov_seed = 0)
      : dim_(dim), oov_seed_(oov_seed) {
    if (dim == 0) throw InputError("embedding dimension must be >= 1");
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return vectors_.size(); }
  std::uint64_t oov_seed() const noexcept { return oov_seed_; }
  void set_oov_seed(std::uint64_t seed) noexcept { oov_seed_ = seed; }
  bool contains(const std::string& token) const { return vectors_.count(token) != 0; }

  /// Inserts or replaces. Returns true when the token was already present.
  bool insert(std::string token, std::vector<double> vec) {
    if (vec.size() != dim_)
      throw InputError("vector for '" + token + "' has length " + std::to_string(vec.size()) +
                       ", expected " + std::to_string(dim_));
    auto [it, inserted] = vectors_.insert_or_assign(std::move(token), std::move(vec));
    return !inserted;
  }

  std::vector<double> lookup(const std::string& token) const {
    if (auto it = vectors_.find(token); it != vectors_.end()) return it->second;
    return oov_vector(token);
  }

  std::vector<double> oov_vector(const std::string& token) const {
    std::mt19937_64 rng(mix_seed(fnv1a64(token), oov_seed_));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> v(dim_);
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (auto& x : v) {
        x = normal(rng);
        norm2 += x * x;
      }
    } while (norm2 < 1e-24);
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& x : v) x *= inv;
    return v;
  }

  const std::vector<std::string>& duplicates() const noexcept { return duplicates_; }

private:
  friend EmbeddingTable load_embeddings(const std::filesystem::path&, std::uint64_t);

  std::size_t dim_ = 0;
  std::uint64_t oov_seed_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
  std::vector<std::string> duplicates_;
};

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string field;
  while (ss >> field) out.push_back(std::move(field));
  return out;
}

inline bool parse_integer(const std::string& s, std::size_t& value) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool parse_real(const std::string& s, double& value) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(value);
}

}  // namespace detail

/// Reads the whitespace text format: optional "<count> <dim>" header, then
/// "<token> <f1> ... <f_dim>" per line. A first line of exactly two integers
/// is always taken as the header.
inline EmbeddingTable load_embeddings(const std::filesystem::path& path,
                                      std::uint64_t oov_seed = 0) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open embeddings file " + path.string());

  EmbeddingTable table;
  table.oov_seed_ = oov_seed;
  std::size_t header_dim = 0;
  std::string line;
  std::size_t line_no = 0;
  bool seen_content = false;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (!seen_content) {
      seen_content = true;
      std::size_t count = 0, dim = 0;
      if (fields.size() == 2 && detail::parse_integer(fields[0], count) &&
          detail::parse_integer(fields[1], dim)) {
        if (dim == 0) throw InputError(path.string() + ":1: header declares dimension 0");
        header_dim = dim;
        continue;
      }
    }
    const std::size_t dim = fields.size() - 1;
    if (dim == 0)
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": no vector values");
    if (table.dim_ == 0) {
      if (header_dim != 0 && dim != header_dim)
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(header_dim) + " values, found " + std::to_string(dim));
      table.dim_ = dim;
    } else if (dim != table.dim_) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                       std::to_string(table.dim_) + " values, found " + std::to_string(dim));
    }
    std::vector<double> vec(dim);
    for (std::size_t i = 0; i < dim; ++i)
      if (!detail::parse_real(fields[i + 1], vec[i]))
        throw InputError(path.string() + ":" + std::to_string(line_no) + ": bad number '" +
                         fields[i + 1] + "'");
    if (table.insert(fields[0], std::move(vec))) table.duplicates_.push_back(fields[0]);
  }
  if (table.dim_ == 0) throw InputError("embeddings file " + path.string() + " has no vectors");
  for (const auto& tok : table.duplicates_)
    log(LogLevel::Warn, "duplicate embedding token '" + tok + "', last occurrence wins");
  return table;
}

// ---------------------------------------------------------------------------
// Cosine similarity. Split into parts so callers that cache norms follow the
// exact same floating-point path as cosine() itself.

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw InputError("vector length mismatch: " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) {
  double s = 0.0;
  for (double x : a) s += x * x;
  return std::sqrt(s);
}

inline double cosine_from_parts(double dot_ab, double norm_a, double norm_b) noexcept {
  if (norm_a < 1e-12 || norm_b < 1e-12) return 0.0;
  return std::clamp(dot_ab / (norm_a * norm_b), -1.0, 1.0);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double d = dot(a, b);
  return cosine_from_parts(d, norm(a), norm(b));
}

}  // namespace matchrec
