#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ratnet {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Zero-norm input to a normalizing op.
class DegenerateVectorError : public Error {
 public:
  explicit DegenerateVectorError(const std::string& where)
      : Error("degenerate vector in " + where) {}
};

// Malformed or unknown configuration; the CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Deterministic 64-bit generator. Distribution code is local so that streams
// are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 bits of resolution.
  double uniform();
  // Standard normal via Box-Muller (cached second value).
  double normal();
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64-style mixing of a master seed with stream coordinates.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

// FNV-1a 64 over raw bytes; doubles are hashed by their IEEE-754 bit pattern.
class Fnv64 {
 public:
  void update(std::span<const unsigned char> bytes);
  void update(std::string_view s);
  void update_u64(std::uint64_t v);
  void update_double(double v);
  void update_doubles(std::span<const double> v);
  std::uint64_t value() const { return h_; }
  std::string hex() const;

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t v);

// Shortest round-trip decimal representation of a double.
std::string format_double(double v);
double parse_double(std::string_view s);
long long parse_int(std::string_view s);

std::vector<std::string> split(std::string_view s, char delim);
std::string_view trim(std::string_view s);

}  // namespace ratnet
