#pragma once

#include <cstdint>
#include <string_view>

namespace astra {

// Stateless 64-bit mixer (SplitMix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

// Hashes an ordered key tuple into a 64-bit value. Order matters.
std::uint64_t hash_key(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                       std::uint64_t c = 0, std::uint64_t d = 0);

std::uint64_t hash_name(std::string_view name);

// Maps 64 random bits to a double in the open interval (0, 1).
double to_unit_open(std::uint64_t bits);

// Standard normal sample that depends only on the key, via Box-Muller over two
// counter-derived uniforms. Evaluation order never changes the result.
double keyed_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c);

// Sequential generator: a counter stream keyed by a seed. Two Rng objects with
// the same seed produce the same sequence on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(mix64(seed ^ 0x243f6a8885a308d3ULL)) {}

  // Independent child stream for a named purpose.
  Rng stream(std::string_view name) const;
  Rng stream(std::uint64_t key) const;

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::uint64_t seed() const { return seed_; }

 private:
  struct Raw {};
  Rng(std::uint64_t state, Raw) : seed_(state) {}

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace astra
