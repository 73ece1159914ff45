#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace jscc {

/// SplitMix64 finalizer; a bijection on 64-bit words with good avalanche.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + 0x632be59bd9b4e019ULL));
}

template <class... Rest>
constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return hash_combine(hash_combine(a, b), static_cast<std::uint64_t>(rest)...);
}

/// Uniform double in the open interval (0, 1) from 53 random bits.
constexpr double to_unit_open(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

/// Counter-based generator: the i-th draw depends only on (key, i), so
/// results do not depend on evaluation order or thread scheduling.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t key) : key_(key) {}

  constexpr std::uint64_t bits(std::uint64_t index) const { return hash_combine(key_, index); }
  constexpr double uniform(std::uint64_t index) const { return to_unit_open(bits(index)); }

  /// Standard normal via Box-Muller on two independent uniforms.
  double normal(std::uint64_t index) const {
    const double u1 = to_unit_open(hash_combine(key_, 2 * index));
    const double u2 = to_unit_open(hash_combine(key_, 2 * index + 1));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  constexpr std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
};

/// Sequential stream over a CounterRng, for code that just wants "the next number".
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : rng_(seed) {}

  std::uint64_t next_bits() { return rng_.bits(counter_++); }
  double uniform() { return rng_.uniform(counter_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return rng_.normal(counter_++); }

  /// Uniform integer in [0, n) by rejection, free of modulo bias.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do r = next_bits();
    while (r >= limit);
    return r % n;
  }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
};

}  // namespace jscc
