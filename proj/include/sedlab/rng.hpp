#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace sedlab {

/// SplitMix64 finalizer. Used to derive independent per-item seeds.
std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// seed_i = mix(master, i). Stable across platforms and library versions.
std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) noexcept;

/// Portable random source. Only the mt19937_64 bit stream (which the standard
/// pins down exactly) is used; every distribution is implemented here so that
/// seeded runs replay identically across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01();

  /// Standard normal via Box-Muller (no cached spare).
  double normal();

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);

  /// Index drawn proportionally to non-negative weights.
  std::size_t weighted(std::span<const double> weights);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sedlab
