#pragma once

// Portable seeded randomness. The std distributions are implementation
// defined, so everything that must reproduce across toolchains goes through
// these helpers on top of std::mt19937_64 (whose output is fully specified).

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace quanos::rng {

using Engine = std::mt19937_64;

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Engine& eng) { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

inline double uniform(Engine& eng, double lo, double hi) { return lo + (hi - lo) * uniform01(eng); }

/// Unbiased integer in [0, n). n must be positive.
std::uint64_t below(Engine& eng, std::uint64_t n);

/// Fisher-Yates shuffle of `values` driven by below().
template <typename V>
void shuffle(std::vector<V>& values, Engine& eng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(below(eng, i));
    std::swap(values[i - 1], values[j]);
  }
}

/// `count` distinct indices from [0, population), in draw order.
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t count, Engine& eng);

}  // namespace quanos::rng
