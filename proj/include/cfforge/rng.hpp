#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace cfforge {

// Draws built directly on mt19937_64 output. std::shuffle and the standard
// distributions are implementation-defined, so everything that ends up in a
// persisted artifact goes through these instead.

inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& gen, double lo, double hi) {
  return lo + (hi - lo) * uniform01(gen);
}

// Modulo bias is negligible at the sizes used here.
inline std::size_t uniform_index(std::mt19937_64& gen, std::size_t n) {
  return n == 0 ? 0 : static_cast<std::size_t>(gen() % n);
}

inline double standard_normal(std::mt19937_64& gen) {
  double u1 = uniform01(gen);
  double u2 = uniform01(gen);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Fisher-Yates.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& gen) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[uniform_index(gen, i)]);
  }
}

}  // namespace cfforge
