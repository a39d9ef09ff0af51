#ifndef PEPNET_RNG_HPP
#define PEPNET_RNG_HPP

#include <cmath>
#include <random>

namespace pepnet {

// Distribution helpers built directly on the raw 64-bit stream so that
// sampled values are identical across standard library implementations.

inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double a, double b) {
  return a + (b - a) * uniform01(rng);
}

inline double gauss(std::mt19937_64& rng) {
  double u1 = uniform01(rng), u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace pepnet

#endif
