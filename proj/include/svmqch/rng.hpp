#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "svmqch/core.hpp"

namespace svmqch {

namespace detail {

inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform in (0, 1), never exactly 0.
inline double toUnit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

/// Counter-based Gaussian source keyed by (seed, stream, step, component).
/// The same key always yields the same value, independent of call order or thread.
class CounterNormal {
 public:
  explicit CounterNormal(std::uint64_t seed) : seed_(seed) {}

  double operator()(std::uint64_t stream, std::uint64_t step, std::uint64_t component) const {
    std::uint64_t k = detail::mix64(seed_ ^ detail::mix64(stream + 0x632BE59BD9B4E019ULL));
    k = detail::mix64(k ^ detail::mix64(step * 0x9E6C63D0676A9A99ULL + 1));
    k = detail::mix64(k ^ (component * 0xD1B54A32D192ED03ULL + 7));
    const double u1 = detail::toUnit(k);
    const double u2 = detail::toUnit(detail::mix64(k ^ 0xA0761D6478BD642FULL));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  double uniform(std::uint64_t stream, std::uint64_t step, std::uint64_t component) const {
    std::uint64_t k = detail::mix64(seed_ ^ detail::mix64(stream + 0x5851F42D4C957F2DULL));
    k = detail::mix64(k ^ detail::mix64(step + 0x14057B7EF767814FULL));
    return detail::toUnit(detail::mix64(k ^ component));
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
};

/// Wiener increments for one path: dW per step and component, N(0, dt).
struct WienerStream {
  std::uint64_t seed = 0;
  std::uint64_t streamId = 0;
  double dt = 1e-3;

  void increments(std::uint64_t step, std::span<double> out) const {
    const CounterNormal normal(seed);
    const double s = std::sqrt(dt);
    for (std::size_t c = 0; c < out.size(); ++c) out[c] = s * normal(streamId, step, c);
  }
};

}  // namespace svmqch
