#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace decompress {

/// Deterministic generator used for every random draw in the pipeline.
///
/// State update is splitmix64. Uniform reals take the top 53 bits of each
/// output scaled by 2^-53, so uniform() lies in [0, 1). Gaussian draws use
/// the Box-Muller transform; each pair of uniforms yields two normals and the
/// second one is cached for the next call.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Independent child stream; the parent state is not advanced.
  Rng fork(std::uint64_t stream) const {
    Rng child(state_ ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    child.next_u64();
    return child;
  }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace decompress
