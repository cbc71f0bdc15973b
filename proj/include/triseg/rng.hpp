#pragma once

#include <cmath>
#include <cstdint>

namespace triseg {

/// Counter-based 64-bit PRNG: the i-th output is splitmix64(seed + i*GAMMA),
/// a pure function of (seed, i). No hidden state beyond the counter, so
/// streams are reproducible bit-for-bit and cheap to fork per worker.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  /// Independent substream; fork(a) and fork(b) are decorrelated for a != b.
  Rng fork(uint64_t stream) const { return Rng(mix(seed_ ^ mix(stream + kStreamSalt))); }

  uint64_t next_u64() { return mix(seed_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n), n > 0. Fixed-point multiply, no rejection loop.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool coin(double p) { return next_double() < p; }

  /// Standard normal via Box-Muller. Two draws per call, no cached spare.
  double gauss() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
  }

 private:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr uint64_t kStreamSalt = 0xD1B54A32D192ED03ull;
  static constexpr double kTwoPi = 6.283185307179586476925286766559;

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace triseg
