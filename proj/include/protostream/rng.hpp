#pragma once

#include <cmath>
#include <cstdint>

namespace protostream {

// Counter-based generator (splitmix64). The state walks a fixed odd increment
// and each output is a bijective finalizer of the counter, so streams are
// identical across platforms and compilers. Constants are the published ones:
//   increment  0x9E3779B97F4A7C15 (2^64 / golden ratio, odd)
//   mix stage1 0xBF58476D1CE4E5B9
//   mix stage2 0x94D049BB133111EB
// Distribution helpers are written out explicitly (53-bit uniform, Box-Muller,
// rejection sampling) because the <random> distributions are
// implementation-defined and would break cross-platform determinism.
class Rng {
 public:
  static constexpr std::uint64_t kIncrement = 0x9E3779B97F4A7C15ull;

  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += kIncrement);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; consumes exactly two uniforms per call
  // (no cached spare, so the draw count stays predictable).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int index(int n) { return static_cast<int>(below(static_cast<std::uint64_t>(n))); }

 private:
  std::uint64_t state_;
};

// Stable derivation of independent child streams: finalize seed ^ (tag+1)*inc
// through one splitmix64 round. Used for per-episode / per-purpose substreams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed ^ ((tag + 1) * Rng::kIncrement);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace protostream
