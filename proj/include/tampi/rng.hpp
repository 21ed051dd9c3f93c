#pragma once

// Seeded random number generation with fully specified, platform-independent
// output. Standard-library distributions are implementation-defined, which
// would break byte-level dataset reproducibility, so every draw here is
// spelled out. The generator is pcg32 (O'Neill's minimal reference version);
// distinct stream ids give statistically independent sequences from one seed.

#include <cmath>
#include <cstdint>

namespace tampi {

class Rng {
public:
  explicit Rng(uint64_t seed = 0, uint64_t stream = 0) : seed_(seed) { reseed(seed, stream); }

  void reseed(uint64_t seed, uint64_t stream = 0) {
    seed_ = seed;
    state_ = 0;
    inc_ = (stream << 1u) | 1u;
    next_u32();
    state_ += seed;
    next_u32();
    has_spare_ = false;
  }

  /// Independent generator derived from the same seed (used to give each
  /// purpose inside an episode its own stream).
  Rng derive(uint64_t stream) const { return Rng(seed_, stream); }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ull + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  uint64_t next_u64() {
    uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + uniform() * (hi - lo); }

  /// Uniform integer in [0, n). Lemire multiply-shift; the O(n/2^32) bias is
  /// irrelevant at the n used here and keeps the draw a single step.
  uint32_t below(uint32_t n) {
    return static_cast<uint32_t>((static_cast<uint64_t>(next_u32()) * n) >> 32);
  }

  /// Standard normal via Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]: keeps log finite
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  uint64_t seed() const { return seed_; }

private:
  uint64_t seed_ = 0;
  uint64_t state_ = 0;
  uint64_t inc_ = 1;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace tampi
