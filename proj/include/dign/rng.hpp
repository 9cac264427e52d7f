#pragma once

#include <array>
#include <cstdint>

namespace dign {

// Deterministic 64-bit random stream: xoshiro256++ seeded through SplitMix64.
// Child streams are derived from the parent's origin seed and a tag, never
// from consumption state, so stream layout is stable under draw-count changes.
// Gaussian draws use Box-Muller on consecutive uniforms (the sine mate is
// cached and served on the next call).
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0,1) with 53-bit resolution.
  double uniform();
  double uniform(double lo, double hi);

  // Standard normal draw.
  double gaussian();

  // Child stream keyed by (origin seed, tag); independent of draws made so far.
  Rng derive(uint64_t tag) const;

  uint64_t origin() const { return origin_; }

  static uint64_t mix(uint64_t a, uint64_t b);

 private:
  uint64_t origin_ = 0;
  std::array<uint64_t, 4> state_{};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dign
