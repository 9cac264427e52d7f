#pragma once

#include <array>
#include <string>

#include "dign/rng.hpp"
#include "dign/tensor.hpp"

namespace dign {

enum class CorruptionKind { Gaussian, Shot, Impulse, Speckle };

CorruptionKind corruption_from_string(const std::string& s);
std::string corruption_to_string(CorruptionKind kind);

constexpr int kSeverityLevels = 5;

struct CorruptionSpec {
  CorruptionKind kind;
  int severity;  // 1..5

  void validate() const;
};

using SeverityTable = std::array<double, kSeverityLevels>;

// Strength parameter per severity level; strictly monotone by construction.
// gaussian/speckle: noise sigma, shot: photon count (decreasing = stronger),
// impulse: flip probability.
SeverityTable severity_table(CorruptionKind kind);

// Evaluation-time pixel noise on images in [0,1]; output is clamped back to
// [0,1]. Per-image child rng streams keep the result order-independent.
Tensor apply_corruption(const Tensor& images, const CorruptionSpec& spec, Rng& rng,
                        const SeverityTable* table_override = nullptr);

// Deterministic Poisson draw: inversion for small means, rounded-and-clamped
// normal approximation above mean 10.
int64_t poisson_draw(double mean, Rng& rng);

}  // namespace dign
