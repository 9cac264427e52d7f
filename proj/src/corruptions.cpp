#include "dign/corruptions.hpp"

#include <algorithm>
#include <cmath>

#include "dign/errors.hpp"

namespace dign {

CorruptionKind corruption_from_string(const std::string& s) {
  if (s == "gaussian") return CorruptionKind::Gaussian;
  if (s == "shot") return CorruptionKind::Shot;
  if (s == "impulse") return CorruptionKind::Impulse;
  if (s == "speckle") return CorruptionKind::Speckle;
  throw ValidationError("unknown corruption kind '" + s +
                        "' (gaussian, shot, impulse, speckle)");
}

std::string corruption_to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::Gaussian: return "gaussian";
    case CorruptionKind::Shot: return "shot";
    case CorruptionKind::Impulse: return "impulse";
    case CorruptionKind::Speckle: return "speckle";
  }
  return "?";
}

void CorruptionSpec::validate() const {
  if (severity < 1 || severity > kSeverityLevels) {
    throw ValidationError("corruption severity " + std::to_string(severity) +
                          " outside [1," + std::to_string(kSeverityLevels) + "]");
  }
}

SeverityTable severity_table(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::Gaussian: return {0.04, 0.08, 0.12, 0.18, 0.26};
    case CorruptionKind::Shot: return {60.0, 25.0, 12.0, 5.0, 3.0};
    case CorruptionKind::Impulse: return {0.03, 0.06, 0.09, 0.17, 0.27};
    case CorruptionKind::Speckle: return {0.06, 0.12, 0.20, 0.35, 0.50};
  }
  throw ValidationError("unknown corruption kind");
}

int64_t poisson_draw(double mean, Rng& rng) {
  if (mean <= 0.0) return 0;
  if (mean <= 10.0) {
    // Inversion by sequential search.
    const double u = rng.uniform();
    double p = std::exp(-mean);
    double cum = p;
    int64_t k = 0;
    while (u > cum && k < 1000) {
      ++k;
      p *= mean / static_cast<double>(k);
      cum += p;
    }
    return k;
  }
  const double draw = mean + std::sqrt(mean) * rng.gaussian();
  return std::max<int64_t>(0, static_cast<int64_t>(std::llround(draw)));
}

Tensor apply_corruption(const Tensor& images, const CorruptionSpec& spec, Rng& rng,
                        const SeverityTable* table_override) {
  spec.validate();
  if (images.rank() != 4) {
    throw ValidationError("apply_corruption: images must be [B,C,H,W], got " +
                          images.shape_str());
  }
  for (int64_t i = 0; i < images.size(); ++i) {
    if (!(images[i] >= 0.0 && images[i] <= 1.0)) {
      throw ValidationError("apply_corruption: pixel " + std::to_string(i) +
                            " outside [0,1]");
    }
  }
  const SeverityTable table =
      table_override ? *table_override : severity_table(spec.kind);
  const double param = table[spec.severity - 1];
  const int64_t batch = images.extent(0);
  const int64_t per_example = images.size() / batch;

  Tensor out(images.shape());
  for (int64_t i = 0; i < batch; ++i) {
    Rng image_rng = rng.derive(static_cast<uint64_t>(i));
    const double* src = images.data() + i * per_example;
    double* dst = out.data() + i * per_example;
    switch (spec.kind) {
      case CorruptionKind::Gaussian:
        for (int64_t p = 0; p < per_example; ++p) {
          dst[p] = src[p] + param * image_rng.gaussian();
        }
        break;
      case CorruptionKind::Shot:
        for (int64_t p = 0; p < per_example; ++p) {
          dst[p] = static_cast<double>(poisson_draw(src[p] * param, image_rng)) / param;
        }
        break;
      case CorruptionKind::Impulse:
        for (int64_t p = 0; p < per_example; ++p) {
          if (image_rng.uniform() < param) {
            dst[p] = image_rng.uniform() < 0.5 ? 0.0 : 1.0;
          } else {
            dst[p] = src[p];
          }
        }
        break;
      case CorruptionKind::Speckle:
        for (int64_t p = 0; p < per_example; ++p) {
          dst[p] = src[p] + src[p] * param * image_rng.gaussian();
        }
        break;
    }
    for (int64_t p = 0; p < per_example; ++p) dst[p] = std::clamp(dst[p], 0.0, 1.0);
  }
  return out;
}

}  // namespace dign
