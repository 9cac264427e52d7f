#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dign/rng.hpp"
#include "dign/tensor.hpp"

namespace dign {

// Labeled image set; pixels in [0,1], labels in [0, num_classes).
struct Dataset {
  Tensor images;  // [B,C,H,W]
  std::vector<int> labels;
  int num_classes = 0;
  std::string id;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  Shape example_shape() const {  // per-example [C,H,W]
    return {images.extent(1), images.extent(2), images.extent(3)};
  }
  void validate() const;
  // New dataset with the given rows, in order.
  Dataset subset(const std::vector<int64_t>& indices, const std::string& new_id) const;
};

// Seeded sinusoidal-texture classification benchmark. Each class has a fixed
// template 0.5 + 0.35*sin(2*pi*(fx*i + fy*j)/H + phase) with distinct integer
// frequencies (fx,fy) in {1..4}^2; samples add per-pixel jitter a*U(-1,1).
struct SynthSpec {
  int num_classes = 4;
  int64_t height = 16, width = 16;  // C = 1
  int train_per_class = 500;
  int val_per_class = 100;
  int test_per_class = 250;
  double jitter = 0.08;
  uint64_t seed = 7;

  void validate() const;
  std::string id() const;
};

struct SynthSplits {
  Dataset train, val, test;
};

SynthSplits generate_synth(const SynthSpec& spec);
// Class templates only (one [H,W] image per class), for fixture checks.
std::vector<Tensor> synth_templates(const SynthSpec& spec);

// Big-endian IDX containers (the MNIST family). Images: magic 0x00000803,
// dims N,H,W, ubyte pixels scaled by 1/255. Labels: magic 0x00000801.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
// Writes 8-bit quantized pixels (round(p*255)); requires C == 1.
void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path);
// IDX pair plus a sidecar metadata text file (id, seed, spec description).
void save_dataset_cache(const Dataset& data, const std::string& basename,
                        const std::string& meta);

// Seeded permutation then contiguous slices; sizes floor(fraction * N).
// Stratified mode permutes and slices within each class (counts within +-1
// of proportional for balanced data).
std::vector<Dataset> split(const Dataset& data, const std::vector<double>& fractions,
                           uint64_t seed, bool stratified = false);

}  // namespace dign
