#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dign/corruptions.hpp"
#include "dign/datasets.hpp"
#include "dign/model.hpp"

namespace dign {

double accuracy(std::span<const int> predictions, std::span<const int> labels);

// Arithmetic mean of every entry of the (kind x severity) accuracy matrix.
double mca(const std::vector<std::vector<double>>& A);

// mca restricted to the listed rows. The default evaluation excludes the
// gaussian row from the noise aggregate.
double mca_noise(const std::vector<std::vector<double>>& A,
                 const std::vector<CorruptionKind>& row_kinds,
                 const std::vector<CorruptionKind>& included);
std::vector<CorruptionKind> default_mca_noise_kinds();

struct CalibrationInput {
  std::vector<double> confidences;  // max_c p_c per sample
  std::vector<uint8_t> correct;     // 1{y == y_hat}
  int bins = 15;
};

// Root of the bin-weighted mean squared accuracy/confidence gap over
// equal-width bins on [0,1]; sample j lands in bin floor(c_j * bins), with
// confidence 1 assigned to the top bin.
double rms_calibration_error(const CalibrationInput& input);

struct EvalReport {
  double clean_accuracy = 0.0;
  std::vector<CorruptionKind> kinds;   // row order of A
  std::vector<std::vector<double>> A;  // kinds x severities
  double mca_all = 0.0;
  double mca_n = 0.0;
  double clean_rmse = 0.0;
  double corrupt_rmse = 0.0;    // pooled over every (kind, severity)
  double corrupt_rmse_n = 0.0;  // pooled over the noise subset (no gaussian)
  std::string model_id;
  std::string dataset_id;
  uint64_t seed = 0;
};

struct EvalOptions {
  std::vector<CorruptionKind> kinds = {CorruptionKind::Gaussian, CorruptionKind::Shot,
                                       CorruptionKind::Impulse, CorruptionKind::Speckle};
  int calibration_bins = 15;
  // Optional per-kind severity table overrides, aligned with `kinds`.
  std::vector<const SeverityTable*> table_overrides;
};

// Scores a model on the clean test set and on seeded corrupted copies for
// every (kind, severity) cell, then aggregates mCA / mCA-N and pooled RMSE.
EvalReport evaluate(const ModelSpec& spec, const ParamSet& params, const Dataset& test,
                    uint64_t seed, const EvalOptions& options = {});

}  // namespace dign
