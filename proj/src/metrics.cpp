#include "dign/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "dign/errors.hpp"

namespace dign {

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty() || predictions.size() != labels.size()) {
    throw ValidationError("accuracy: need equal non-empty prediction/label lists");
  }
  int64_t hits = 0;
  for (size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double mca(const std::vector<std::vector<double>>& A) {
  if (A.empty() || A[0].empty()) throw ValidationError("mca: empty accuracy matrix");
  double acc = 0.0;
  size_t count = 0;
  for (const auto& row : A) {
    for (double v : row) {
      acc += v;
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

std::vector<CorruptionKind> default_mca_noise_kinds() {
  return {CorruptionKind::Shot, CorruptionKind::Impulse, CorruptionKind::Speckle};
}

double mca_noise(const std::vector<std::vector<double>>& A,
                 const std::vector<CorruptionKind>& row_kinds,
                 const std::vector<CorruptionKind>& included) {
  if (included.empty()) throw ValidationError("mca_noise: empty kind subset");
  if (A.size() != row_kinds.size()) {
    throw ValidationError("mca_noise: matrix rows do not match kind list");
  }
  std::vector<std::vector<double>> restricted;
  for (CorruptionKind want : included) {
    bool found = false;
    for (size_t r = 0; r < row_kinds.size(); ++r) {
      if (row_kinds[r] == want) {
        restricted.push_back(A[r]);
        found = true;
        break;
      }
    }
    if (!found) {
      throw ValidationError("mca_noise: kind '" + corruption_to_string(want) +
                            "' not present in the accuracy matrix");
    }
  }
  return mca(restricted);
}

double rms_calibration_error(const CalibrationInput& input) {
  const size_t n = input.confidences.size();
  if (n == 0 || input.correct.size() != n) {
    throw ValidationError("rms_calibration_error: need equal non-empty inputs");
  }
  if (input.bins < 1) throw ValidationError("rms_calibration_error: bins must be >= 1");
  for (double c : input.confidences) {
    if (!(c >= 0.0 && c <= 1.0)) {
      throw ValidationError("rms_calibration_error: confidence outside [0,1]");
    }
  }
  std::vector<double> conf_sum(input.bins, 0.0);
  std::vector<double> hit_sum(input.bins, 0.0);
  std::vector<int64_t> count(input.bins, 0);
  for (size_t j = 0; j < n; ++j) {
    int b = static_cast<int>(std::floor(input.confidences[j] * input.bins));
    b = std::min(b, input.bins - 1);  // confidence 1 joins the top bin
    conf_sum[b] += input.confidences[j];
    hit_sum[b] += input.correct[j] ? 1.0 : 0.0;
    count[b] += 1;
  }
  double acc = 0.0;
  for (int b = 0; b < input.bins; ++b) {
    if (count[b] == 0) continue;
    const double weight = static_cast<double>(count[b]) / static_cast<double>(n);
    const double gap = (hit_sum[b] - conf_sum[b]) / static_cast<double>(count[b]);
    acc += weight * gap * gap;
  }
  return std::sqrt(acc);
}

namespace {

constexpr uint64_t kEvalCorruptionStream = 0x65766C63ULL;

struct ScoredSet {
  std::vector<int> predictions;
  std::vector<double> confidences;
  std::vector<uint8_t> correct;
};

ScoredSet score(const ModelSpec& spec, const ParamSet& params, const Tensor& images,
                const std::vector<int>& labels) {
  ScoredSet out;
  const Tensor p = probs(spec, params, images);
  out.predictions = argmax_rows(p);
  const int64_t batch = p.extent(0), classes = p.extent(1);
  out.confidences.resize(batch);
  out.correct.resize(batch);
  for (int64_t i = 0; i < batch; ++i) {
    double best = 0.0;
    for (int64_t k = 0; k < classes; ++k) best = std::max(best, p.at2(i, k));
    out.confidences[i] = best;
    out.correct[i] = out.predictions[i] == labels[i] ? 1 : 0;
  }
  return out;
}

}  // namespace

EvalReport evaluate(const ModelSpec& spec, const ParamSet& params, const Dataset& test,
                    uint64_t seed, const EvalOptions& options) {
  if (test.size() == 0) throw ValidationError("evaluate: empty test set");
  test.validate();
  if (!options.table_overrides.empty() &&
      options.table_overrides.size() != options.kinds.size()) {
    throw ValidationError("evaluate: table overrides do not align with kinds");
  }

  EvalReport report;
  report.kinds = options.kinds;
  report.dataset_id = test.id;
  report.seed = seed;

  const ScoredSet clean = score(spec, params, test.images, test.labels);
  report.clean_accuracy = accuracy(clean.predictions, test.labels);
  report.clean_rmse = rms_calibration_error(
      {clean.confidences, clean.correct, options.calibration_bins});

  CalibrationInput pooled_all{{}, {}, options.calibration_bins};
  CalibrationInput pooled_noise{{}, {}, options.calibration_bins};
  const auto noise_kinds = default_mca_noise_kinds();

  Rng root = Rng(seed).derive(kEvalCorruptionStream);
  for (size_t m = 0; m < options.kinds.size(); ++m) {
    const CorruptionKind kind = options.kinds[m];
    const bool in_noise_subset =
        std::find(noise_kinds.begin(), noise_kinds.end(), kind) != noise_kinds.end();
    std::vector<double> row;
    for (int severity = 1; severity <= kSeverityLevels; ++severity) {
      Rng cell_rng = root.derive(static_cast<uint64_t>(m)).derive(
          static_cast<uint64_t>(severity));
      const SeverityTable* override_table =
          options.table_overrides.empty() ? nullptr : options.table_overrides[m];
      const Tensor corrupted =
          apply_corruption(test.images, {kind, severity}, cell_rng, override_table);
      const ScoredSet scored = score(spec, params, corrupted, test.labels);
      row.push_back(accuracy(scored.predictions, test.labels));
      pooled_all.confidences.insert(pooled_all.confidences.end(),
                                    scored.confidences.begin(), scored.confidences.end());
      pooled_all.correct.insert(pooled_all.correct.end(), scored.correct.begin(),
                                scored.correct.end());
      if (in_noise_subset) {
        pooled_noise.confidences.insert(pooled_noise.confidences.end(),
                                        scored.confidences.begin(),
                                        scored.confidences.end());
        pooled_noise.correct.insert(pooled_noise.correct.end(), scored.correct.begin(),
                                    scored.correct.end());
      }
    }
    report.A.push_back(std::move(row));
  }

  if (!report.A.empty()) {
    report.mca_all = mca(report.A);
    std::vector<CorruptionKind> present;
    for (CorruptionKind k : noise_kinds) {
      if (std::find(report.kinds.begin(), report.kinds.end(), k) != report.kinds.end()) {
        present.push_back(k);
      }
    }
    if (!present.empty()) report.mca_n = mca_noise(report.A, report.kinds, present);
    report.corrupt_rmse = rms_calibration_error(pooled_all);
    if (!pooled_noise.confidences.empty()) {
      report.corrupt_rmse_n = rms_calibration_error(pooled_noise);
    }
  }
  return report;
}

}  // namespace dign
