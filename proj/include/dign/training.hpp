#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dign/datasets_fwd.hpp"
#include "dign/model.hpp"
#include "dign/rng.hpp"
#include "dign/tensor.hpp"

namespace dign {

enum class Method { Standard, DiGN, DiGN_woCR, RSE, AT, TRADES };
enum class NormKind { L2, LInf };

Method method_from_string(const std::string& s);
std::string method_to_string(Method m);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  int steps = 7;
  double step_size = 2.5 * (8.0 / 255.0) / 7.0;
  NormKind norm = NormKind::LInf;

  void validate() const;
};

struct TrainConfig {
  Method method = Method::Standard;
  int epochs = 60;
  int batch_size = 64;
  double lr_init = 0.1;
  double lr_decay_factor = 0.1;
  int lr_decay_every = 25;
  double momentum = 0.9;  // Nesterov
  double weight_decay = 5e-4;
  double lambda = 0.2;
  double sigma_max = 0.2;
  int n_samples = 3;
  double rse_sigma = 0.1;
  int rse_ensemble_n = 10;
  AttackConfig attack;
  uint64_t seed = 1;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> train_loss;    // per epoch, example-weighted batch mean
  std::vector<double> val_accuracy;  // clean accuracy on the validation split
  std::vector<double> lr;
  int selected_epoch = -1;  // first maximizer of val_accuracy; -1 when epochs == 0
};

// ---- losses -------------------------------------------------------------

// Mean over the batch of -log_probs[i, y_i].
double cross_entropy(const Tensor& log_probs, std::span<const int> labels);

// Mean over the batch of sum_c exp(log_p) * (log_p - log_q), all in log space.
double kl_div(const Tensor& log_p, const Tensor& log_q);

// Per-example scale sigma_i ~ U(0, sigma_max), then delta_i ~ N(0, sigma_i^2 I).
// All scales are drawn before any noise entries.
struct NoiseDraw {
  std::vector<double> sigmas;  // one per example
  Tensor delta;                // batch-shaped
};
NoiseDraw sample_noise(const Shape& batch_shape, double sigma_max, Rng& rng);

// Consistency-regularized loss: CE(x,y) + lambda * mean_k KL(p(x) || p(x+delta_k)),
// fresh (sigma, delta) per sample k, gradient through both KL arguments.
double dign_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                 std::span<const int> labels, double lambda, double sigma_max, int n,
                 Rng& rng);

// Noise-augmentation-only ablation: mean_k CE(x + delta_k, y) with diverse scales.
double gn_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
               std::span<const int> labels, double sigma_max, int n, Rng& rng);

// PGD ascent on cross-entropy from delta = 0: k steps of the steepest-ascent
// direction for the chosen norm, each projected back onto the epsilon ball.
// Norms and projections are applied per example.
Tensor pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
           std::span<const int> labels, const AttackConfig& cfg, Rng& rng);

// CE + lambda * KL(p(x) || p(x+delta*)) with delta* from PGD ascent on the KL
// objective. The inner ascent starts from a small Gaussian draw because the
// KL gradient vanishes at delta = 0.
double trades_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                   std::span<const int> labels, double lambda, const AttackConfig& cfg,
                   Rng& rng);
// Inner KL objective value per ascent step (step 0 = initial draw); for tests.
std::vector<double> trades_inner_trace(const ModelSpec& spec, const ParamSet& params,
                                       const Tensor& x, std::span<const int> labels,
                                       const AttackConfig& cfg, Rng& rng);

// CE at x + delta with delta ~ N(0, sigma^2 I) (input-layer noise injection).
double rse_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                std::span<const int> labels, double sigma, Rng& rng);
// Averages softmax probabilities over n fresh draws, then argmaxes.
std::vector<int> rse_predict(const ModelSpec& spec, const ParamSet& params,
                             const Tensor& x, double sigma, int n, Rng& rng);

// ---- optimizer ----------------------------------------------------------

struct SgdState {
  std::vector<Tensor> velocity;  // aligned with ParamSet order
};

// Nesterov momentum with classic L2 weight decay folded into the gradient:
//   g <- g + wd * theta;  v <- mu * v - lr * g;  theta <- theta + mu * v - lr * g.
void sgd_update(ParamSet& params, std::span<const Tensor> grads, SgdState& state,
                double lr, double momentum, double weight_decay);

// ---- training loop ------------------------------------------------------

// Seeded shuffling, per-method batch loss, step-decay schedule. Returns the
// parameters from the epoch with the highest clean validation accuracy
// (first maximizer on ties).
std::pair<ParamSet, TrainHistory> train(const ModelSpec& spec, const TrainConfig& config,
                                        const Dataset& train_set, const Dataset& val_set);

// Batch loss + gradients for one step of the configured method; exposed for
// tests that pin golden values.
struct LossGrads {
  double loss;
  std::vector<Tensor> grads;
};
LossGrads method_loss_grads(const ModelSpec& spec, const ParamSet& params,
                            const TrainConfig& config, const Tensor& x,
                            std::span<const int> labels, Rng& rng);

}  // namespace dign
