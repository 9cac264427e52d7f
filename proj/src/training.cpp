#include "dign/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dign/datasets.hpp"
#include "dign/errors.hpp"

namespace dign {

namespace {

// Stream tags; children of a TrainConfig seed.
constexpr uint64_t kShuffleStream = 0x73687566ULL;
constexpr uint64_t kBatchStream = 0x62617463ULL;

constexpr double kTradesInitSigma = 1e-3;

}  // namespace

Method method_from_string(const std::string& s) {
  if (s == "standard") return Method::Standard;
  if (s == "dign") return Method::DiGN;
  if (s == "dign_wocr") return Method::DiGN_woCR;
  if (s == "rse") return Method::RSE;
  if (s == "at") return Method::AT;
  if (s == "trades") return Method::TRADES;
  throw ValidationError("unknown method '" + s +
                        "' (standard, dign, dign_wocr, rse, at, trades)");
}

std::string method_to_string(Method m) {
  switch (m) {
    case Method::Standard: return "standard";
    case Method::DiGN: return "dign";
    case Method::DiGN_woCR: return "dign_wocr";
    case Method::RSE: return "rse";
    case Method::AT: return "at";
    case Method::TRADES: return "trades";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (epsilon < 0.0) throw ValidationError("attack: epsilon must be >= 0");
  if (steps < 0) throw ValidationError("attack: steps must be >= 0");
  if (steps > 0 && step_size <= 0.0) {
    throw ValidationError("attack: step_size must be > 0 when steps > 0");
  }
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (lr_init <= 0.0) throw ValidationError("train: lr_init must be > 0");
  if (lr_decay_factor <= 0.0) throw ValidationError("train: lr_decay_factor must be > 0");
  if (lr_decay_every < 1) throw ValidationError("train: lr_decay_every must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ValidationError("train: momentum must be in [0,1)");
  }
  if (weight_decay < 0.0) throw ValidationError("train: weight_decay must be >= 0");
  if (lambda < 0.0) throw ValidationError("train: lambda must be >= 0");
  if (sigma_max < 0.0) throw ValidationError("train: sigma_max must be >= 0");
  if (n_samples < 1) throw ValidationError("train: n_samples must be >= 1");
  if (rse_sigma < 0.0) throw ValidationError("train: rse_sigma must be >= 0");
  if (rse_ensemble_n < 1) throw ValidationError("train: rse_ensemble_n must be >= 1");
  attack.validate();
}

double cross_entropy(const Tensor& log_probs, std::span<const int> labels) {
  Tape tape;
  Value lp = tape.leaf(log_probs);
  Value root = tape.nll(lp, std::vector<int>(labels.begin(), labels.end()));
  return tape.value(root)[0];
}

double kl_div(const Tensor& log_p, const Tensor& log_q) {
  Tape tape;
  Value root = tape.kl(tape.leaf(log_p), tape.leaf(log_q));
  return tape.value(root)[0];
}

NoiseDraw sample_noise(const Shape& batch_shape, double sigma_max, Rng& rng) {
  if (sigma_max < 0.0) throw ValidationError("sample_noise: sigma_max must be >= 0");
  if (batch_shape.empty()) throw DimError("sample_noise: empty batch shape");
  const int64_t batch = batch_shape[0];
  const int64_t per_example = shape_numel(batch_shape) / batch;
  NoiseDraw draw;
  draw.sigmas.resize(batch);
  for (int64_t i = 0; i < batch; ++i) draw.sigmas[i] = rng.uniform(0.0, sigma_max);
  draw.delta = Tensor(batch_shape);
  for (int64_t i = 0; i < batch; ++i) {
    double* d = draw.delta.data() + i * per_example;
    const double s = draw.sigmas[i];
    for (int64_t j = 0; j < per_example; ++j) d[j] = s * rng.gaussian();
  }
  return draw;
}

namespace {

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

struct LossGraph {
  Tape tape;
  std::vector<Value> param_leaves;
  Value root;
};

// CE(x,y) + lambda * mean_k KL(lp(x) || lp(x+delta_k)) on one tape; noise is
// drawn from per-sample child streams so changing n leaves other draws alone.
void build_dign_graph(LossGraph& g, const ModelSpec& spec, const ParamSet& params,
                      const Tensor& x, std::span<const int> labels, double lambda,
                      double sigma_max, int n, Rng& rng) {
  g.param_leaves = make_param_leaves(g.tape, params);
  Value lp_clean = g.tape.log_softmax(logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(x)));
  Value ce = g.tape.nll(lp_clean, std::vector<int>(labels.begin(), labels.end()));
  Value reg{-1};
  for (int k = 0; k < n; ++k) {
    Rng sample_rng = rng.derive(static_cast<uint64_t>(k));
    NoiseDraw draw = sample_noise(x.shape(), sigma_max, sample_rng);
    Value lp_noisy = g.tape.log_softmax(
        logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(add_tensors(x, draw.delta))));
    Value term = g.tape.kl(lp_clean, lp_noisy);
    reg = k == 0 ? term : g.tape.add(reg, term);
  }
  g.root = g.tape.add(ce, g.tape.scale(reg, lambda / static_cast<double>(n)));
}

void build_gn_graph(LossGraph& g, const ModelSpec& spec, const ParamSet& params,
                    const Tensor& x, std::span<const int> labels, double sigma_max, int n,
                    Rng& rng) {
  g.param_leaves = make_param_leaves(g.tape, params);
  std::vector<int> y(labels.begin(), labels.end());
  Value acc{-1};
  for (int k = 0; k < n; ++k) {
    Rng sample_rng = rng.derive(static_cast<uint64_t>(k));
    NoiseDraw draw = sample_noise(x.shape(), sigma_max, sample_rng);
    Value lp = g.tape.log_softmax(
        logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(add_tensors(x, draw.delta))));
    Value ce = g.tape.nll(lp, y);
    acc = k == 0 ? ce : g.tape.add(acc, ce);
  }
  g.root = n == 1 ? acc : g.tape.scale(acc, 1.0 / static_cast<double>(n));
}

std::vector<Tensor> extract_param_grads(LossGraph& g) {
  g.tape.backward(g.root);
  std::vector<Tensor> grads;
  grads.reserve(g.param_leaves.size());
  for (Value v : g.param_leaves) grads.push_back(g.tape.grad(v));
  return grads;
}

// Gradient of a scalar objective with respect to the (already perturbed)
// input batch, at fixed parameters.
enum class InputObjective { CrossEntropy, KlToClean };
Tensor input_gradient(const ModelSpec& spec, const ParamSet& params, const Tensor& x_adv,
                      const Tensor& x_clean, std::span<const int> labels,
                      InputObjective objective) {
  Tape tape;
  auto leaves = make_param_leaves(tape, params);
  Value in = tape.leaf(x_adv);
  Value lp_adv = tape.log_softmax(logits_graph(tape, spec, leaves, in));
  Value root;
  if (objective == InputObjective::CrossEntropy) {
    root = tape.nll(lp_adv, std::vector<int>(labels.begin(), labels.end()));
  } else {
    Value lp_clean = tape.log_softmax(logits_graph(tape, spec, leaves, tape.leaf(x_clean)));
    root = tape.kl(lp_clean, lp_adv);
  }
  tape.backward(root);
  return tape.grad(in);
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Steepest-ascent step then projection, per example.
void pgd_step_and_project(Tensor& delta, const Tensor& grad, const AttackConfig& cfg) {
  const int64_t batch = delta.extent(0);
  const int64_t per_example = delta.size() / batch;
  for (int64_t i = 0; i < batch; ++i) {
    double* d = delta.data() + i * per_example;
    const double* g = grad.data() + i * per_example;
    if (cfg.norm == NormKind::LInf) {
      for (int64_t j = 0; j < per_example; ++j) {
        d[j] = std::clamp(d[j] + cfg.step_size * sign(g[j]), -cfg.epsilon, cfg.epsilon);
      }
    } else {
      double gnorm = 0.0;
      for (int64_t j = 0; j < per_example; ++j) gnorm += g[j] * g[j];
      gnorm = std::sqrt(gnorm);
      const double step = gnorm > 1e-12 ? cfg.step_size / gnorm : 0.0;
      double dnorm = 0.0;
      for (int64_t j = 0; j < per_example; ++j) {
        d[j] += step * g[j];
        dnorm += d[j] * d[j];
      }
      dnorm = std::sqrt(dnorm);
      if (dnorm > cfg.epsilon) {
        const double shrink = cfg.epsilon / dnorm;
        for (int64_t j = 0; j < per_example; ++j) d[j] *= shrink;
      }
    }
  }
}

void project_only(Tensor& delta, const AttackConfig& cfg) {
  const int64_t batch = delta.extent(0);
  const int64_t per_example = delta.size() / batch;
  for (int64_t i = 0; i < batch; ++i) {
    double* d = delta.data() + i * per_example;
    if (cfg.norm == NormKind::LInf) {
      for (int64_t j = 0; j < per_example; ++j) {
        d[j] = std::clamp(d[j], -cfg.epsilon, cfg.epsilon);
      }
    } else {
      double dnorm = 0.0;
      for (int64_t j = 0; j < per_example; ++j) dnorm += d[j] * d[j];
      dnorm = std::sqrt(dnorm);
      if (dnorm > cfg.epsilon) {
        const double shrink = cfg.epsilon / dnorm;
        for (int64_t j = 0; j < per_example; ++j) d[j] *= shrink;
      }
    }
  }
}

Tensor trades_inner_delta(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                          std::span<const int> labels, const AttackConfig& cfg, Rng& rng,
                          std::vector<double>* trace) {
  // Small random start: the KL objective is flat at delta = 0.
  Tensor delta(x.shape());
  for (int64_t i = 0; i < delta.size(); ++i) delta[i] = kTradesInitSigma * rng.gaussian();
  project_only(delta, cfg);
  Tensor lp_clean = log_probs(spec, params, x);
  if (trace) {
    trace->push_back(kl_div(lp_clean, log_probs(spec, params, add_tensors(x, delta))));
  }
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x_adv = add_tensors(x, delta);
    Tensor grad = input_gradient(spec, params, x_adv, x, labels, InputObjective::KlToClean);
    pgd_step_and_project(delta, grad, cfg);
    if (trace) {
      trace->push_back(kl_div(lp_clean, log_probs(spec, params, add_tensors(x, delta))));
    }
  }
  return delta;
}

void build_trades_graph(LossGraph& g, const ModelSpec& spec, const ParamSet& params,
                        const Tensor& x, std::span<const int> labels, double lambda,
                        const Tensor& delta) {
  g.param_leaves = make_param_leaves(g.tape, params);
  Value lp_clean = g.tape.log_softmax(logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(x)));
  Value ce = g.tape.nll(lp_clean, std::vector<int>(labels.begin(), labels.end()));
  Value lp_adv = g.tape.log_softmax(
      logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(add_tensors(x, delta))));
  g.root = g.tape.add(ce, g.tape.scale(g.tape.kl(lp_clean, lp_adv), lambda));
}

void build_ce_graph(LossGraph& g, const ModelSpec& spec, const ParamSet& params,
                    const Tensor& x, std::span<const int> labels) {
  g.param_leaves = make_param_leaves(g.tape, params);
  Value lp = g.tape.log_softmax(logits_graph(g.tape, spec, g.param_leaves, g.tape.leaf(x)));
  g.root = g.tape.nll(lp, std::vector<int>(labels.begin(), labels.end()));
}

Tensor gaussian_noise_like(const Tensor& x, double sigma, Rng& rng) {
  Tensor delta(x.shape());
  for (int64_t i = 0; i < delta.size(); ++i) delta[i] = sigma * rng.gaussian();
  return delta;
}

}  // namespace

double dign_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                 std::span<const int> labels, double lambda, double sigma_max, int n,
                 Rng& rng) {
  if (n < 1) throw ValidationError("dign_loss: n must be >= 1");
  LossGraph g;
  build_dign_graph(g, spec, params, x, labels, lambda, sigma_max, n, rng);
  return g.tape.value(g.root)[0];
}

double gn_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
               std::span<const int> labels, double sigma_max, int n, Rng& rng) {
  if (n < 1) throw ValidationError("gn_loss: n must be >= 1");
  LossGraph g;
  build_gn_graph(g, spec, params, x, labels, sigma_max, n, rng);
  return g.tape.value(g.root)[0];
}

Tensor pgd(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
           std::span<const int> labels, const AttackConfig& cfg, Rng& rng) {
  (void)rng;  // deterministic zero start for the CE objective
  cfg.validate();
  Tensor delta(x.shape());
  if (cfg.epsilon == 0.0) return delta;
  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x_adv = add_tensors(x, delta);
    Tensor grad = input_gradient(spec, params, x_adv, x, labels, InputObjective::CrossEntropy);
    pgd_step_and_project(delta, grad, cfg);
  }
  return delta;
}

double trades_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                   std::span<const int> labels, double lambda, const AttackConfig& cfg,
                   Rng& rng) {
  cfg.validate();
  Tensor delta = cfg.epsilon == 0.0
                     ? Tensor(x.shape())
                     : trades_inner_delta(spec, params, x, labels, cfg, rng, nullptr);
  LossGraph g;
  build_trades_graph(g, spec, params, x, labels, lambda, delta);
  return g.tape.value(g.root)[0];
}

std::vector<double> trades_inner_trace(const ModelSpec& spec, const ParamSet& params,
                                       const Tensor& x, std::span<const int> labels,
                                       const AttackConfig& cfg, Rng& rng) {
  std::vector<double> trace;
  trades_inner_delta(spec, params, x, labels, cfg, rng, &trace);
  return trace;
}

double rse_loss(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                std::span<const int> labels, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ValidationError("rse_loss: sigma must be >= 0");
  Tensor x_noisy = add_tensors(x, gaussian_noise_like(x, sigma, rng));
  return cross_entropy(log_probs(spec, params, x_noisy), labels);
}

std::vector<int> rse_predict(const ModelSpec& spec, const ParamSet& params,
                             const Tensor& x, double sigma, int n, Rng& rng) {
  if (n < 1) throw ValidationError("rse_predict: n must be >= 1");
  if (sigma < 0.0) throw ValidationError("rse_predict: sigma must be >= 0");
  Tensor mean_probs;
  for (int k = 0; k < n; ++k) {
    Tensor x_noisy = add_tensors(x, gaussian_noise_like(x, sigma, rng));
    Tensor p = probs(spec, params, x_noisy);
    if (k == 0) {
      mean_probs = std::move(p);
    } else {
      for (int64_t i = 0; i < mean_probs.size(); ++i) mean_probs[i] += p[i];
    }
  }
  for (int64_t i = 0; i < mean_probs.size(); ++i) {
    mean_probs[i] /= static_cast<double>(n);
  }
  return argmax_rows(mean_probs);
}

void sgd_update(ParamSet& params, std::span<const Tensor> grads, SgdState& state,
                double lr, double momentum, double weight_decay) {
  if (grads.size() != params.size()) {
    throw DimError("sgd_update: " + std::to_string(grads.size()) + " grads for " +
                   std::to_string(params.size()) + " params");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.velocity.push_back(Tensor(params.tensor(i).shape()));
    }
  }
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params.tensor(i);
    const Tensor& grad = grads[i];
    require_same_shape(theta, grad, "sgd_update");
    Tensor& vel = state.velocity[i];
    for (int64_t j = 0; j < theta.size(); ++j) {
      const double g = grad[j] + weight_decay * theta[j];
      vel[j] = momentum * vel[j] - lr * g;
      theta[j] += momentum * vel[j] - lr * g;
    }
  }
}

LossGrads method_loss_grads(const ModelSpec& spec, const ParamSet& params,
                            const TrainConfig& config, const Tensor& x,
                            std::span<const int> labels, Rng& rng) {
  LossGraph g;
  switch (config.method) {
    case Method::Standard:
      build_ce_graph(g, spec, params, x, labels);
      break;
    case Method::DiGN:
      build_dign_graph(g, spec, params, x, labels, config.lambda, config.sigma_max,
                       config.n_samples, rng);
      break;
    case Method::DiGN_woCR:
      build_gn_graph(g, spec, params, x, labels, config.sigma_max, config.n_samples, rng);
      break;
    case Method::RSE: {
      Tensor x_noisy = add_tensors(x, gaussian_noise_like(x, config.rse_sigma, rng));
      build_ce_graph(g, spec, params, x_noisy, labels);
      break;
    }
    case Method::AT: {
      Tensor delta = pgd(spec, params, x, labels, config.attack, rng);
      build_ce_graph(g, spec, params, add_tensors(x, delta), labels);
      break;
    }
    case Method::TRADES: {
      Tensor delta = config.attack.epsilon == 0.0
                         ? Tensor(x.shape())
                         : trades_inner_delta(spec, params, x, labels, config.attack, rng,
                                              nullptr);
      build_trades_graph(g, spec, params, x, labels, config.lambda, delta);
      break;
    }
  }
  LossGrads out;
  out.loss = g.tape.value(g.root)[0];
  out.grads = extract_param_grads(g);
  return out;
}

namespace {

Tensor gather_batch(const Tensor& images, const std::vector<int64_t>& order, size_t begin,
                    size_t end) {
  const int64_t per_example = images.size() / images.extent(0);
  Shape shape = images.shape();
  shape[0] = static_cast<int64_t>(end - begin);
  Tensor out(shape);
  for (size_t i = begin; i < end; ++i) {
    const double* src = images.data() + order[i] * per_example;
    std::copy(src, src + per_example, out.data() + (i - begin) * per_example);
  }
  return out;
}

std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

double clean_accuracy(const ModelSpec& spec, const ParamSet& params, const Dataset& data) {
  const std::vector<int> pred = predict(spec, params, data.images);
  int64_t hits = 0;
  for (size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

std::pair<ParamSet, TrainHistory> train(const ModelSpec& spec, const TrainConfig& config,
                                        const Dataset& train_set, const Dataset& val_set) {
  config.validate();
  spec.validate();
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw ValidationError("train: datasets must be non-empty");
  }
  train_set.validate();
  val_set.validate();
  if (train_set.example_shape() != spec.input_shape) {
    throw DimError("train: dataset example shape " +
                   shape_to_string(train_set.example_shape()) +
                   " does not match model input " + shape_to_string(spec.input_shape));
  }

  Rng root(config.seed);
  ParamSet params = init_params(spec, root.derive(0x696E6974ULL).origin());
  SgdState state;
  TrainHistory history;
  ParamSet best_params = params;
  double best_val = -1.0;
  const int64_t n_train = train_set.size();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        config.lr_init * std::pow(config.lr_decay_factor, epoch / config.lr_decay_every);
    Rng shuffle_rng = root.derive(kShuffleStream).derive(static_cast<uint64_t>(epoch));
    const std::vector<int64_t> order = shuffled_indices(n_train, shuffle_rng);

    double loss_weighted = 0.0;
    size_t batch_index = 0;
    for (size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_index) {
      const size_t end = std::min(order.size(), begin + config.batch_size);
      Tensor xb = gather_batch(train_set.images, order, begin, end);
      std::vector<int> yb(end - begin);
      for (size_t i = begin; i < end; ++i) yb[i - begin] = train_set.labels[order[i]];
      Rng batch_rng =
          root.derive(kBatchStream).derive(static_cast<uint64_t>(epoch)).derive(batch_index);
      LossGrads lg = method_loss_grads(spec, params, config, xb, yb, batch_rng);
      sgd_update(params, lg.grads, state, lr, config.momentum, config.weight_decay);
      loss_weighted += lg.loss * static_cast<double>(end - begin);
    }

    const double val_acc = clean_accuracy(spec, params, val_set);
    history.train_loss.push_back(loss_weighted / static_cast<double>(n_train));
    history.val_accuracy.push_back(val_acc);
    history.lr.push_back(lr);
    if (val_acc > best_val) {
      best_val = val_acc;
      best_params = params;
      history.selected_epoch = epoch;
    }
  }
  return {std::move(best_params), std::move(history)};
}

}  // namespace dign
