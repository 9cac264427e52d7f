#include "dign/landscape.hpp"

#include <algorithm>
#include <cmath>

#include "dign/errors.hpp"
#include "dign/training.hpp"

namespace dign {

double SquareMatrix::trace() const {
  double acc = 0.0;
  for (int64_t i = 0; i < dim; ++i) acc += at(i, i);
  return acc;
}

namespace {

Tensor as_batch_of_one(const ModelSpec& spec, const Tensor& x) {
  if (x.shape() != spec.input_shape) {
    throw DimError("landscape: example shape " + x.shape_str() +
                   " does not match model input " + shape_to_string(spec.input_shape));
  }
  Shape batched = spec.input_shape;
  batched.insert(batched.begin(), 1);
  return x.reshaped(batched);
}

void check_dim_cap(int64_t dim, int64_t cap) {
  if (dim > cap) {
    throw ValidationError("input dimension " + std::to_string(dim) +
                          " exceeds the dense cap " + std::to_string(cap));
  }
}

// Gradient of one scalar output component with respect to the input, done
// with a fresh tape per component.
enum class Head { Logit, LogProb };
std::vector<double> component_input_gradient(const ModelSpec& spec, const ParamSet& params,
                                             const Tensor& x_batched, int64_t component,
                                             Head head) {
  Tape tape;
  auto leaves = make_param_leaves(tape, params);
  Value in = tape.leaf(x_batched);
  Value out = logits_graph(tape, spec, leaves, in);
  if (head == Head::LogProb) out = tape.log_softmax(out);
  tape.backward(tape.pick(out, component));
  const Tensor& g = tape.grad(in);
  return g.vec();
}

}  // namespace

LogProbJacobian logprob_jacobian(const ModelSpec& spec, const ParamSet& params,
                                 const Tensor& x, int64_t dim_cap) {
  const Tensor xb = as_batch_of_one(spec, x);
  const int64_t dim = x.size();
  check_dim_cap(dim, dim_cap);
  LogProbJacobian jac;
  jac.classes = spec.num_classes;
  jac.dim = dim;
  jac.rows.resize(static_cast<size_t>(jac.classes * dim));
  for (int64_t k = 0; k < jac.classes; ++k) {
    const auto row = component_input_gradient(spec, params, xb, k, Head::LogProb);
    std::copy(row.begin(), row.end(), jac.rows.begin() + k * dim);
  }
  return jac;
}

SquareMatrix fim(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                 int64_t dim_cap) {
  const LogProbJacobian jac = logprob_jacobian(spec, params, x, dim_cap);
  const Tensor p = probs(spec, params, as_batch_of_one(spec, x));
  SquareMatrix g(jac.dim);
  for (int64_t k = 0; k < jac.classes; ++k) {
    const double pk = p[k];
    const double* row = jac.row(k);
    for (int64_t i = 0; i < jac.dim; ++i) {
      const double w = pk * row[i];
      for (int64_t j = 0; j < jac.dim; ++j) g.at(i, j) += w * row[j];
    }
  }
  return g;
}

SquareMatrix hessian_ce(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                        int label, int64_t dim_cap) {
  if (label < 0 || label >= spec.num_classes) {
    throw ValidationError("hessian_ce: label " + std::to_string(label) + " outside [0," +
                          std::to_string(spec.num_classes) + ")");
  }
  const Tensor xb = as_batch_of_one(spec, x);
  const int64_t dim = x.size();
  check_dim_cap(dim, dim_cap);
  const int64_t classes = spec.num_classes;

  // Logit Jacobian rows, one backward pass per class.
  std::vector<std::vector<double>> jac(classes);
  for (int64_t k = 0; k < classes; ++k) {
    jac[k] = component_input_gradient(spec, params, xb, k, Head::Logit);
  }
  const Tensor p = probs(spec, params, xb);

  // H = J^T (diag(p) - p p^T) J = sum_k p_k J_k J_k^T - (J^T p)(J^T p)^T.
  std::vector<double> jp(dim, 0.0);
  for (int64_t k = 0; k < classes; ++k) {
    for (int64_t i = 0; i < dim; ++i) jp[i] += p[k] * jac[k][i];
  }
  SquareMatrix h(dim);
  for (int64_t k = 0; k < classes; ++k) {
    const double pk = p[k];
    for (int64_t i = 0; i < dim; ++i) {
      const double w = pk * jac[k][i];
      for (int64_t j = 0; j < dim; ++j) h.at(i, j) += w * jac[k][j];
    }
  }
  for (int64_t i = 0; i < dim; ++i) {
    for (int64_t j = 0; j < dim; ++j) h.at(i, j) -= jp[i] * jp[j];
  }
  return h;
}

namespace {

double kl_between(const ModelSpec& spec, const ParamSet& params, const Tensor& xb,
                  const Tensor& lp_clean, const Tensor& delta) {
  Tensor shifted = xb;
  for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += delta[i];
  return kl_div(lp_clean, log_probs(spec, params, shifted));
}

}  // namespace

std::pair<double, double> kl_gauss_expectation(const ModelSpec& spec,
                                               const ParamSet& params, const Tensor& x,
                                               double sigma, int num_samples, Rng& rng) {
  if (sigma < 0.0) throw ValidationError("kl_gauss_expectation: sigma must be >= 0");
  if (num_samples < 1) throw ValidationError("kl_gauss_expectation: need >= 1 samples");
  const Tensor xb = as_batch_of_one(spec, x);
  const double analytic = 0.5 * sigma * sigma * fim(spec, params, x).trace();
  if (sigma == 0.0) return {0.0, analytic};
  const Tensor lp_clean = log_probs(spec, params, xb);
  Tensor delta(xb.shape());
  double acc = 0.0;
  for (int s = 0; s < num_samples; ++s) {
    for (int64_t i = 0; i < delta.size(); ++i) delta[i] = sigma * rng.gaussian();
    acc += kl_between(spec, params, xb, lp_clean, delta);
  }
  return {acc / num_samples, analytic};
}

std::pair<double, double> kl_diverse_expectation(const ModelSpec& spec,
                                                 const ParamSet& params, const Tensor& x,
                                                 double sigma_max, int num_samples,
                                                 Rng& rng) {
  if (sigma_max < 0.0) throw ValidationError("kl_diverse_expectation: sigma_max must be >= 0");
  if (num_samples < 1) throw ValidationError("kl_diverse_expectation: need >= 1 samples");
  const Tensor xb = as_batch_of_one(spec, x);
  const double analytic = diverse_noise_coefficient(sigma_max) * fim(spec, params, x).trace();
  if (sigma_max == 0.0) return {0.0, analytic};
  const Tensor lp_clean = log_probs(spec, params, xb);
  Tensor delta(xb.shape());
  double acc = 0.0;
  for (int s = 0; s < num_samples; ++s) {
    const double sigma = rng.uniform(0.0, sigma_max);
    for (int64_t i = 0; i < delta.size(); ++i) delta[i] = sigma * rng.gaussian();
    acc += kl_between(spec, params, xb, lp_clean, delta);
  }
  return {acc / num_samples, analytic};
}

double diverse_noise_coefficient(double sigma_max) { return sigma_max * sigma_max / 6.0; }

Tensor input_loss_gradient(const ModelSpec& spec, const ParamSet& params, const Tensor& x,
                           int label) {
  const Tensor xb = as_batch_of_one(spec, x);
  Tape tape;
  auto leaves = make_param_leaves(tape, params);
  Value in = tape.leaf(xb);
  Value lp = tape.log_softmax(logits_graph(tape, spec, leaves, in));
  tape.backward(tape.nll(lp, {label}));
  return tape.grad(in).reshaped({x.size()});
}

GradNormIdentity grad_norm_identity_check(const ModelSpec& spec, const ParamSet& params,
                                          const Tensor& x, const Tensor& y_one_hot,
                                          int64_t dim_cap) {
  if (y_one_hot.size() != spec.num_classes) {
    throw ContractError("grad_norm_identity_check: label vector length " +
                        std::to_string(y_one_hot.size()) + " != " +
                        std::to_string(spec.num_classes));
  }
  int hot = -1;
  for (int64_t k = 0; k < y_one_hot.size(); ++k) {
    if (y_one_hot[k] == 0.0) continue;
    if (y_one_hot[k] == 1.0 && hot < 0) {
      hot = static_cast<int>(k);
    } else {
      throw ContractError("grad_norm_identity_check: label vector is not one-hot");
    }
  }
  if (hot < 0) throw ContractError("grad_norm_identity_check: label vector is all-zero");

  const Tensor grad = input_loss_gradient(spec, params, x, hot);
  double lhs = 0.0;
  for (int64_t i = 0; i < grad.size(); ++i) lhs += grad[i] * grad[i];
  lhs = std::sqrt(lhs);

  const LogProbJacobian jac = logprob_jacobian(spec, params, x, dim_cap);
  double rhs = 0.0;
  for (int64_t k = 0; k < jac.classes; ++k) {
    const double* row = jac.row(k);
    double norm2 = 0.0;
    for (int64_t i = 0; i < jac.dim; ++i) norm2 += row[i] * row[i];
    rhs += y_one_hot[k] * norm2;
  }
  return {lhs, std::sqrt(rhs)};
}

LossDeviationCheck loss_deviation_bound_check(const ModelSpec& spec,
                                              const ParamSet& params, const Tensor& x,
                                              int label, const Tensor& delta,
                                              int64_t dim_cap) {
  if (delta.size() != x.size()) {
    throw DimError("loss_deviation_bound_check: delta shape " + delta.shape_str() +
                   " does not match input " + x.shape_str());
  }
  const Tensor xb = as_batch_of_one(spec, x);
  const Tensor grad = input_loss_gradient(spec, params, x, label);
  const SquareMatrix h = hessian_ce(spec, params, x, label, dim_cap);

  double dot = 0.0, delta_norm2 = 0.0;
  for (int64_t i = 0; i < delta.size(); ++i) {
    dot += grad[i] * delta[i];
    delta_norm2 += delta[i] * delta[i];
  }
  double quad = 0.0;
  for (int64_t i = 0; i < h.dim; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < h.dim; ++j) acc += h.at(i, j) * delta[j];
    quad += delta[i] * acc;
  }
  const double delta_norm = std::sqrt(delta_norm2);

  Tensor y(Shape{static_cast<int64_t>(spec.num_classes)});
  y[label] = 1.0;
  const GradNormIdentity identity = grad_norm_identity_check(spec, params, x, y, dim_cap);
  const double lmax = power_iteration(h);

  LossDeviationCheck out;
  out.surrogate_lhs = std::fabs(dot + 0.5 * quad);
  out.bound_rhs = delta_norm * identity.weighted_row_norm + 0.5 * lmax * delta_norm2;

  Tensor shifted = xb;
  for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += delta[i];
  const double loss_at = cross_entropy(log_probs(spec, params, xb), std::vector<int>{label});
  const double loss_shifted =
      cross_entropy(log_probs(spec, params, shifted), std::vector<int>{label});
  out.fd_lhs = std::fabs(loss_shifted - loss_at);
  return out;
}

double power_iteration(const SquareMatrix& m, int iters, double tol) {
  if (m.dim == 0) return 0.0;
  std::vector<double> v(m.dim, 1.0 / std::sqrt(static_cast<double>(m.dim)));
  std::vector<double> mv(m.dim, 0.0);
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    for (int64_t i = 0; i < m.dim; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < m.dim; ++j) acc += m.at(i, j) * v[j];
      mv[i] = acc;
    }
    double rayleigh = 0.0, norm2 = 0.0;
    for (int64_t i = 0; i < m.dim; ++i) {
      rayleigh += v[i] * mv[i];
      norm2 += mv[i] * mv[i];
    }
    const double norm = std::sqrt(norm2);
    if (norm < 1e-300) return 0.0;  // zero matrix (or v in its null space)
    for (int64_t i = 0; i < m.dim; ++i) v[i] = mv[i] / norm;
    const double change = std::fabs(rayleigh - lambda);
    lambda = rayleigh;
    if (it > 0 && change <= tol * std::max(1.0, std::fabs(lambda))) break;
  }
  return lambda;
}

double hutchinson_trace(const MatVec& matvec, int64_t dim, int probes, Rng& rng) {
  if (probes < 1) throw ValidationError("hutchinson_trace: probes must be >= 1");
  std::vector<double> z(dim), mz(dim);
  double acc = 0.0;
  for (int p = 0; p < probes; ++p) {
    for (int64_t i = 0; i < dim; ++i) z[i] = (rng.next_u64() & 1) ? 1.0 : -1.0;
    matvec(z, mz);
    double dot = 0.0;
    for (int64_t i = 0; i < dim; ++i) dot += z[i] * mz[i];
    acc += dot;
  }
  return acc / probes;
}

CurvatureSummary curvature_report(const ModelSpec& spec, const ParamSet& params,
                                  const Tensor& images, std::span<const int> labels,
                                  int64_t dim_cap) {
  const int64_t batch = images.extent(0);
  if (batch == 0 || static_cast<size_t>(batch) != labels.size()) {
    throw ValidationError("curvature_report: images/labels mismatch");
  }
  const int64_t per_example = images.size() / batch;
  check_dim_cap(per_example, dim_cap);

  CurvatureSummary out;
  for (int64_t i = 0; i < batch; ++i) {
    Tensor x(spec.input_shape);
    std::copy(images.data() + i * per_example, images.data() + (i + 1) * per_example,
              x.data());
    const SquareMatrix h = hessian_ce(spec, params, x, labels[i], dim_cap);
    const Tensor grad = input_loss_gradient(spec, params, x, labels[i]);
    double gn = 0.0;
    for (int64_t j = 0; j < grad.size(); ++j) gn += grad[j] * grad[j];
    out.trace.push_back(h.trace());
    out.lambda_max.push_back(power_iteration(h));
    out.grad_norm.push_back(std::sqrt(gn));
  }
  auto mean = [](const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
  };
  out.mean_trace = mean(out.trace);
  out.mean_lambda_max = mean(out.lambda_max);
  out.mean_grad_norm = mean(out.grad_norm);
  std::vector<double> sorted = out.trace;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&sorted](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
  };
  out.q25_trace = quantile(0.25);
  out.median_trace = quantile(0.5);
  out.q75_trace = quantile(0.75);
  return out;
}

}  // namespace dign
