#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dign/rng.hpp"
#include "dign/tape.hpp"
#include "dign/tensor.hpp"

namespace dign {

enum class LayerKind { Affine, Relu, Conv, GlobalAvgPool, Flatten };

struct LayerDesc {
  LayerKind kind;
  int64_t units = 0;    // Affine
  int64_t filters = 0;  // Conv
  int64_t kh = 0, kw = 0;
  Padding pad = Padding::Same;

  static LayerDesc affine(int64_t units) { return {LayerKind::Affine, units}; }
  static LayerDesc relu() { return {LayerKind::Relu}; }
  static LayerDesc conv(int64_t filters, int64_t kh, int64_t kw, Padding pad) {
    LayerDesc d{LayerKind::Conv};
    d.filters = filters;
    d.kh = kh;
    d.kw = kw;
    d.pad = pad;
    return d;
  }
  static LayerDesc global_avg_pool() { return {LayerKind::GlobalAvgPool}; }
  static LayerDesc flatten() { return {LayerKind::Flatten}; }
};

// Declarative classifier: layer chain from input_shape to K logits.
struct ModelSpec {
  std::vector<LayerDesc> layers;
  Shape input_shape;  // per-example shape, e.g. {1,16,16} or {256}
  int64_t num_classes = 0;

  // Throws ValidationError naming the first mismatched layer; returns the
  // final per-example shape (must be {num_classes}).
  Shape validate() const;

  int64_t input_dim() const { return shape_numel(input_shape); }

  // flatten -> affine 64 -> relu -> affine 32 -> relu -> affine K
  static ModelSpec mlp_64_32(Shape input_shape, int64_t num_classes);
  // conv 8x3x3 same -> relu -> conv 8x3x3 same -> relu -> gap -> affine K
  static ModelSpec tiny_cnn(Shape input_shape, int64_t num_classes);
  static ModelSpec by_name(const std::string& name, Shape input_shape, int64_t num_classes);
};

// Named parameter tensors; a deterministic function of (spec, init_seed).
struct ParamSet {
  std::vector<std::pair<std::string, Tensor>> params;
  uint64_t init_seed = 0;

  size_t size() const { return params.size(); }
  const Tensor& tensor(size_t i) const { return params[i].second; }
  Tensor& tensor(size_t i) { return params[i].second; }
  const std::string& name(size_t i) const { return params[i].first; }
};

// Weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), biases zero.
ParamSet init_params(const ModelSpec& spec, uint64_t seed);

// Graph construction: param leaves first (ParamSet order), then logits from an
// input Value. Reusing the leaves across branches accumulates their gradients.
std::vector<Value> make_param_leaves(Tape& tape, const ParamSet& params);
Value logits_graph(Tape& tape, const ModelSpec& spec, std::span<const Value> params,
                   Value x);

// Pure forward maps on a fresh tape. x is a batch: [B, ...input_shape].
Tensor logits(const ModelSpec& spec, const ParamSet& params, const Tensor& x);
Tensor log_probs(const ModelSpec& spec, const ParamSet& params, const Tensor& x);
Tensor probs(const ModelSpec& spec, const ParamSet& params, const Tensor& x);
// Argmax over classes; ties break to the lowest class index.
std::vector<int> predict(const ModelSpec& spec, const ParamSet& params, const Tensor& x);

std::vector<int> argmax_rows(const Tensor& scores);

// Text container, bit-exact round trip. The stream carries the spec and every
// parameter tensor as (name, shape, decimal float64 list).
void save_model(const ModelSpec& spec, const ParamSet& params, const std::string& path);
std::pair<ModelSpec, ParamSet> load_model(const std::string& path);
std::string model_to_string(const ModelSpec& spec, const ParamSet& params);
std::pair<ModelSpec, ParamSet> model_from_string(const std::string& text);

}  // namespace dign
