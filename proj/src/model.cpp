#include "dign/model.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dign/errors.hpp"

namespace dign {

namespace {

// Shape of a layer's output given its input shape; batch dim excluded.
Shape layer_output_shape(const LayerDesc& layer, const Shape& in, size_t index) {
  const std::string where = "layer " + std::to_string(index);
  switch (layer.kind) {
    case LayerKind::Affine: {
      if (in.size() != 1) {
        throw ValidationError(where + " (affine): needs a flat input, got " +
                              shape_to_string(in));
      }
      if (layer.units < 1) throw ValidationError(where + " (affine): units must be >= 1");
      return {layer.units};
    }
    case LayerKind::Relu:
      return in;
    case LayerKind::Conv: {
      if (in.size() != 3) {
        throw ValidationError(where + " (conv): needs a [C,H,W] input, got " +
                              shape_to_string(in));
      }
      if (layer.filters < 1 || layer.kh < 1 || layer.kw < 1 || layer.kh % 2 == 0 ||
          layer.kw % 2 == 0) {
        throw ValidationError(where + " (conv): filters >= 1 and odd kernel required");
      }
      if (layer.pad == Padding::Same) return {layer.filters, in[1], in[2]};
      if (layer.kh > in[1] || layer.kw > in[2]) {
        throw ValidationError(where + " (conv): kernel larger than input under valid padding");
      }
      return {layer.filters, in[1] - layer.kh + 1, in[2] - layer.kw + 1};
    }
    case LayerKind::GlobalAvgPool: {
      if (in.size() != 3) {
        throw ValidationError(where + " (global_avg_pool): needs a [C,H,W] input, got " +
                              shape_to_string(in));
      }
      return {in[0]};
    }
    case LayerKind::Flatten:
      return {shape_numel(in)};
  }
  throw ValidationError(where + ": unknown layer kind");
}

int64_t fan_in(const LayerDesc& layer, const Shape& in) {
  if (layer.kind == LayerKind::Affine) return in[0];
  return in[0] * layer.kh * layer.kw;  // conv: C * kh * kw
}

}  // namespace

Shape ModelSpec::validate() const {
  if (num_classes < 2) throw ValidationError("model spec: num_classes must be >= 2");
  if (input_shape.empty()) throw ValidationError("model spec: empty input shape");
  Shape cur = input_shape;
  for (size_t i = 0; i < layers.size(); ++i) cur = layer_output_shape(layers[i], cur, i);
  if (cur.size() != 1 || cur[0] != num_classes) {
    throw ValidationError("model spec: final shape " + shape_to_string(cur) +
                          " is not the logit vector (" + std::to_string(num_classes) + ")");
  }
  return cur;
}

ModelSpec ModelSpec::mlp_64_32(Shape input_shape, int64_t num_classes) {
  ModelSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.num_classes = num_classes;
  spec.layers = {LayerDesc::flatten(),   LayerDesc::affine(64), LayerDesc::relu(),
                 LayerDesc::affine(32),  LayerDesc::relu(),     LayerDesc::affine(num_classes)};
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::tiny_cnn(Shape input_shape, int64_t num_classes) {
  ModelSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.num_classes = num_classes;
  spec.layers = {LayerDesc::conv(8, 3, 3, Padding::Same), LayerDesc::relu(),
                 LayerDesc::conv(8, 3, 3, Padding::Same), LayerDesc::relu(),
                 LayerDesc::global_avg_pool(),            LayerDesc::affine(num_classes)};
  spec.validate();
  return spec;
}

ModelSpec ModelSpec::by_name(const std::string& name, Shape input_shape,
                             int64_t num_classes) {
  if (name == "mlp_64_32") return mlp_64_32(std::move(input_shape), num_classes);
  if (name == "tiny_cnn") return tiny_cnn(std::move(input_shape), num_classes);
  throw ValidationError("unknown model name '" + name + "' (mlp_64_32, tiny_cnn)");
}

ParamSet init_params(const ModelSpec& spec, uint64_t seed) {
  spec.validate();
  ParamSet out;
  out.init_seed = seed;
  Rng rng = Rng(seed).derive(0x706172616D73ULL);  // dedicated init stream
  Shape cur = spec.input_shape;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerDesc& layer = spec.layers[i];
    const std::string prefix = "layer" + std::to_string(i);
    if (layer.kind == LayerKind::Affine) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(layer, cur)));
      Tensor w({cur[0], layer.units});
      for (int64_t j = 0; j < w.size(); ++j) w[j] = rng.uniform(-bound, bound);
      out.params.emplace_back(prefix + ".weight", std::move(w));
      out.params.emplace_back(prefix + ".bias", Tensor({layer.units}));
    } else if (layer.kind == LayerKind::Conv) {
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in(layer, cur)));
      Tensor k({layer.filters, cur[0], layer.kh, layer.kw});
      for (int64_t j = 0; j < k.size(); ++j) k[j] = rng.uniform(-bound, bound);
      out.params.emplace_back(prefix + ".kernel", std::move(k));
    }
    cur = layer_output_shape(layer, cur, i);
  }
  return out;
}

std::vector<Value> make_param_leaves(Tape& tape, const ParamSet& params) {
  std::vector<Value> values;
  values.reserve(params.size());
  for (const auto& [name, tensor] : params.params) values.push_back(tape.leaf(tensor));
  return values;
}

Value logits_graph(Tape& tape, const ModelSpec& spec, std::span<const Value> params,
                   Value x) {
  Value cur = x;
  size_t p = 0;
  for (const LayerDesc& layer : spec.layers) {
    switch (layer.kind) {
      case LayerKind::Affine: {
        Value w = params[p++];
        Value b = params[p++];
        cur = tape.affine(cur, w, b);
        break;
      }
      case LayerKind::Relu:
        cur = tape.relu(cur);
        break;
      case LayerKind::Conv:
        cur = tape.conv2d(cur, params[p++], layer.pad);
        break;
      case LayerKind::GlobalAvgPool:
        cur = tape.global_avg_pool(cur);
        break;
      case LayerKind::Flatten:
        cur = tape.flatten(cur);
        break;
    }
  }
  if (p != params.size()) {
    throw ContractError("logits_graph: parameter count does not match spec");
  }
  return cur;
}

namespace {

void check_batch_input(const ModelSpec& spec, const Tensor& x) {
  const Shape& s = x.shape();
  bool ok = s.size() == spec.input_shape.size() + 1 && s[0] >= 1;
  if (ok) {
    for (size_t i = 0; i < spec.input_shape.size(); ++i) {
      if (s[i + 1] != spec.input_shape[i]) ok = false;
    }
  }
  if (!ok) {
    throw DimError("input batch " + x.shape_str() + " does not match model input " +
                   shape_to_string(spec.input_shape));
  }
}

}  // namespace

Tensor logits(const ModelSpec& spec, const ParamSet& params, const Tensor& x) {
  check_batch_input(spec, x);
  Tape tape;
  auto leaves = make_param_leaves(tape, params);
  Value out = logits_graph(tape, spec, leaves, tape.leaf(x));
  return tape.value(out);
}

Tensor log_probs(const ModelSpec& spec, const ParamSet& params, const Tensor& x) {
  check_batch_input(spec, x);
  Tape tape;
  auto leaves = make_param_leaves(tape, params);
  Value out = tape.log_softmax(logits_graph(tape, spec, leaves, tape.leaf(x)));
  return tape.value(out);
}

Tensor probs(const ModelSpec& spec, const ParamSet& params, const Tensor& x) {
  Tensor lp = log_probs(spec, params, x);
  for (int64_t i = 0; i < lp.size(); ++i) lp[i] = std::exp(lp[i]);
  return lp;
}

std::vector<int> argmax_rows(const Tensor& scores) {
  const int64_t batch = scores.extent(0), classes = scores.extent(1);
  std::vector<int> out(batch);
  for (int64_t i = 0; i < batch; ++i) {
    int best = 0;
    for (int64_t k = 1; k < classes; ++k) {
      if (scores.at2(i, k) > scores.at2(i, best)) best = static_cast<int>(k);
    }
    out[i] = best;
  }
  return out;
}

std::vector<int> predict(const ModelSpec& spec, const ParamSet& params, const Tensor& x) {
  return argmax_rows(logits(spec, params, x));
}

namespace {

const char* layer_token(LayerKind kind) {
  switch (kind) {
    case LayerKind::Affine: return "affine";
    case LayerKind::Relu: return "relu";
    case LayerKind::Conv: return "conv";
    case LayerKind::GlobalAvgPool: return "global_avg_pool";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

// %.17g round-trips any float64 exactly.
std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string model_to_string(const ModelSpec& spec, const ParamSet& params) {
  std::ostringstream os;
  os << "dign-model 1\n";
  os << "input_shape";
  for (int64_t e : spec.input_shape) os << " " << e;
  os << "\nclasses " << spec.num_classes << "\n";
  os << "layers " << spec.layers.size() << "\n";
  for (const LayerDesc& l : spec.layers) {
    os << layer_token(l.kind);
    if (l.kind == LayerKind::Affine) os << " " << l.units;
    if (l.kind == LayerKind::Conv) {
      os << " " << l.filters << " " << l.kh << " " << l.kw << " "
         << (l.pad == Padding::Same ? "same" : "valid");
    }
    os << "\n";
  }
  os << "init_seed " << params.init_seed << "\n";
  os << "params " << params.size() << "\n";
  for (const auto& [name, tensor] : params.params) {
    os << name << " " << tensor.rank();
    for (int64_t e : tensor.shape()) os << " " << e;
    os << "\n";
    for (int64_t i = 0; i < tensor.size(); ++i) {
      if (i) os << " ";
      os << fmt_double(tensor[i]);
    }
    os << "\n";
  }
  os << "end\n";
  return os.str();
}

std::pair<ModelSpec, ParamSet> model_from_string(const std::string& text) {
  std::istringstream is(text);
  std::string word;
  int version = 0;
  if (!(is >> word >> version) || word != "dign-model" || version != 1) {
    throw ParseError("model container: bad header");
  }
  ModelSpec spec;
  std::string line;
  std::getline(is, line);  // rest of header line
  if (!std::getline(is, line) || line.rfind("input_shape", 0) != 0) {
    throw ParseError("model container: expected input_shape");
  }
  {
    std::istringstream ls(line.substr(11));
    int64_t e;
    while (ls >> e) spec.input_shape.push_back(e);
  }
  size_t layer_count = 0;
  if (!(is >> word >> spec.num_classes) || word != "classes") {
    throw ParseError("model container: expected classes");
  }
  if (!(is >> word >> layer_count) || word != "layers") {
    throw ParseError("model container: expected layers");
  }
  for (size_t i = 0; i < layer_count; ++i) {
    if (!(is >> word)) throw ParseError("model container: truncated layer list");
    if (word == "affine") {
      int64_t units;
      if (!(is >> units)) throw ParseError("model container: affine units missing");
      spec.layers.push_back(LayerDesc::affine(units));
    } else if (word == "relu") {
      spec.layers.push_back(LayerDesc::relu());
    } else if (word == "conv") {
      int64_t f, kh, kw;
      std::string pad;
      if (!(is >> f >> kh >> kw >> pad)) throw ParseError("model container: conv fields missing");
      spec.layers.push_back(
          LayerDesc::conv(f, kh, kw, pad == "same" ? Padding::Same : Padding::Valid));
    } else if (word == "global_avg_pool") {
      spec.layers.push_back(LayerDesc::global_avg_pool());
    } else if (word == "flatten") {
      spec.layers.push_back(LayerDesc::flatten());
    } else {
      throw ParseError("model container: unknown layer '" + word + "'");
    }
  }
  ParamSet params;
  size_t param_count = 0;
  if (!(is >> word >> params.init_seed) || word != "init_seed") {
    throw ParseError("model container: expected init_seed");
  }
  if (!(is >> word >> param_count) || word != "params") {
    throw ParseError("model container: expected params");
  }
  for (size_t i = 0; i < param_count; ++i) {
    std::string name;
    size_t rank = 0;
    if (!(is >> name >> rank)) throw ParseError("model container: truncated param header");
    Shape shape(rank);
    for (size_t d = 0; d < rank; ++d) {
      if (!(is >> shape[d])) throw ParseError("model container: truncated shape for " + name);
    }
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : data) {
      if (!(is >> v)) throw ParseError("model container: truncated data for " + name);
    }
    params.params.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  if (!(is >> word) || word != "end") throw ParseError("model container: missing end marker");
  spec.validate();
  return {std::move(spec), std::move(params)};
}

void save_model(const ModelSpec& spec, const ParamSet& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open model file for writing: " + path);
  f << model_to_string(spec, params);
  if (!f) throw IoError("failed writing model file: " + path);
}

std::pair<ModelSpec, ParamSet> load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open model file: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return model_from_string(buf.str());
}

}  // namespace dign
