#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dign/tensor.hpp"

namespace dign {

enum class Padding { Same, Valid };

// Handle to a node on a Tape. Valid only for the tape that produced it.
struct Value {
  int id = -1;
};

// Tape-based reverse-mode differentiation over a fixed operation set.
// Nodes are appended in topological order by construction; a backward pass
// from a scalar root accumulates exact gradients for every leaf.
// A Tape is single-owner; do not mutate it from two execution contexts.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves are differentiation targets (parameters and marked inputs).
  Value leaf(Tensor v);

  // out[i,j] = sum_k x[i,k] * w[k,j] + b[j]
  Value affine(Value x, Value w, Value b);
  Value relu(Value x);
  // Cross-correlation, stride 1, odd kernels. x:[B,C,H,W], k:[F,C,kh,kw].
  Value conv2d(Value x, Value k, Padding pad);
  Value global_avg_pool(Value x);  // [B,C,H,W] -> [B,C]
  Value flatten(Value x);          // [B,...] -> [B,prod(rest)]
  Value log_softmax(Value z);      // rows of exp sum to 1
  Value add(Value a, Value b);     // same shape only
  Value mul(Value a, Value b);     // elementwise, same shape
  Value scale(Value a, double c);
  Value sum(Value a);                                // -> scalar
  Value nll(Value log_probs, std::vector<int> labels);  // mean -log p[i, y_i]
  Value kl(Value log_p, Value log_q);                   // mean_i sum_c e^lp (lp - lq)
  Value pick(Value a, int64_t flat_index);              // -> scalar

  const Tensor& value(Value v) const { return nodes_[v.id].value; }
  // Gradient of the last backward root; valid until the next backward call.
  const Tensor& grad(Value v) const { return grads_[v.id]; }

  void backward(Value root);

  size_t num_nodes() const { return nodes_.size(); }

 private:
  enum class Op {
    Leaf,
    Affine,
    Relu,
    Conv2d,
    GlobalAvgPool,
    Flatten,
    LogSoftmax,
    Add,
    Mul,
    Scale,
    Sum,
    Nll,
    Kl,
    Pick,
  };

  struct Node {
    Op op;
    int in0 = -1, in1 = -1, in2 = -1;
    Tensor value;
    double factor = 0.0;          // Scale
    int64_t index = 0;            // Pick
    Padding pad = Padding::Same;  // Conv2d
    std::vector<int> labels;      // Nll
  };

  Value push(Node n);
  const Tensor& val(int id) const { return nodes_[id].value; }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Max relative gradient error of a tensor-to-scalar map against central
// finite differences at step h. `build` must construct the same graph for
// every call; coordinate errors are normalized by the gradient's max norm.
using ScalarGraphFn = std::function<Value(Tape&, Value)>;
double grad_check(const ScalarGraphFn& build, const Tensor& point, double h = 1e-5);

}  // namespace dign
