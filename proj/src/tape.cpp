#include "dign/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dign {

Value Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::leaf(Tensor v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  return push(std::move(n));
}

Value Tape::affine(Value x, Value w, Value b) {
  const Tensor& xv = val(x.id);
  const Tensor& wv = val(w.id);
  const Tensor& bv = val(b.id);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    throw DimError("affine: expected x[B,d_in], w[d_in,d_out], b[d_out], got " +
                   xv.shape_str() + ", " + wv.shape_str() + ", " + bv.shape_str());
  }
  const int64_t batch = xv.extent(0), d_in = xv.extent(1);
  const int64_t d_out = wv.extent(1);
  if (wv.extent(0) != d_in || bv.extent(0) != d_out) {
    throw DimError("affine: shape mismatch x" + xv.shape_str() + " w" + wv.shape_str() +
                   " b" + bv.shape_str());
  }
  Tensor out({batch, d_out});
  for (int64_t i = 0; i < batch; ++i) {
    const double* xi = xv.data() + i * d_in;
    double* oi = out.data() + i * d_out;
    for (int64_t j = 0; j < d_out; ++j) oi[j] = bv[j];
    for (int64_t k = 0; k < d_in; ++k) {
      const double xk = xi[k];
      const double* wk = wv.data() + k * d_out;
      for (int64_t j = 0; j < d_out; ++j) oi[j] += xk * wk[j];
    }
  }
  Node n;
  n.op = Op::Affine;
  n.in0 = x.id;
  n.in1 = w.id;
  n.in2 = b.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::relu(Value x) {
  const Tensor& xv = val(x.id);
  Tensor out(xv.shape());
  for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Node n;
  n.op = Op::Relu;
  n.in0 = x.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::conv2d(Value x, Value k, Padding pad) {
  const Tensor& xv = val(x.id);
  const Tensor& kv = val(k.id);
  if (xv.rank() != 4 || kv.rank() != 4) {
    throw DimError("conv2d: expected x[B,C,H,W], k[F,C,kh,kw], got " + xv.shape_str() +
                   ", " + kv.shape_str());
  }
  const int64_t batch = xv.extent(0), chans = xv.extent(1);
  const int64_t height = xv.extent(2), width = xv.extent(3);
  const int64_t filters = kv.extent(0), kh = kv.extent(2), kw = kv.extent(3);
  if (kv.extent(1) != chans) {
    throw DimError("conv2d: channel mismatch x" + xv.shape_str() + " k" + kv.shape_str());
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw DimError("conv2d: kernel extents must be odd, got " + kv.shape_str());
  }
  int64_t out_h, out_w, pad_h, pad_w;
  if (pad == Padding::Same) {
    out_h = height;
    out_w = width;
    pad_h = (kh - 1) / 2;
    pad_w = (kw - 1) / 2;
  } else {
    if (kh > height || kw > width) {
      throw DimError("conv2d: kernel " + kv.shape_str() + " larger than input " +
                     xv.shape_str() + " under valid padding");
    }
    out_h = height - kh + 1;
    out_w = width - kw + 1;
    pad_h = 0;
    pad_w = 0;
  }
  Tensor out({batch, filters, out_h, out_w});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t f = 0; f < filters; ++f) {
      for (int64_t oh = 0; oh < out_h; ++oh) {
        for (int64_t ow = 0; ow < out_w; ++ow) {
          double acc = 0.0;
          for (int64_t c = 0; c < chans; ++c) {
            for (int64_t i = 0; i < kh; ++i) {
              const int64_t ih = oh + i - pad_h;
              if (ih < 0 || ih >= height) continue;
              for (int64_t j = 0; j < kw; ++j) {
                const int64_t iw = ow + j - pad_w;
                if (iw < 0 || iw >= width) continue;
                acc += xv.at4(b, c, ih, iw) * kv.at4(f, c, i, j);
              }
            }
          }
          out.at4(b, f, oh, ow) = acc;
        }
      }
    }
  }
  Node n;
  n.op = Op::Conv2d;
  n.in0 = x.id;
  n.in1 = k.id;
  n.pad = pad;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::global_avg_pool(Value x) {
  const Tensor& xv = val(x.id);
  if (xv.rank() != 4) {
    throw DimError("global_avg_pool: expected x[B,C,H,W], got " + xv.shape_str());
  }
  const int64_t batch = xv.extent(0), chans = xv.extent(1);
  const int64_t hw = xv.extent(2) * xv.extent(3);
  Tensor out({batch, chans});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < chans; ++c) {
      const double* p = xv.data() + (b * chans + c) * hw;
      double acc = 0.0;
      for (int64_t i = 0; i < hw; ++i) acc += p[i];
      out.at2(b, c) = acc / static_cast<double>(hw);
    }
  }
  Node n;
  n.op = Op::GlobalAvgPool;
  n.in0 = x.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::flatten(Value x) {
  const Tensor& xv = val(x.id);
  if (xv.rank() < 1) throw DimError("flatten: rank-0 input");
  const int64_t batch = xv.extent(0);
  Node n;
  n.op = Op::Flatten;
  n.in0 = x.id;
  n.value = xv.reshaped({batch, xv.size() / batch});
  return push(std::move(n));
}

Value Tape::log_softmax(Value z) {
  const Tensor& zv = val(z.id);
  if (zv.rank() != 2 || zv.extent(1) < 2) {
    throw DimError("log_softmax: expected z[B,K] with K >= 2, got " + zv.shape_str());
  }
  const int64_t batch = zv.extent(0), classes = zv.extent(1);
  Tensor out(zv.shape());
  for (int64_t i = 0; i < batch; ++i) {
    const double* zi = zv.data() + i * classes;
    double* oi = out.data() + i * classes;
    double m = zi[0];
    for (int64_t k = 1; k < classes; ++k) m = std::max(m, zi[k]);
    double lse = 0.0;
    for (int64_t k = 0; k < classes; ++k) lse += std::exp(zi[k] - m);
    lse = std::log(lse);
    for (int64_t k = 0; k < classes; ++k) oi[k] = zi[k] - m - lse;
  }
  Node n;
  n.op = Op::LogSoftmax;
  n.in0 = z.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::add(Value a, Value b) {
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  require_same_shape(av, bv, "add");
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  Node n;
  n.op = Op::Add;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::mul(Value a, Value b) {
  const Tensor& av = val(a.id);
  const Tensor& bv = val(b.id);
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  Node n;
  n.op = Op::Mul;
  n.in0 = a.id;
  n.in1 = b.id;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::scale(Value a, double c) {
  const Tensor& av = val(a.id);
  Tensor out(av.shape());
  for (int64_t i = 0; i < av.size(); ++i) out[i] = c * av[i];
  Node n;
  n.op = Op::Scale;
  n.in0 = a.id;
  n.factor = c;
  n.value = std::move(out);
  return push(std::move(n));
}

Value Tape::sum(Value a) {
  const Tensor& av = val(a.id);
  double acc = 0.0;
  for (int64_t i = 0; i < av.size(); ++i) acc += av[i];
  Node n;
  n.op = Op::Sum;
  n.in0 = a.id;
  n.value = Tensor::scalar(acc);
  return push(std::move(n));
}

Value Tape::nll(Value log_probs, std::vector<int> labels) {
  const Tensor& lp = val(log_probs.id);
  if (lp.rank() != 2) throw DimError("nll: expected log_probs[B,K], got " + lp.shape_str());
  const int64_t batch = lp.extent(0), classes = lp.extent(1);
  if (static_cast<int64_t>(labels.size()) != batch) {
    throw DimError("nll: " + std::to_string(labels.size()) + " labels for batch of " +
                   std::to_string(batch));
  }
  double acc = 0.0;
  for (int64_t i = 0; i < batch; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) {
      throw ValidationError("nll: label " + std::to_string(y) + " at index " +
                            std::to_string(i) + " outside [0," + std::to_string(classes) +
                            ")");
    }
    acc -= lp.at2(i, y);
  }
  Node n;
  n.op = Op::Nll;
  n.in0 = log_probs.id;
  n.labels = std::move(labels);
  n.value = Tensor::scalar(acc / static_cast<double>(batch));
  return push(std::move(n));
}

Value Tape::kl(Value log_p, Value log_q) {
  const Tensor& lp = val(log_p.id);
  const Tensor& lq = val(log_q.id);
  require_same_shape(lp, lq, "kl");
  if (lp.rank() != 2) throw DimError("kl: expected [B,K] rows, got " + lp.shape_str());
  const int64_t batch = lp.extent(0), classes = lp.extent(1);
  double acc = 0.0;
  for (int64_t i = 0; i < batch; ++i) {
    for (int64_t c = 0; c < classes; ++c) {
      acc += std::exp(lp.at2(i, c)) * (lp.at2(i, c) - lq.at2(i, c));
    }
  }
  Node n;
  n.op = Op::Kl;
  n.in0 = log_p.id;
  n.in1 = log_q.id;
  n.value = Tensor::scalar(acc / static_cast<double>(batch));
  return push(std::move(n));
}

Value Tape::pick(Value a, int64_t flat_index) {
  const Tensor& av = val(a.id);
  if (flat_index < 0 || flat_index >= av.size()) {
    throw DimError("pick: index " + std::to_string(flat_index) + " outside tensor of " +
                   std::to_string(av.size()) + " elements");
  }
  Node n;
  n.op = Op::Pick;
  n.in0 = a.id;
  n.index = flat_index;
  n.value = Tensor::scalar(av[flat_index]);
  return push(std::move(n));
}

void Tape::backward(Value root) {
  if (root.id < 0 || root.id >= static_cast<int>(nodes_.size())) {
    throw ContractError("backward: root is not a node of this tape");
  }
  if (nodes_[root.id].value.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " +
                        nodes_[root.id].value.shape_str());
  }
  grads_.assign(nodes_.size(), Tensor());
  for (size_t i = 0; i < nodes_.size(); ++i) grads_[i] = Tensor(nodes_[i].value.shape());
  grads_[root.id][0] = 1.0;

  for (int id = root.id; id >= 0; --id) {
    const Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Affine: {
        const Tensor& xv = val(n.in0);
        const Tensor& wv = val(n.in1);
        Tensor& gx = grads_[n.in0];
        Tensor& gw = grads_[n.in1];
        Tensor& gb = grads_[n.in2];
        const int64_t batch = xv.extent(0), d_in = xv.extent(1), d_out = wv.extent(1);
        for (int64_t i = 0; i < batch; ++i) {
          const double* gi = g.data() + i * d_out;
          const double* xi = xv.data() + i * d_in;
          for (int64_t j = 0; j < d_out; ++j) gb[j] += gi[j];
          for (int64_t k = 0; k < d_in; ++k) {
            const double* wk = wv.data() + k * d_out;
            double* gwk = gw.data() + k * d_out;
            double acc = 0.0;
            const double xk = xi[k];
            for (int64_t j = 0; j < d_out; ++j) {
              acc += gi[j] * wk[j];
              gwk[j] += xk * gi[j];
            }
            gx.data()[i * d_in + k] += acc;
          }
        }
        break;
      }
      case Op::Relu: {
        const Tensor& xv = val(n.in0);
        Tensor& gx = grads_[n.in0];
        // Subgradient at exactly zero is zero.
        for (int64_t i = 0; i < xv.size(); ++i) {
          if (xv[i] > 0.0) gx[i] += g[i];
        }
        break;
      }
      case Op::Conv2d: {
        const Tensor& xv = val(n.in0);
        const Tensor& kv = val(n.in1);
        Tensor& gx = grads_[n.in0];
        Tensor& gk = grads_[n.in1];
        const int64_t batch = xv.extent(0), chans = xv.extent(1);
        const int64_t height = xv.extent(2), width = xv.extent(3);
        const int64_t filters = kv.extent(0), kh = kv.extent(2), kw = kv.extent(3);
        const int64_t out_h = n.value.extent(2), out_w = n.value.extent(3);
        const int64_t pad_h = n.pad == Padding::Same ? (kh - 1) / 2 : 0;
        const int64_t pad_w = n.pad == Padding::Same ? (kw - 1) / 2 : 0;
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t f = 0; f < filters; ++f) {
            for (int64_t oh = 0; oh < out_h; ++oh) {
              for (int64_t ow = 0; ow < out_w; ++ow) {
                const double go = g.at4(b, f, oh, ow);
                if (go == 0.0) continue;
                for (int64_t c = 0; c < chans; ++c) {
                  for (int64_t i = 0; i < kh; ++i) {
                    const int64_t ih = oh + i - pad_h;
                    if (ih < 0 || ih >= height) continue;
                    for (int64_t j = 0; j < kw; ++j) {
                      const int64_t iw = ow + j - pad_w;
                      if (iw < 0 || iw >= width) continue;
                      gx.at4(b, c, ih, iw) += go * kv.at4(f, c, i, j);
                      gk.at4(f, c, i, j) += go * xv.at4(b, c, ih, iw);
                    }
                  }
                }
              }
            }
          }
        }
        break;
      }
      case Op::GlobalAvgPool: {
        const Tensor& xv = val(n.in0);
        Tensor& gx = grads_[n.in0];
        const int64_t batch = xv.extent(0), chans = xv.extent(1);
        const int64_t hw = xv.extent(2) * xv.extent(3);
        const double inv = 1.0 / static_cast<double>(hw);
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t c = 0; c < chans; ++c) {
            const double go = g.at2(b, c) * inv;
            double* p = gx.data() + (b * chans + c) * hw;
            for (int64_t i = 0; i < hw; ++i) p[i] += go;
          }
        }
        break;
      }
      case Op::Flatten: {
        Tensor& gx = grads_[n.in0];
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        break;
      }
      case Op::LogSoftmax: {
        Tensor& gz = grads_[n.in0];
        const Tensor& out = n.value;
        const int64_t batch = out.extent(0), classes = out.extent(1);
        for (int64_t i = 0; i < batch; ++i) {
          double gsum = 0.0;
          for (int64_t k = 0; k < classes; ++k) gsum += g.at2(i, k);
          for (int64_t k = 0; k < classes; ++k) {
            gz.at2(i, k) += g.at2(i, k) - std::exp(out.at2(i, k)) * gsum;
          }
        }
        break;
      }
      case Op::Add: {
        Tensor& ga = grads_[n.in0];
        Tensor& gb = grads_[n.in1];
        for (int64_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& av = val(n.in0);
        const Tensor& bv = val(n.in1);
        Tensor& ga = grads_[n.in0];
        Tensor& gb = grads_[n.in1];
        for (int64_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = grads_[n.in0];
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += n.factor * g[i];
        break;
      }
      case Op::Sum: {
        Tensor& ga = grads_[n.in0];
        const double go = g[0];
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += go;
        break;
      }
      case Op::Nll: {
        Tensor& glp = grads_[n.in0];
        const int64_t batch = val(n.in0).extent(0);
        const double go = g[0] / static_cast<double>(batch);
        for (int64_t i = 0; i < batch; ++i) glp.at2(i, n.labels[i]) -= go;
        break;
      }
      case Op::Kl: {
        const Tensor& lp = val(n.in0);
        const Tensor& lq = val(n.in1);
        Tensor& glp = grads_[n.in0];
        Tensor& glq = grads_[n.in1];
        const int64_t batch = lp.extent(0), classes = lp.extent(1);
        const double go = g[0] / static_cast<double>(batch);
        for (int64_t i = 0; i < batch; ++i) {
          for (int64_t c = 0; c < classes; ++c) {
            const double p = std::exp(lp.at2(i, c));
            const double diff = lp.at2(i, c) - lq.at2(i, c);
            glp.at2(i, c) += go * p * (diff + 1.0);
            glq.at2(i, c) -= go * p;
          }
        }
        break;
      }
      case Op::Pick: {
        grads_[n.in0][n.index] += g[0];
        break;
      }
    }
  }
}

double grad_check(const ScalarGraphFn& build, const Tensor& point, double h) {
  if (h <= 0.0) throw ValidationError("grad_check: step must be positive");
  Tape tape;
  Value x = tape.leaf(point);
  Value root = build(tape, x);
  tape.backward(root);
  const Tensor analytic = tape.grad(x);

  Tensor fd(point.shape());
  Tensor probe = point;
  for (int64_t i = 0; i < point.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    Tape tp;
    const double fp = tp.value(build(tp, tp.leaf(probe)))[0];
    probe[i] = orig - h;
    Tape tm;
    const double fm = tm.value(build(tm, tm.leaf(probe)))[0];
    probe[i] = orig;
    fd[i] = (fp - fm) / (2.0 * h);
  }

  double scale = 0.0;
  for (int64_t i = 0; i < point.size(); ++i) {
    scale = std::max(scale, std::max(std::fabs(analytic[i]), std::fabs(fd[i])));
  }
  scale = std::max(scale, 1e-12);
  double worst = 0.0;
  for (int64_t i = 0; i < point.size(); ++i) {
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / scale);
  }
  return worst;
}

}  // namespace dign
