// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Define-by-run reverse-mode tape. Every op appends one node; backprop walks
// the nodes in reverse creation order, which is a valid reverse topological
// order because inputs always exist before their consumers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "tqt/core/kernels.hpp"
#include "tqt/core/tensor.hpp"

namespace tqt {

class Tape;

/// Handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr; }
};

/// Inputs handed to a backward closure.
struct BackwardArgs {
  const Tensor& upstream;
  const std::vector<const Tensor*>& inputs;
  const Tensor& output;
  const std::vector<bool>& needs;  // needs[i]: input i wants a gradient
};

/// Returns one gradient per input; entries not in `needs` may be left empty.
using BackwardFn = std::function<std::vector<Tensor>(const BackwardArgs&)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable or watched leaf.
  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a custom-gradient node. The backward closure is used verbatim;
  /// the forward computation that produced `value` is never differentiated.
  Var custom(const std::vector<Var>& inputs, Tensor value, BackwardFn backward) {
    debug_check_finite(value, "tape op");
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    for (const auto& v : inputs) {
      check_owned(v);
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool has_grad(Var v) const { return nodes_.at(v.id).has_grad; }

  /// Gradient of the last backprop'd loss with respect to v (zeros if v did
  /// not influence the loss).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.has_grad ? n.grad : zeros_like(n.value);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Reverse accumulation from a scalar loss.
  void backprop(Var loss) {
    check_owned(loss);
    if (value(loss).size() != 1) {
      throw ContractError("backprop: loss must be scalar, got shape " +
                          shape_str(value(loss).shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    Node& root = nodes_[loss.id];
    root.grad = Tensor(root.value.shape(), 1.0);
    root.has_grad = true;

    std::vector<const Tensor*> in_values;
    std::vector<bool> needs;
    for (std::size_t k = loss.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (!n.has_grad || !n.requires_grad || !n.backward) continue;
      in_values.clear();
      needs.clear();
      bool any = false;
      for (auto id : n.inputs) {
        in_values.push_back(&nodes_[id].value);
        needs.push_back(nodes_[id].requires_grad);
        any = any || nodes_[id].requires_grad;
      }
      if (!any) continue;
      const BackwardArgs args{n.grad, in_values, n.value, needs};
      std::vector<Tensor> grads = n.backward(args);
      if (grads.size() != n.inputs.size()) {
        throw InternalError("backward closure returned wrong number of gradients");
      }
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        if (!needs[i]) continue;
        Node& in = nodes_[n.inputs[i]];
        Tensor& g = grads[i];
        require_same_shape(g.shape(), in.value.shape(), "backward gradient");
        if (!in.has_grad) {
          in.grad = std::move(g);
          in.has_grad = true;
        } else {
          for (std::size_t e = 0; e < g.size(); ++e) in.grad[e] += g[e];
        }
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }
  void check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace ops {

namespace detail {

inline Tape& tape_of(Var a) {
  if (!a.tape) throw ContractError("unbound variable");
  return *a.tape;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

/// True when b broadcasts against a (same shape or a single element).
inline bool scalar_like(const Tensor& a, const Tensor& b) {
  return b.size() == 1 && a.shape() != b.shape();
}

inline void check_binary(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape() && b.size() != 1) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline Tensor sum_to_scalar(const Tensor& g) {
  double s = 0.0;
  for (double v : g.data()) s += v;
  return Tensor(Shape{1}, std::vector<double>{s});
}

}  // namespace detail

/// Elementwise a + b; b may also be a single element.
inline Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::check_binary(x, y, "add");
  const bool bc = detail::scalar_like(x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[bc ? 0 : i];
  return detail::tape_of(a).custom({a, b}, std::move(out), [bc](const BackwardArgs& g) {
    return std::vector<Tensor>{g.upstream, bc ? detail::sum_to_scalar(g.upstream) : g.upstream};
  });
}

inline Var sub(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::check_binary(x, y, "sub");
  const bool bc = detail::scalar_like(x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[bc ? 0 : i];
  return detail::tape_of(a).custom({a, b}, std::move(out), [bc](const BackwardArgs& g) {
    Tensor neg = detail::map(g.upstream, [](double v) { return -v; });
    return std::vector<Tensor>{g.upstream, bc ? detail::sum_to_scalar(neg) : neg};
  });
}

/// Elementwise a * b; b may also be a single element.
inline Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::check_binary(x, y, "mul");
  const bool bc = detail::scalar_like(x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[bc ? 0 : i];
  return detail::tape_of(a).custom({a, b}, std::move(out), [bc](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    const Tensor& y = *g.inputs[1];
    std::vector<Tensor> r(2);
    if (g.needs[0]) {
      r[0] = Tensor(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) r[0][i] = g.upstream[i] * y[bc ? 0 : i];
    }
    if (g.needs[1]) {
      Tensor gy(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) gy[i] = g.upstream[i] * x[i];
      r[1] = bc ? detail::sum_to_scalar(gy) : std::move(gy);
    }
    return r;
  });
}

/// Elementwise a / b; b may also be a single element.
inline Var div(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  detail::check_binary(x, y, "div");
  const bool bc = detail::scalar_like(x, y);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[bc ? 0 : i];
  return detail::tape_of(a).custom({a, b}, std::move(out), [bc](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    const Tensor& y = *g.inputs[1];
    std::vector<Tensor> r(2);
    if (g.needs[0]) {
      r[0] = Tensor(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) r[0][i] = g.upstream[i] / y[bc ? 0 : i];
    }
    if (g.needs[1]) {
      Tensor gy(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double yi = y[bc ? 0 : i];
        gy[i] = -g.upstream[i] * x[i] / (yi * yi);
      }
      r[1] = bc ? detail::sum_to_scalar(gy) : std::move(gy);
    }
    return r;
  });
}

inline Var mul_scalar(Var a, double c) {
  Tensor out = detail::map(a.value(), [c](double v) { return v * c; });
  return detail::tape_of(a).custom({a}, std::move(out), [c](const BackwardArgs& g) {
    return std::vector<Tensor>{detail::map(g.upstream, [c](double v) { return v * c; })};
  });
}

inline Var exp2(Var a) {
  Tensor out = detail::map(a.value(), [](double v) { return std::exp2(v); });
  return detail::tape_of(a).custom({a}, std::move(out), [](const BackwardArgs& g) {
    Tensor r(g.output.shape());
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] = g.upstream[i] * g.output[i] * std::numbers::ln2;
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

/// clip(a, lo, hi) with derivative 1 on [lo, hi] and 0 outside.
inline Var clip(Var a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clip: lo must not exceed hi");
  Tensor out = detail::map(a.value(), [=](double v) { return std::clamp(v, lo, hi); });
  return detail::tape_of(a).custom({a}, std::move(out), [=](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    Tensor r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      r[i] = (x[i] >= lo && x[i] <= hi) ? g.upstream[i] : 0.0;
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

/// Forward value, no gradient.
inline Var stop_gradient(Var a) { return detail::tape_of(a).constant(a.value()); }

/// Forward f(a), backward identity (straight-through estimator).
inline Var straight_through(Var a, const std::function<double(double)>& f) {
  Tensor out = detail::map(a.value(), f);
  return detail::tape_of(a).custom({a}, std::move(out), [](const BackwardArgs& g) {
    return std::vector<Tensor>{g.upstream};
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::tape_of(a).custom({a}, std::move(out), [](const BackwardArgs& g) {
    return std::vector<Tensor>{g.upstream.reshaped(g.inputs[0]->shape())};
  });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::tape_of(a).custom({a}, Tensor::scalar(s), [](const BackwardArgs& g) {
    return std::vector<Tensor>{Tensor(g.inputs[0]->shape(), g.upstream[0])};
  });
}

inline Var relu(Var a) {
  Tensor out = detail::map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return detail::tape_of(a).custom({a}, std::move(out), [](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    Tensor r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] > 0.0 ? g.upstream[i] : 0.0;
    return std::vector<Tensor>{std::move(r)};
  });
}

inline Var relu6(Var a) {
  Tensor out = detail::map(a.value(), [](double v) { return std::clamp(v, 0.0, 6.0); });
  return detail::tape_of(a).custom({a}, std::move(out), [](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    Tensor r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      r[i] = (x[i] > 0.0 && x[i] < 6.0) ? g.upstream[i] : 0.0;
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

inline Var leaky_relu(Var a, double alpha) {
  Tensor out = detail::map(a.value(), [alpha](double v) { return v > 0.0 ? v : alpha * v; });
  return detail::tape_of(a).custom({a}, std::move(out), [alpha](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    Tensor r(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      r[i] = x[i] > 0.0 ? g.upstream[i] : alpha * g.upstream[i];
    }
    return std::vector<Tensor>{std::move(r)};
  });
}

/// Elementwise max; ties send the gradient to the first operand.
inline Var maximum(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  require_same_shape(x.shape(), y.shape(), "maximum");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], y[i]);
  return detail::tape_of(a).custom({a, b}, std::move(out), [](const BackwardArgs& g) {
    const Tensor& x = *g.inputs[0];
    const Tensor& y = *g.inputs[1];
    Tensor ga(x.shape(), 0.0), gb(x.shape(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) (x[i] >= y[i] ? ga : gb)[i] = g.upstream[i];
    return std::vector<Tensor>{std::move(ga), std::move(gb)};
  });
}

/// x[N, ...] flattened to [N, K], times w[K, M].
inline Var matmul(Var x, Var w) {
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw DimensionError("matmul: input needs a batch axis");
  const std::size_t n = xv.dim(0);
  const Tensor x2 = xv.reshaped(Shape{n, xv.size() / n});
  Tensor out = matmul_kernel(x2, w.value());
  return detail::tape_of(x).custom({x, w}, std::move(out), [](const BackwardArgs& g) {
    const Tensor& xv = *g.inputs[0];
    const Tensor& wv = *g.inputs[1];
    const std::size_t n = xv.dim(0), k = wv.dim(0), m = wv.dim(1);
    std::vector<Tensor> r(2);
    if (g.needs[0]) {
      Tensor gx(Shape{n, k}, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g.upstream[i * m + j] * wv[p * m + j];
          gx[i * k + p] = acc;
        }
      }
      r[0] = gx.reshaped(xv.shape());
    }
    if (g.needs[1]) {
      Tensor gw(wv.shape(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double xi = xv[i * k + p];
          for (std::size_t j = 0; j < m; ++j) gw[p * m + j] += xi * g.upstream[i * m + j];
        }
      }
      r[1] = std::move(gw);
    }
    return r;
  });
}

inline Var conv2d(Var x, Var w, std::size_t stride, Padding pad) {
  Tensor out = conv2d_kernel(x.value(), w.value(), stride, pad);
  return detail::tape_of(x).custom({x, w}, std::move(out), [=](const BackwardArgs& g) {
    std::vector<Tensor> r(2);
    conv2d_backward(*g.inputs[0], *g.inputs[1], g.upstream, stride, pad,
                    g.needs[0] ? &r[0] : nullptr, g.needs[1] ? &r[1] : nullptr);
    return r;
  });
}

inline Var depthwise_conv2d(Var x, Var w, std::size_t stride, Padding pad) {
  Tensor out = depthwise_conv2d_kernel(x.value(), w.value(), stride, pad);
  return detail::tape_of(x).custom({x, w}, std::move(out), [=](const BackwardArgs& g) {
    std::vector<Tensor> r(2);
    depthwise_conv2d_backward(*g.inputs[0], *g.inputs[1], g.upstream, stride, pad,
                              g.needs[0] ? &r[0] : nullptr, g.needs[1] ? &r[1] : nullptr);
    return r;
  });
}

/// x[..., C] + b[C].
inline Var bias_add(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  const std::size_t c = bv.size();
  if (bv.rank() != 1 || xv.shape().back() != c) {
    throw DimensionError("bias_add: bias " + shape_str(bv.shape()) + " vs input " +
                         shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + bv[i % c];
  return detail::tape_of(x).custom({x, b}, std::move(out), [c](const BackwardArgs& g) {
    Tensor gb(Shape{c}, 0.0);
    for (std::size_t i = 0; i < g.upstream.size(); ++i) gb[i % c] += g.upstream[i];
    return std::vector<Tensor>{g.upstream, std::move(gb)};
  });
}

/// Inference-statistics batch norm over the last axis.
inline Var batch_norm(Var x, Var gamma, Var beta, Var mean, Var var, double eps) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.shape().back();
  for (Var p : {gamma, beta, mean, var}) {
    if (p.value().size() != c) throw DimensionError("batch_norm: parameter size mismatch");
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::size_t ch = i % c;
    const double inv = 1.0 / std::sqrt(var.value()[ch] + eps);
    out[i] = gamma.value()[ch] * (xv[i] - mean.value()[ch]) * inv + beta.value()[ch];
  }
  return detail::tape_of(x).custom(
      {x, gamma, beta, mean, var}, std::move(out), [c, eps](const BackwardArgs& g) {
        const Tensor& xv = *g.inputs[0];
        const Tensor& ga = *g.inputs[1];
        const Tensor& mu = *g.inputs[3];
        const Tensor& va = *g.inputs[4];
        Tensor gx(xv.shape()), gg(Shape{c}, 0.0), gbeta(Shape{c}, 0.0), gmu(Shape{c}, 0.0),
            gvar(Shape{c}, 0.0);
        for (std::size_t i = 0; i < xv.size(); ++i) {
          const std::size_t ch = i % c;
          const double inv = 1.0 / std::sqrt(va[ch] + eps);
          const double u = g.upstream[i];
          const double xc = xv[i] - mu[ch];
          gx[i] = u * ga[ch] * inv;
          gg[ch] += u * xc * inv;
          gbeta[ch] += u;
          gmu[ch] -= u * ga[ch] * inv;
          gvar[ch] += u * ga[ch] * xc * -0.5 * inv * inv * inv;
        }
        return std::vector<Tensor>{std::move(gx), std::move(gg), std::move(gbeta),
                                   std::move(gmu), std::move(gvar)};
      });
}

/// Window average that always divides by k*k (padding counts as zero).
inline Var avg_pool(Var x, std::size_t k, std::size_t stride, Padding pad) {
  const auto geo = Window2d::make(x.value().shape(), k, k, stride, pad);
  Tensor w(Shape{k, k, geo.channels, 1}, 1.0 / static_cast<double>(k * k));
  Tensor out = depthwise_conv2d_kernel(x.value(), w, stride, pad);
  return detail::tape_of(x).custom({x}, std::move(out), [=](const BackwardArgs& g) {
    std::vector<Tensor> r(1);
    depthwise_conv2d_backward(*g.inputs[0], w, g.upstream, stride, pad, &r[0], nullptr);
    return r;
  });
}

/// Concatenation along the last axis.
inline Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].value().shape();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin())) {
      throw DimensionError("concat: incompatible shapes " + shape_str(s0) + " and " +
                           shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Shape os = s0;
  os.back() = total;
  Tensor out(os);
  const std::size_t rows = out.size() / total;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(&v[r * widths[k]], widths[k], &out[r * total + off]);
    }
    off += widths[k];
  }
  return detail::tape_of(parts[0]).custom(parts, std::move(out), [widths, total](const BackwardArgs& g) {
    std::vector<Tensor> r(widths.size());
    const std::size_t rows = g.upstream.size() / total;
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (g.needs[k]) {
        r[k] = Tensor(g.inputs[k]->shape());
        for (std::size_t row = 0; row < rows; ++row) {
          std::copy_n(&g.upstream[row * total + off], widths[k], &r[k][row * widths[k]]);
        }
      }
      off += widths[k];
    }
    return r;
  });
}

/// Mean softmax cross-entropy of logits [N, K] against integer labels.
inline Var softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() != 2 || z.dim(0) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = z.dim(0), k = z.dim(1);
  Tensor prob(z.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("softmax_cross_entropy: label out of range");
    }
    const double* row = &z[i * k];
    const double mx = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(row[j] - mx) / denom;
    loss += std::log(denom) - (row[labels[i]] - mx);
  }
  loss /= static_cast<double>(n);
  return detail::tape_of(logits).custom(
      {logits}, Tensor::scalar(loss), [prob, labels, n, k](const BackwardArgs& g) {
        Tensor r = prob;
        for (std::size_t i = 0; i < n; ++i) r[i * k + labels[i]] -= 1.0;
        const double c = g.upstream[0] / static_cast<double>(n);
        for (auto& v : r.data()) v *= c;
        return std::vector<Tensor>{std::move(r)};
      });
}

}  // namespace ops

}  // namespace tqt
