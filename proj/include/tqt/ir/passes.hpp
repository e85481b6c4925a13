// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Function-preserving graph rewrites. Each pass takes a graph by value and
// returns the rewritten graph.

#include <cmath>
#include <string>
#include <vector>

#include "tqt/ir/executor.hpp"
#include "tqt/ir/graph.hpp"

namespace tqt::ir {

inline constexpr double kBatchNormEps = 1e-5;

/// Drops const nodes nobody reads.
inline void prune_dead_consts(Graph& g) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<std::string> dead;
    for (const auto& [id, n] : g.nodes()) {
      if (n.op == OpKind::kConst && g.consumers(id).empty() && !g.is_output(id)) dead.push_back(id);
    }
    for (const auto& id : dead) {
      g.remove(id);
      changed = true;
    }
  }
}

namespace detail {

inline const Node& require_const(const Graph& g, const std::string& id, const std::string& who) {
  const Node& n = g.node(id);
  if (n.op != OpKind::kConst) {
    throw TransformError("node '" + who + "': input '" + id + "' must be a constant");
  }
  return n;
}

inline void require_sole_consumer(const Graph& g, const std::string& id, const std::string& who) {
  if (g.consumers(id).size() != 1 || g.is_output(id)) {
    throw TransformError("node '" + who + "': '" + id + "' has other consumers, cannot fold");
  }
}

}  // namespace detail

/// Folds inference batch norm into the preceding conv, depthwise conv or
/// matmul (optionally through its bias_add).
inline Graph fold_batchnorm(Graph g) {
  for (const auto& id : g.topo_order()) {
    if (!g.has(id) || g.node(id).op != OpKind::kBatchNorm) continue;
    const Node bn = g.node(id);
    const Node& pred = g.node(bn.inputs[0]);
    std::string layer_id = pred.id, bias_add_id;
    if (pred.op == OpKind::kBiasAdd) {
      bias_add_id = pred.id;
      layer_id = pred.inputs[0];
    }
    const Node& layer = g.node(layer_id);
    if (!is_compute(layer.op)) {
      throw TransformError("node '" + id + "': batch_norm must follow conv2d, depthwise_conv2d or "
                           "matmul, found " + op_name(g.node(bn.inputs[0]).op));
    }
    detail::require_sole_consumer(g, layer_id, id);
    if (!bias_add_id.empty()) detail::require_sole_consumer(g, bias_add_id, id);
    const std::string w_id = layer.inputs[1];
    detail::require_const(g, w_id, id);
    detail::require_sole_consumer(g, w_id, id);
    const Tensor& gamma = detail::require_const(g, bn.inputs[1], id).value;
    const Tensor& beta = detail::require_const(g, bn.inputs[2], id).value;
    const Tensor& mean = detail::require_const(g, bn.inputs[3], id).value;
    const Tensor& var = detail::require_const(g, bn.inputs[4], id).value;
    const double eps = bn.attrs.get_double("eps", kBatchNormEps);

    Tensor& w = g.node(w_id).value;
    const std::size_t channels =
        layer.op == OpKind::kDepthwiseConv2d ? w.dim(2) : w.shape().back();
    if (gamma.size() != channels || beta.size() != channels || mean.size() != channels ||
        var.size() != channels) {
      throw TransformError("node '" + id + "': batch_norm has " + std::to_string(gamma.size()) +
                           " channels, layer has " + std::to_string(channels));
    }
    std::vector<double> scale(channels);
    for (std::size_t c = 0; c < channels; ++c) scale[c] = gamma[c] / std::sqrt(var[c] + eps);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] *= scale[i % channels];

    Tensor bias(Shape{channels}, 0.0);
    if (!bias_add_id.empty()) {
      const std::string b_id = g.node(bias_add_id).inputs[1];
      detail::require_const(g, b_id, id);
      detail::require_sole_consumer(g, b_id, id);
      bias = g.node(b_id).value;
    }
    for (std::size_t c = 0; c < channels; ++c) bias[c] = beta[c] + (bias[c] - mean[c]) * scale[c];

    if (!bias_add_id.empty()) {
      g.node(g.node(bias_add_id).inputs[1]).value = bias;
      g.remove(id);
      g.replace_uses(id, bias_add_id);
    } else {
      const std::string b_id = g.unique_id(id + ".bias");
      g.add_const(b_id, bias);
      g.remove(id);
      g.add(id, OpKind::kBiasAdd, {layer_id, b_id});
    }
  }
  prune_dead_consts(g);
  g.validate();
  return g;
}

/// concat(concat(a, b), c) -> concat(a, b, c) when the inner concat has no
/// other reader.
inline Graph collapse_concat(Graph g) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& id : g.topo_order()) {
      if (g.node(id).op != OpKind::kConcat) continue;
      std::vector<std::string> flat;
      bool local = false;
      for (const auto& in : g.node(id).inputs) {
        const Node& src = g.node(in);
        if (src.op == OpKind::kConcat && g.consumers(in).size() == 1 && !g.is_output(in) &&
            std::count(g.node(id).inputs.begin(), g.node(id).inputs.end(), in) == 1) {
          flat.insert(flat.end(), src.inputs.begin(), src.inputs.end());
          g.remove(in);
          local = true;
        } else {
          flat.push_back(in);
        }
      }
      if (local) {
        g.node(id).inputs = flat;
        changed = true;
        break;
      }
    }
  }
  g.validate();
  return g;
}

/// Removes identity nodes, wiring readers to the identity's input.
inline Graph splice_identity(Graph g) {
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    if (n.op != OpKind::kIdentity) continue;
    const std::string src = n.inputs[0];
    g.remove(id);
    g.replace_uses(id, src);
  }
  g.validate();
  return g;
}

/// avg_pool k x k -> depthwise conv with constant weights 1/k^2.
inline Graph avgpool_to_dwconv(Graph g) {
  bool any = false;
  for (const auto& [id, n] : g.nodes()) any = any || n.op == OpKind::kAvgPool;
  if (!any) return g;
  const auto shapes = infer_shapes(g);
  for (const auto& id : g.topo_order()) {
    const Node n = g.node(id);
    if (n.op != OpKind::kAvgPool) continue;
    const auto k = static_cast<std::size_t>(n.attrs.get_int("k"));
    const std::size_t channels = shapes.at(n.inputs[0]).back();
    const std::string r_id = g.unique_id(id + ".r");
    g.add_const(r_id, Tensor(Shape{k, k, channels, 1}, 1.0 / static_cast<double>(k * k)));
    Attrs a;
    a.set("stride", n.attrs.get_int("stride", static_cast<std::int64_t>(k)));
    a.set("pad", n.attrs.get_string("pad", "valid").c_str());
    a.set("from_avgpool", true);
    g.remove(id);
    g.add(id, OpKind::kDepthwiseConv2d, {n.inputs[0], r_id}, a);
  }
  g.validate();
  return g;
}

/// All real-domain optimizations in their usual order.
inline Graph optimize(Graph g) {
  g = splice_identity(std::move(g));
  g = fold_batchnorm(std::move(g));
  g = collapse_concat(std::move(g));
  g = avgpool_to_dwconv(std::move(g));
  return g;
}

}  // namespace tqt::ir
