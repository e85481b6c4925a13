// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <set>
#include <string>

#include "tqt/core/tape.hpp"
#include "tqt/ir/graph.hpp"
#include "tqt/quant/quantizer_op.hpp"

namespace tqt::ir {

struct RunOptions {
  /// Honour quantize nodes; when false they pass values through.
  bool quantize = true;
  /// When non-null, only these groups quantize; the rest pass through.
  const std::set<std::string>* active_groups = nullptr;
  /// Const ids recorded as trainable leaves.
  std::set<std::string> trainable_consts;
  bool train_thresholds = false;
  /// Compose quantizers from primitives instead of the fused node.
  bool unfused_quantizers = false;
};

struct RunResult {
  std::map<std::string, Var> values;
  std::map<std::string, Var> groups;  // one log2_t leaf per group

  const Tensor& value(const std::string& id) const { return values.at(id).value(); }
};

inline Padding pad_attr(const Node& n, const char* dflt) {
  return parse_padding(n.attrs.get_string("pad", dflt));
}

inline std::size_t stride_attr(const Node& n, std::int64_t dflt = 1) {
  const auto s = n.attrs.get_int("stride", dflt);
  if (s < 1) throw ContractError("node '" + n.id + "': stride must be >= 1");
  return static_cast<std::size_t>(s);
}

/// Records the whole graph on `tape`. Feeds map input ids to batched
/// tensors [N, ...].
inline RunResult run_graph(const Graph& g, Tape& tape, const std::map<std::string, Tensor>& feeds,
                           const RunOptions& opt = {}) {
  RunResult r;
  auto in = [&](const Node& n, std::size_t i) { return r.values.at(n.inputs[i]); };
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    Var out;
    try {
      switch (n.op) {
        case OpKind::kInput: {
          auto it = feeds.find(id);
          if (it == feeds.end()) throw ContractError("no feed for input '" + id + "'");
          if (n.attrs.has("shape")) {
            const Shape want = parse_shape(n.attrs.get_text("shape"));
            const Shape& got = it->second.shape();
            if (got.size() != want.size() + 1 || !std::equal(want.begin(), want.end(), got.begin() + 1)) {
              throw DimensionError("feed shape " + shape_str(got) + " does not match [N," +
                                   format_shape(want) + "]");
            }
          }
          out = tape.constant(it->second);
          break;
        }
        case OpKind::kConst:
          out = tape.leaf(n.value, opt.trainable_consts.count(id) != 0);
          break;
        case OpKind::kConv2d:
          out = ops::conv2d(in(n, 0), in(n, 1), stride_attr(n), pad_attr(n, "same"));
          break;
        case OpKind::kDepthwiseConv2d:
          out = ops::depthwise_conv2d(in(n, 0), in(n, 1), stride_attr(n), pad_attr(n, "same"));
          break;
        case OpKind::kMatmul:
          out = ops::matmul(in(n, 0), in(n, 1));
          break;
        case OpKind::kBiasAdd:
          out = ops::bias_add(in(n, 0), in(n, 1));
          break;
        case OpKind::kBatchNorm:
          out = ops::batch_norm(in(n, 0), in(n, 1), in(n, 2), in(n, 3), in(n, 4),
                                n.attrs.get_double("eps", 1e-5));
          break;
        case OpKind::kRelu:
          out = ops::relu(in(n, 0));
          break;
        case OpKind::kRelu6:
          out = ops::relu6(in(n, 0));
          break;
        case OpKind::kLeakyRelu:
          out = ops::leaky_relu(in(n, 0), n.attrs.get_double("alpha"));
          break;
        case OpKind::kAvgPool: {
          const auto k = static_cast<std::size_t>(n.attrs.get_int("k"));
          out = ops::avg_pool(in(n, 0), k, stride_attr(n, static_cast<std::int64_t>(k)),
                              pad_attr(n, "valid"));
          break;
        }
        case OpKind::kEltwiseAdd:
          require_same_shape(in(n, 0).shape(), in(n, 1).shape(), "eltwise_add");
          out = ops::add(in(n, 0), in(n, 1));
          break;
        case OpKind::kConcat: {
          std::vector<Var> parts;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) parts.push_back(in(n, i));
          out = ops::concat(parts);
          break;
        }
        case OpKind::kMaximum:
          out = ops::maximum(in(n, 0), in(n, 1));
          break;
        case OpKind::kMul:
          out = ops::mul(in(n, 0), in(n, 1));
          break;
        case OpKind::kIdentity:
          out = in(n, 0);
          break;
        case OpKind::kQuantize: {
          const std::string gname = n.attrs.get_string("group");
          const bool active =
              opt.quantize && (!opt.active_groups || opt.active_groups->count(gname));
          if (!active) {
            out = in(n, 0);
            break;
          }
          const QuantGroup& grp = g.group(gname);
          auto git = r.groups.find(gname);
          if (git == r.groups.end()) {
            git = r.groups
                      .emplace(gname, tape.leaf(Tensor::scalar(grp.params.log2_t), opt.train_thresholds))
                      .first;
          }
          out = opt.unfused_quantizers
                    ? ops::quantize_unfused(in(n, 0), git->second, grp.params.bits, grp.params.is_signed)
                    : ops::quantize(in(n, 0), git->second, grp.params.bits, grp.params.is_signed);
          break;
        }
      }
    } catch (const Error& e) {
      const std::string msg = e.what();
      if (msg.rfind("node '", 0) == 0) throw;
      if (dynamic_cast<const DimensionError*>(&e)) throw DimensionError("node '" + id + "': " + msg);
      throw ContractError("node '" + id + "': " + msg);
    }
    r.values[id] = out;
  }
  return r;
}

/// Plain forward evaluation; returns the graph outputs.
inline std::map<std::string, Tensor> evaluate(const Graph& g, const std::map<std::string, Tensor>& feeds,
                                              const RunOptions& opt = {}) {
  Tape tape;
  RunResult r = run_graph(g, tape, feeds, opt);
  std::map<std::string, Tensor> out;
  for (const auto& o : g.outputs()) out[o] = r.value(o);
  return out;
}

/// Single-output convenience for graphs with one input and one output.
inline Tensor evaluate1(const Graph& g, const Tensor& x, const RunOptions& opt = {}) {
  const auto ins = g.input_ids();
  if (ins.size() != 1 || g.outputs().size() != 1) {
    throw ContractError("evaluate1 needs exactly one input and one output");
  }
  return evaluate(g, {{ins[0], x}}, opt).at(g.outputs()[0]);
}

/// Per-sample shapes of every node, found by running a zero batch of one.
inline std::map<std::string, Shape> infer_shapes(const Graph& g) {
  std::map<std::string, Tensor> feeds;
  for (const auto& id : g.input_ids()) {
    Shape s{1};
    const Shape per = parse_shape(g.node(id).attrs.get_text("shape"));
    s.insert(s.end(), per.begin(), per.end());
    feeds[id] = Tensor(s, 0.0);
  }
  Tape tape;
  RunOptions opt;
  opt.quantize = false;
  RunResult r = run_graph(g, tape, feeds, opt);
  std::map<std::string, Shape> out;
  for (const auto& [id, v] : r.values) {
    const Node& n = g.node(id);
    Shape s = v.shape();
    if (n.op != OpKind::kConst && !s.empty()) s.erase(s.begin());
    out[id] = s;
  }
  return out;
}

}  // namespace tqt::ir
