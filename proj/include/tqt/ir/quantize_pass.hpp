// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Quantization-layer insertion. Per layer topology:
//   compute:     q8(q'16(sum q_w(w) * q8(x)) + q'16(b)), output q8 after relu/relu6 (unsigned)
//   eltwise/max: q'8(x) + q'8(y) -> q8
//   leaky relu:  max(q'16(x), q'16(q16(alpha) * q'16(x))) -> q8, replacing the layer's q8
//   avg pool:    q8(sum q8(r) * q8(x)) with no 16-bit stage
//   concat:      inputs merged into one group, no output quantizer
// Group names are the ids of the tensors they were created for. Tensors that
// already carry a quantizer are left alone, which makes the pass idempotent.

#include <optional>
#include <string>
#include <vector>

#include "tqt/ir/graph.hpp"

namespace tqt::ir {

struct PrecisionConfig {
  std::string name = "INT8";
  int weight_bits = 8;
  int act_bits = 8;
  int internal_bits = 16;

  static PrecisionConfig int8() { return {"INT8", 8, 8, 16}; }
  static PrecisionConfig int4() { return {"INT4", 4, 8, 16}; }
  static PrecisionConfig parse(const std::string& s) {
    if (s == "INT8" || s == "int8") return int8();
    if (s == "INT4" || s == "int4") return int4();
    throw ContractError("unknown precision '" + s + "' (INT8, INT4)");
  }
};

namespace detail {

class QuantInserter {
 public:
  QuantInserter(Graph& g, const PrecisionConfig& cfg) : g_(g), cfg_(cfg) {}

  void run() {
    for (const auto& id : g_.topo_order()) {
      if (!g_.has(id)) continue;
      const OpKind op = g_.node(id).op;
      switch (op) {
        case OpKind::kInput:
          if (!output_quantized(id)) quantize_after(id, make_group(id, cfg_.act_bits, true, "act"));
          break;
        case OpKind::kConv2d:
        case OpKind::kDepthwiseConv2d:
        case OpKind::kMatmul:
          compute_layer(id);
          break;
        case OpKind::kEltwiseAdd:
        case OpKind::kMaximum:
          merge(producer_group(id, g_.node(id).inputs[0]), producer_group(id, g_.node(id).inputs[1]));
          output_stage(id);
          break;
        case OpKind::kConcat: {
          const auto ins = g_.node(id).inputs;
          std::string rep = producer_group(id, ins[0]);
          for (std::size_t i = 1; i < ins.size(); ++i) rep = merge(rep, producer_group(id, ins[i]));
          break;
        }
        case OpKind::kMul:
          if (!output_quantized(id)) fail(id, "standalone mul is not supported");
          break;
        case OpKind::kLeakyRelu:
          fail(id, "leaky_relu must directly follow a compute layer or eltwise op");
          break;
        case OpKind::kAvgPool:
          fail(id, "avg_pool must be converted to depthwise_conv2d first");
          break;
        case OpKind::kBatchNorm:
          fail(id, "batch_norm must be folded first");
          break;
        case OpKind::kIdentity:
          fail(id, "identity nodes must be spliced first");
          break;
        case OpKind::kBiasAdd: {
          // Bias adds are handled with their compute layer.
          const Node& src = g_.node(g_.node(id).inputs[0]);
          if (src.op != OpKind::kQuantize) fail(id, "bias_add must follow a compute layer");
          break;
        }
        case OpKind::kRelu:
        case OpKind::kRelu6:
        case OpKind::kConst:
        case OpKind::kQuantize:
          break;
      }
    }
    g_.validate();
  }

 private:
  [[noreturn]] static void fail(const std::string& id, const std::string& msg) {
    throw TransformError("node '" + id + "': " + msg);
  }

  std::optional<std::string> sole_consumer(const std::string& id) const {
    const auto c = g_.consumers(id);
    if (c.size() != 1 || g_.is_output(id)) return std::nullopt;
    return c[0];
  }

  bool output_quantized(const std::string& id) const {
    auto c = sole_consumer(id);
    return c && g_.node(*c).op == OpKind::kQuantize;
  }

  std::string make_group(const std::string& name, int bits, bool sgn, const std::string& role) {
    if (!g_.groups().count(name)) g_.groups()[name] = QuantGroup{QuantizerParams(bits, sgn, 0.0), role};
    return name;
  }

  /// Inserts a quantize node after `tensor` and rewires its readers.
  std::string quantize_after(const std::string& tensor, const std::string& group) {
    const std::string q = g_.unique_id(tensor + ".q");
    Attrs a;
    a.set("group", group.c_str());
    g_.add(q, OpKind::kQuantize, {tensor}, a);
    g_.replace_uses(tensor, q, q);
    return q;
  }

  /// Group of the quantizer that produced `tensor`, looking through ops
  /// that keep values on the grid.
  std::string producer_group(const std::string& user, const std::string& tensor) {
    const Node& n = g_.node(tensor);
    switch (n.op) {
      case OpKind::kQuantize:
        return n.attrs.get_string("group");
      case OpKind::kConcat: {
        std::string rep = producer_group(user, n.inputs[0]);
        for (std::size_t i = 1; i < n.inputs.size(); ++i) rep = merge(rep, producer_group(user, n.inputs[i]));
        return rep;
      }
      case OpKind::kRelu:
      case OpKind::kRelu6:
        return producer_group(user, n.inputs[0]);
      default:
        fail(user, "input '" + tensor + "' is not quantized");
    }
  }

  /// Union of two groups; the smaller name survives, signed wins.
  std::string merge(const std::string& a, const std::string& b) {
    if (a == b) return a;
    const std::string keep = std::min(a, b), drop = std::max(a, b);
    QuantGroup& k = g_.group(keep);
    const QuantGroup& d = g_.group(drop);
    k.params.is_signed = k.params.is_signed || d.params.is_signed;
    k.params.bits = std::max(k.params.bits, d.params.bits);
    for (const auto& m : g_.group_members(drop)) g_.node(m).attrs.set("group", keep.c_str());
    g_.groups().erase(drop);
    return keep;
  }

  void compute_layer(const std::string& id) {
    const bool from_avg = g_.node(id).attrs.get_int("from_avgpool", 0) != 0;
    const std::string w = g_.node(id).inputs[1];
    if (g_.node(w).op != OpKind::kQuantize) {
      if (g_.node(w).op != OpKind::kConst) fail(id, "weights must be a constant");
      quantize_after(w, make_group(w, from_avg ? cfg_.act_bits : cfg_.weight_bits, true, "weight"));
    }
    producer_group(id, g_.node(id).inputs[0]);
    if (from_avg) {
      output_stage(id);
      return;
    }
    if (!output_quantized(id)) quantize_after(id, make_group(id, cfg_.internal_bits, true, "acc"));
    const std::string acc_q = *sole_consumer(id);
    std::string out = acc_q;
    if (auto c = sole_consumer(acc_q); c && g_.node(*c).op == OpKind::kBiasAdd) {
      const std::string b = g_.node(*c).inputs[1];
      if (g_.node(b).op != OpKind::kQuantize) {
        if (g_.node(b).op != OpKind::kConst) fail(*c, "bias must be a constant");
        quantize_after(b, g_.node(acc_q).attrs.get_string("group"));
      }
      out = *c;
    }
    output_stage(out);
  }

  /// Output quantizer of a layer result, delayed past relu/relu6.
  void output_stage(const std::string& out) {
    const auto c = sole_consumer(out);
    if (c && g_.node(*c).op == OpKind::kQuantize) return;
    if (c && (g_.node(*c).op == OpKind::kRelu || g_.node(*c).op == OpKind::kRelu6)) {
      if (!output_quantized(*c)) quantize_after(*c, make_group(*c, cfg_.act_bits, false, "act"));
      return;
    }
    if (c && g_.node(*c).op == OpKind::kLeakyRelu) {
      leaky_stage(out, *c);
      return;
    }
    quantize_after(out, make_group(out, cfg_.act_bits, true, "act"));
  }

  void leaky_stage(const std::string& out, const std::string& leaky) {
    const double alpha = g_.node(leaky).attrs.get_double("alpha");
    const std::string g16 = make_group(out, cfg_.internal_bits, true, "act");
    const std::string xq = quantize_after(out, g16);
    const std::string a = g_.unique_id(leaky + ".alpha");
    g_.add_const(a, Tensor::scalar(alpha));
    const std::string aq = quantize_after(a, make_group(a, cfg_.internal_bits, true, "weight"));
    const std::string m = g_.unique_id(leaky + ".mul");
    g_.add(m, OpKind::kMul, {xq, aq});
    const std::string mq = quantize_after(m, g16);
    g_.remove(leaky);
    g_.add(leaky, OpKind::kMaximum, {xq, mq});
    quantize_after(leaky, make_group(leaky, cfg_.act_bits, true, "act"));
  }

  Graph& g_;
  PrecisionConfig cfg_;
};

}  // namespace detail

inline Graph insert_quant_layers(Graph g, const PrecisionConfig& cfg = PrecisionConfig::int8()) {
  detail::QuantInserter(g, cfg).run();
  return g;
}

}  // namespace tqt::ir
