// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Lowering of a quantized graph to integer-only ops. Every tensor carries a
// fractional length f (real = int * 2^-f). Products add fractional lengths,
// quantize nodes become shift_requant by f_in - f_out, and binary ops whose
// inputs disagree on f get an exact left shift on the coarser input.
//
// Node ids follow the quantized graph so both executions can be compared
// tensor by tensor.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tqt/core/kernels.hpp"
#include "tqt/core/rng.hpp"
#include "tqt/core/tensor_io.hpp"
#include "tqt/fxp/fixed_point.hpp"
#include "tqt/ir/executor.hpp"
#include "tqt/ir/graph.hpp"

namespace tqt::fxp {

using ir::Attrs;

enum class IntOp {
  kInput,
  kConst,
  kConv2d,
  kDepthwiseConv2d,
  kMatmul,
  kBiasAdd,
  kAdd,
  kMax,
  kMul,
  kRelu,
  kRelu6,
  kConcat,
  kShiftRequant,
  kShiftLeft,
};

inline const std::vector<std::pair<IntOp, const char*>>& int_op_names() {
  static const std::vector<std::pair<IntOp, const char*>> t = {
      {IntOp::kInput, "int_input"},
      {IntOp::kConst, "int_const"},
      {IntOp::kConv2d, "int_conv2d"},
      {IntOp::kDepthwiseConv2d, "int_depthwise_conv2d"},
      {IntOp::kMatmul, "int_matmul"},
      {IntOp::kBiasAdd, "int_bias_add"},
      {IntOp::kAdd, "int_add"},
      {IntOp::kMax, "int_max"},
      {IntOp::kMul, "int_mul"},
      {IntOp::kRelu, "int_relu"},
      {IntOp::kRelu6, "int_relu6"},
      {IntOp::kConcat, "int_concat"},
      {IntOp::kShiftRequant, "shift_requant"},
      {IntOp::kShiftLeft, "shift_left"},
  };
  return t;
}

inline const char* int_op_name(IntOp op) {
  for (const auto& [k, n] : int_op_names()) {
    if (k == op) return n;
  }
  throw InternalError("unknown integer op");
}

inline std::optional<IntOp> int_op_from_name(const std::string& s) {
  for (const auto& [k, n] : int_op_names()) {
    if (s == n) return k;
  }
  return std::nullopt;
}

struct IntNode {
  std::string id;
  IntOp op = IntOp::kConst;
  std::vector<std::string> inputs;
  Attrs attrs;  // stride/pad, shift, shape, source
  IntTensor value;
  int f = 0;
  int bits = 32;
  bool is_signed = true;

  bool operator==(const IntNode&) const = default;
};

class LoweredGraph {
 public:
  bool has(const std::string& id) const { return nodes_.count(id) != 0; }
  const IntNode& node(const std::string& id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw ContractError("no lowered node '" + id + "'");
    return it->second;
  }
  IntNode& node(const std::string& id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw ContractError("no lowered node '" + id + "'");
    return it->second;
  }
  const std::map<std::string, IntNode>& nodes() const noexcept { return nodes_; }
  IntNode& add(IntNode n) {
    if (has(n.id)) throw ContractError("duplicate lowered node '" + n.id + "'");
    const std::string id = n.id;
    return nodes_.emplace(id, std::move(n)).first->second;
  }
  std::string unique_id(const std::string& base) const {
    if (!has(base)) return base;
    for (int i = 1;; ++i) {
      std::string c = base + "_" + std::to_string(i);
      if (!has(c)) return c;
    }
  }
  std::vector<std::string> topo_order() const { return ir::kahn_order(nodes_); }
  std::vector<std::string> input_ids() const {
    std::vector<std::string> out;
    for (const auto& [k, n] : nodes_) {
      if (n.op == IntOp::kInput) out.push_back(k);
    }
    return out;
  }
  std::vector<std::string>& outputs() noexcept { return outputs_; }
  const std::vector<std::string>& outputs() const noexcept { return outputs_; }

  bool operator==(const LoweredGraph&) const = default;

 private:
  std::map<std::string, IntNode> nodes_;
  std::vector<std::string> outputs_;
};

namespace detail {

class Lowerer {
 public:
  explicit Lowerer(const ir::Graph& g) : g_(g) {}

  LoweredGraph run() {
    for (const auto& id : g_.topo_order()) lower_node(g_.node(id));
    for (const auto& o : g_.outputs()) lg_.outputs().push_back(lowered_.at(o));
    return std::move(lg_);
  }

 private:
  [[noreturn]] static void fail(const std::string& id, const std::string& msg) {
    throw TransformError("node '" + id + "': " + msg);
  }

  /// Lowered id holding the integer form of quantized-graph tensor `id`.
  const std::string& src(const ir::Node& user, std::size_t i) const {
    auto it = lowered_.find(user.inputs[i]);
    if (it == lowered_.end()) {
      fail(user.id, "input '" + user.inputs[i] + "' has no integer form; is it quantized?");
    }
    return it->second;
  }

  IntNode& emit(const std::string& id, IntOp op, std::vector<std::string> inputs, int f, int bits = 32,
                bool sgn = true) {
    IntNode n;
    n.id = id;
    n.op = op;
    n.inputs = std::move(inputs);
    n.f = f;
    n.bits = bits;
    n.is_signed = sgn;
    lowered_[id] = id;
    return lg_.add(std::move(n));
  }

  /// Brings `in` to fractional length `f` (>= its own) by an exact left shift.
  std::string align(const std::string& user, std::size_t i, const std::string& in, int f) {
    const IntNode& n = lg_.node(in);
    if (n.f == f) return in;
    if (n.f > f) throw InternalError("align: cannot lower precision of '" + in + "'");
    const std::string id = lg_.unique_id(user + ".in" + std::to_string(i));
    IntNode s;
    s.id = id;
    s.op = IntOp::kShiftLeft;
    s.inputs = {in};
    s.attrs.set("shift", f - n.f);
    s.f = f;
    lg_.add(std::move(s));
    return id;
  }

  std::vector<std::string> aligned_inputs(const ir::Node& n, int* f_out) {
    int f = std::numeric_limits<int>::min();
    for (std::size_t i = 0; i < n.inputs.size(); ++i) f = std::max(f, lg_.node(src(n, i)).f);
    std::vector<std::string> ins;
    for (std::size_t i = 0; i < n.inputs.size(); ++i) ins.push_back(align(n.id, i, src(n, i), f));
    *f_out = f;
    return ins;
  }

  void copy_window_attrs(const ir::Node& n, IntNode& out, const char* dflt_pad) {
    out.attrs.set("stride", static_cast<std::int64_t>(ir::stride_attr(n)));
    out.attrs.set("pad", n.attrs.get_string("pad", dflt_pad).c_str());
  }

  void lower_node(const ir::Node& n) {
    using ir::OpKind;
    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kConst:
        return;  // materialised by the quantize node that reads them
      case OpKind::kQuantize: {
        const ir::QuantGroup& grp = g_.group_of(n);
        const QuantizerParams& q = grp.params;
        q.validate();
        const ir::Node& in = g_.node(n.inputs[0]);
        if (in.op == OpKind::kConst) {
          IntNode& c = emit(n.id, IntOp::kConst, {}, q.frac_len(), q.bits, q.is_signed);
          c.value = to_fixed_point(in.value, q).elems;
          return;
        }
        if (in.op == OpKind::kInput) {
          IntNode& c = emit(n.id, IntOp::kInput, {}, q.frac_len(), q.bits, q.is_signed);
          c.attrs.set("source", in.id.c_str());
          if (in.attrs.has("shape")) c.attrs.set("shape", in.attrs.get_text("shape").c_str());
          return;
        }
        const IntNode& x = lg_.node(src(n, 0));
        IntNode& r = emit(n.id, IntOp::kShiftRequant, {x.id}, q.frac_len(), q.bits, q.is_signed);
        r.attrs.set("shift", static_cast<std::int64_t>(lg_.node(r.inputs[0]).f - q.frac_len()));
        return;
      }
      case OpKind::kConv2d:
      case OpKind::kDepthwiseConv2d:
      case OpKind::kMatmul:
      case OpKind::kMul: {
        const IntOp op = n.op == OpKind::kConv2d            ? IntOp::kConv2d
                         : n.op == OpKind::kDepthwiseConv2d ? IntOp::kDepthwiseConv2d
                         : n.op == OpKind::kMatmul          ? IntOp::kMatmul
                                                            : IntOp::kMul;
        const std::string a = src(n, 0), b = src(n, 1);
        IntNode& out = emit(n.id, op, {a, b}, lg_.node(a).f + lg_.node(b).f);
        if (op == IntOp::kConv2d || op == IntOp::kDepthwiseConv2d) copy_window_attrs(n, out, "same");
        return;
      }
      case OpKind::kBiasAdd:
      case OpKind::kEltwiseAdd:
      case OpKind::kMaximum:
      case OpKind::kConcat: {
        int f = 0;
        auto ins = aligned_inputs(n, &f);
        const IntOp op = n.op == OpKind::kBiasAdd      ? IntOp::kBiasAdd
                         : n.op == OpKind::kEltwiseAdd ? IntOp::kAdd
                         : n.op == OpKind::kMaximum    ? IntOp::kMax
                                                       : IntOp::kConcat;
        emit(n.id, op, std::move(ins), f);
        return;
      }
      case OpKind::kRelu:
        emit(n.id, IntOp::kRelu, {src(n, 0)}, lg_.node(src(n, 0)).f);
        return;
      case OpKind::kRelu6: {
        // 6 is representable once f >= -1.
        const int f = std::max(lg_.node(src(n, 0)).f, -1);
        emit(n.id, IntOp::kRelu6, {align(n.id, 0, src(n, 0), f)}, f);
        return;
      }
      case OpKind::kBatchNorm:
      case OpKind::kLeakyRelu:
      case OpKind::kAvgPool:
      case OpKind::kIdentity:
        fail(n.id, std::string(ir::op_name(n.op)) + " cannot be lowered; run the graph passes first");
    }
  }

  const ir::Graph& g_;
  LoweredGraph lg_;
  std::map<std::string, std::string> lowered_;
};

}  // namespace detail

/// Integer form of a quantized graph with fixed parameters.
inline LoweredGraph lower(const ir::Graph& g) { return detail::Lowerer(g).run(); }

// Execution.

namespace detail {

inline IntTensor narrow_checked(const Int64Tensor& t, const std::string& id) {
  IntTensor out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < std::numeric_limits<std::int32_t>::min() || t[i] > std::numeric_limits<std::int32_t>::max()) {
      throw OverflowError("node '" + id + "': 32-bit accumulator overflow (" + std::to_string(t[i]) + ")");
    }
    out[i] = static_cast<std::int32_t>(t[i]);
  }
  return out;
}

template <typename Fn>
Int64Tensor zip(const IntTensor& a, const IntTensor& b, const std::string& id, Fn fn) {
  Int64Tensor out(a.shape());
  if (b.size() == a.size()) {
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(std::int64_t{a[i]}, std::int64_t{b[i]});
  } else if (b.size() == 1) {
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(std::int64_t{a[i]}, std::int64_t{b[0]});
  } else {
    throw DimensionError("node '" + id + "': operand shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " disagree");
  }
  return out;
}

}  // namespace detail

using FixedPointMap = std::map<std::string, FixedPointTensor>;

/// Runs the lowered graph on integer inputs and returns every node's value.
inline FixedPointMap execute_integer_all(const LoweredGraph& lg, const FixedPointMap& inputs) {
  FixedPointMap v;
  for (const auto& id : lg.topo_order()) {
    const IntNode& n = lg.node(id);
    auto in = [&](std::size_t i) -> const IntTensor& { return v.at(n.inputs[i]).elems; };
    IntTensor out;
    switch (n.op) {
      case IntOp::kInput: {
        auto it = inputs.find(id);
        if (it == inputs.end()) throw ContractError("no integer feed for input '" + id + "'");
        if (it->second.f != n.f || it->second.bits != n.bits || it->second.is_signed != n.is_signed) {
          throw ContractError("node '" + id + "': feed format differs from the graph's input quantizer");
        }
        out = it->second.elems;
        break;
      }
      case IntOp::kConst:
        out = n.value;
        break;
      case IntOp::kConv2d:
        out = detail::narrow_checked(
            conv2d_kernel<std::int32_t, std::int64_t>(
                in(0), in(1), static_cast<std::size_t>(n.attrs.get_int("stride", 1)),
                parse_padding(n.attrs.get_string("pad", "same"))),
            id);
        break;
      case IntOp::kDepthwiseConv2d:
        out = detail::narrow_checked(
            depthwise_conv2d_kernel<std::int32_t, std::int64_t>(
                in(0), in(1), static_cast<std::size_t>(n.attrs.get_int("stride", 1)),
                parse_padding(n.attrs.get_string("pad", "same"))),
            id);
        break;
      case IntOp::kMatmul: {
        const IntTensor& x = in(0);
        if (x.rank() < 2) throw DimensionError("node '" + id + "': matmul input needs a batch axis");
        const std::size_t b = x.dim(0);
        out = detail::narrow_checked(
            matmul_kernel<std::int32_t, std::int64_t>(x.reshaped(Shape{b, x.size() / b}), in(1)), id);
        break;
      }
      case IntOp::kBiasAdd: {
        const IntTensor& x = in(0);
        const IntTensor& b = in(1);
        if (x.shape().back() != b.size()) {
          throw DimensionError("node '" + id + "': bias has " + std::to_string(b.size()) +
                               " entries, input " + shape_str(x.shape()));
        }
        Int64Tensor s(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) s[i] = std::int64_t{x[i]} + b[i % b.size()];
        out = detail::narrow_checked(s, id);
        break;
      }
      case IntOp::kAdd:
        if (in(0).shape() != in(1).shape()) throw DimensionError("node '" + id + "': add shapes differ");
        out = detail::narrow_checked(
            detail::zip(in(0), in(1), id, [](std::int64_t a, std::int64_t b) { return a + b; }), id);
        break;
      case IntOp::kMax:
        out = detail::narrow_checked(
            detail::zip(in(0), in(1), id, [](std::int64_t a, std::int64_t b) { return std::max(a, b); }),
            id);
        break;
      case IntOp::kMul:
        out = detail::narrow_checked(
            detail::zip(in(0), in(1), id, [](std::int64_t a, std::int64_t b) { return a * b; }), id);
        break;
      case IntOp::kRelu:
        out = in(0);
        for (auto& e : out.vec()) e = std::max(e, 0);
        break;
      case IntOp::kRelu6: {
        if (n.f < -1) throw InternalError("node '" + id + "': relu6 needs f >= -1");
        const std::int64_t six = n.f >= 0 ? (std::int64_t{6} << n.f) : 3;
        Int64Tensor s(in(0).shape());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::clamp<std::int64_t>(in(0)[i], 0, six);
        out = detail::narrow_checked(s, id);
        break;
      }
      case IntOp::kConcat: {
        const Shape& s0 = in(0).shape();
        std::size_t total = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Shape& s = in(k).shape();
          if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin())) {
            throw DimensionError("node '" + id + "': concat shapes disagree");
          }
          total += s.back();
        }
        Shape os = s0;
        os.back() = total;
        out = IntTensor(os);
        const std::size_t rows = out.size() / total;
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const IntTensor& t = in(k);
          const std::size_t w = t.shape().back();
          for (std::size_t r = 0; r < rows; ++r) std::copy_n(&t[r * w], w, &out[r * total + off]);
          off += w;
        }
        break;
      }
      case IntOp::kShiftRequant: {
        const int shift = static_cast<int>(n.attrs.get_int("shift"));
        out = IntTensor(in(0).shape());
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = static_cast<std::int32_t>(shift_requant(in(0)[i], shift, n.bits, n.is_signed));
        }
        break;
      }
      case IntOp::kShiftLeft: {
        const int shift = static_cast<int>(n.attrs.get_int("shift"));
        if (shift < 0 || shift > 31) throw InternalError("node '" + id + "': bad left shift");
        Int64Tensor s(in(0).shape());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::int64_t{in(0)[i]} * (std::int64_t{1} << shift);
        out = detail::narrow_checked(s, id);
        break;
      }
    }
    FixedPointTensor t{std::move(out), n.f, n.bits, n.is_signed};
    t.validate("node '" + id + "'");
    v[id] = std::move(t);
  }
  return v;
}

inline FixedPointMap execute_integer(const LoweredGraph& lg, const FixedPointMap& inputs) {
  FixedPointMap all = execute_integer_all(lg, inputs);
  FixedPointMap out;
  for (const auto& o : lg.outputs()) out[o] = all.at(o);
  return out;
}

/// Integer feeds for the lowered inputs from real-valued feeds keyed by the
/// original input ids.
inline FixedPointMap quantize_feeds(const LoweredGraph& lg, const std::map<std::string, Tensor>& feeds) {
  FixedPointMap out;
  for (const auto& id : lg.input_ids()) {
    const IntNode& n = lg.node(id);
    const std::string source = n.attrs.get_string("source", id);
    auto it = feeds.find(source);
    if (it == feeds.end()) throw ContractError("no feed for input '" + source + "'");
    FixedPointTensor t{IntTensor(it->second.shape()), n.f, n.bits, n.is_signed};
    const std::int64_t lo = int_min(n.bits, n.is_signed), hi = int_max(n.bits, n.is_signed);
    for (std::size_t i = 0; i < t.elems.size(); ++i) {
      const double r = bankers_round_real(std::ldexp(it->second[i], n.f));
      t.elems[i] = static_cast<std::int32_t>(std::clamp(r, static_cast<double>(lo), static_cast<double>(hi)));
    }
    out[id] = std::move(t);
  }
  return out;
}

// Bit-exactness against the emulated (real-valued) quantized graph.

struct BitexactReport {
  std::size_t trials = 0;
  std::size_t compared = 0;  // integers compared over all nodes and trials
  std::size_t mismatches = 0;
  std::string first_node;
  std::size_t first_trial = 0;
  std::size_t first_index = 0;
  double expected = 0.0;  // emulated value times 2^f
  std::int64_t got = 0;

  bool ok() const { return mismatches == 0; }
  std::string summary() const {
    std::ostringstream os;
    if (ok()) {
      os << "bit-exact: " << trials << " trials, " << compared << " integers, 0 mismatches";
    } else {
      os << "MISMATCH: " << mismatches << " of " << compared << " integers; first at node '" << first_node
         << "' trial " << first_trial << " index " << first_index << " (emulated " << expected
         << ", integer " << got << ")";
    }
    return os.str();
  }
};

/// Compares every lowered node that has a counterpart in the quantized graph.
inline void compare_trial(const ir::Graph& g, const LoweredGraph& lg, const std::map<std::string, Tensor>& feeds,
                          std::size_t trial, BitexactReport& rep) {
  Tape tape;
  const ir::RunResult emu = ir::run_graph(g, tape, feeds);
  const FixedPointMap ints = execute_integer_all(lg, quantize_feeds(lg, feeds));
  for (const auto& id : lg.topo_order()) {
    auto it = emu.values.find(id);
    if (it == emu.values.end()) continue;
    const Tensor& e = it->second.value();
    const FixedPointTensor& q = ints.at(id);
    if (e.size() != q.elems.size()) {
      throw DimensionError("node '" + id + "': emulated and integer shapes differ");
    }
    for (std::size_t i = 0; i < e.size(); ++i) {
      ++rep.compared;
      const double want = std::ldexp(e[i], q.f);
      if (want != static_cast<double>(q.elems[i])) {
        if (rep.mismatches++ == 0) {
          rep.first_node = id;
          rep.first_trial = trial;
          rep.first_index = i;
          rep.expected = want;
          rep.got = q.elems[i];
        }
      }
    }
  }
  ++rep.trials;
}

inline BitexactReport bitexact_check(const ir::Graph& g, const LoweredGraph& lg,
                                     const std::vector<std::map<std::string, Tensor>>& trials) {
  BitexactReport rep;
  for (std::size_t t = 0; t < trials.size(); ++t) compare_trial(g, lg, trials[t], t, rep);
  return rep;
}

/// Random single-sample trials. Inputs are Gaussian with a spread of half
/// the input quantizer's threshold, so some samples saturate.
inline BitexactReport bitexact_check(const ir::Graph& g, const LoweredGraph& lg, std::size_t trials,
                                     std::uint64_t seed = 1) {
  Rng rng(seed);
  BitexactReport rep;
  for (std::size_t t = 0; t < trials; ++t) {
    std::map<std::string, Tensor> feeds;
    for (const auto& id : lg.input_ids()) {
      const IntNode& n = lg.node(id);
      const std::string source = n.attrs.get_string("source", id);
      Shape s{1};
      const Shape per = ir::parse_shape(g.node(source).attrs.get_text("shape"));
      s.insert(s.end(), per.begin(), per.end());
      const double t_in = std::ldexp(static_cast<double>(int_max(n.bits, n.is_signed)) + 1.0, -n.f);
      feeds[source] = rng.normal_tensor(s, 0.5 * t_in);
    }
    compare_trial(g, lg, feeds, t, rep);
  }
  return rep;
}

// Text form and deployment bundle.

struct ScaleRow {
  std::string name;
  int f;
  int bits;
  bool is_signed;
};

inline std::vector<ScaleRow> scales_manifest(const LoweredGraph& lg) {
  std::vector<ScaleRow> rows;
  for (const auto& id : lg.topo_order()) {
    const IntNode& n = lg.node(id);
    rows.push_back({id, n.f, n.bits, n.is_signed});
  }
  return rows;
}

inline void write_scales_csv(std::ostream& os, const LoweredGraph& lg) {
  os << "name,f,b,signed\n";
  for (const auto& r : scales_manifest(lg)) os << r.name << ',' << r.f << ',' << r.bits << ',' << r.is_signed << '\n';
}

inline ir::TextDoc to_doc(const LoweredGraph& lg, const std::optional<std::filesystem::path>& tensor_dir = {},
                          const std::filesystem::path& base_dir = {}) {
  ir::TextDoc doc;
  for (const auto& id : lg.topo_order()) {
    const IntNode& n = lg.node(id);
    ir::TextNode t{n.id, int_op_name(n.op), n.inputs, n.attrs, 0};
    t.attrs.set("f", n.f);
    t.attrs.set("b", n.bits);
    t.attrs.set("signed", n.is_signed);
    if (n.op == IntOp::kConst) {
      t.attrs.set("shape", ir::format_shape(n.value.shape()).c_str());
      if (tensor_dir) {
        const auto path = *tensor_dir / (ir::file_stem_for(id) + ".tqt");
        save_tensor(path, n.value);
        t.attrs.set("file", std::filesystem::relative(path, base_dir).generic_string().c_str());
      } else {
        t.attrs.set("data", ir::format_data(n.value).c_str());
      }
    }
    doc.nodes.push_back(std::move(t));
  }
  doc.outputs = lg.outputs();
  return doc;
}

inline std::string serialize_lowered(const LoweredGraph& lg) { return ir::format_text(to_doc(lg)); }

inline LoweredGraph parse_lowered(const std::string& text, const std::filesystem::path& base_dir = {}) {
  const ir::TextDoc doc = ir::parse_text(text);
  if (!doc.groups.empty()) throw ParseError("lowered graphs carry no quantizer groups");
  LoweredGraph lg;
  for (const auto& t : doc.nodes) {
    const std::string who = "node '" + t.id + "'";
    auto op = int_op_from_name(t.op);
    if (!op) throw ParseError(who + ": unknown integer op '" + t.op + "'");
    if (lg.has(t.id)) throw ParseError(who + ": defined twice");
    IntNode n;
    n.id = t.id;
    n.op = *op;
    n.inputs = t.inputs;
    n.attrs = t.attrs;
    try {
      n.f = static_cast<int>(t.attrs.get_int("f"));
      n.bits = static_cast<int>(t.attrs.get_int("b"));
      n.is_signed = t.attrs.get_int("signed") != 0;
      if (*op == IntOp::kConst) {
        const Shape shape = ir::parse_shape(t.attrs.get_text("shape"));
        if (t.attrs.has("file")) {
          n.value = load_tensor<std::int32_t>(base_dir / t.attrs.get_string("file"));
          if (n.value.shape() != shape) throw ParseError("file shape disagrees with attribute");
        } else {
          n.value = ir::parse_data<std::int32_t>(shape, t.attrs.get_text("data"), who);
        }
      }
    } catch (const Error& e) {
      const std::string msg = e.what();
      throw ParseError(msg.rfind(who, 0) == 0 ? msg : who + ": " + msg);
    }
    for (const char* k : {"f", "b", "signed", "shape", "data", "file"}) {
      if (*op != IntOp::kInput || std::string(k) != "shape") n.attrs.erase(k);
    }
    lg.add(std::move(n));
  }
  for (const auto& [id, n] : lg.nodes()) {
    for (const auto& in : n.inputs) {
      if (!lg.has(in)) throw ParseError("node '" + id + "': unknown input '" + in + "'");
    }
  }
  lg.outputs() = doc.outputs;
  for (const auto& o : lg.outputs()) {
    if (!lg.has(o)) throw ParseError("outputs: unknown node '" + o + "'");
  }
  (void)lg.topo_order();
  return lg;
}

/// Writes `dir/model.ir`, integer tensors under `dir/model_tensors/` and
/// `dir/scales.csv`.
inline void save_bundle(const LoweredGraph& lg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::string text = ir::format_text(to_doc(lg, dir / "model_tensors", dir));
  std::ofstream ir_out(dir / "model.ir");
  if (!ir_out) throw IoError("cannot write " + (dir / "model.ir").string());
  ir_out << text;
  std::ofstream csv(dir / "scales.csv");
  if (!csv) throw IoError("cannot write " + (dir / "scales.csv").string());
  write_scales_csv(csv, lg);
}

inline LoweredGraph load_bundle(const std::filesystem::path& dir) {
  std::ifstream is(dir / "model.ir");
  if (!is) throw IoError("cannot read " + (dir / "model.ir").string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_lowered(ss.str(), dir);
}

}  // namespace tqt::fxp
