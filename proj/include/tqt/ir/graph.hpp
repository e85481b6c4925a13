// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include "tqt/core/tensor.hpp"
#include "tqt/core/tensor_io.hpp"
#include "tqt/ir/text_format.hpp"
#include "tqt/quant/quantizer.hpp"

namespace tqt::ir {

enum class OpKind {
  kInput,
  kConst,
  kConv2d,
  kDepthwiseConv2d,
  kMatmul,
  kBiasAdd,
  kBatchNorm,
  kRelu,
  kRelu6,
  kLeakyRelu,
  kAvgPool,
  kEltwiseAdd,
  kConcat,
  kMaximum,
  kQuantize,
  kIdentity,
  kMul,
};

struct OpInfo {
  OpKind kind;
  const char* name;
  int min_inputs;
  int max_inputs;  // -1: unbounded
};

inline const std::vector<OpInfo>& op_table() {
  static const std::vector<OpInfo> t = {
      {OpKind::kInput, "input", 0, 0},
      {OpKind::kConst, "const", 0, 0},
      {OpKind::kConv2d, "conv2d", 2, 2},
      {OpKind::kDepthwiseConv2d, "depthwise_conv2d", 2, 2},
      {OpKind::kMatmul, "matmul", 2, 2},
      {OpKind::kBiasAdd, "bias_add", 2, 2},
      {OpKind::kBatchNorm, "batch_norm", 5, 5},
      {OpKind::kRelu, "relu", 1, 1},
      {OpKind::kRelu6, "relu6", 1, 1},
      {OpKind::kLeakyRelu, "leaky_relu", 1, 1},
      {OpKind::kAvgPool, "avg_pool", 1, 1},
      {OpKind::kEltwiseAdd, "eltwise_add", 2, 2},
      {OpKind::kConcat, "concat", 1, -1},
      {OpKind::kMaximum, "maximum", 2, 2},
      {OpKind::kQuantize, "quantize", 1, 1},
      {OpKind::kIdentity, "identity", 1, 1},
      {OpKind::kMul, "mul", 2, 2},
  };
  return t;
}

inline const OpInfo& op_info(OpKind k) {
  for (const auto& i : op_table()) {
    if (i.kind == k) return i;
  }
  throw InternalError("unknown op kind");
}
inline const char* op_name(OpKind k) { return op_info(k).name; }
inline std::optional<OpKind> op_from_name(const std::string& s) {
  for (const auto& i : op_table()) {
    if (s == i.name) return i.kind;
  }
  return std::nullopt;
}

inline bool is_compute(OpKind k) {
  return k == OpKind::kConv2d || k == OpKind::kDepthwiseConv2d || k == OpKind::kMatmul;
}

struct Node {
  std::string id;
  OpKind op = OpKind::kIdentity;
  std::vector<std::string> inputs;
  Attrs attrs;
  Tensor value;  // payload of const nodes

  bool operator==(const Node&) const = default;
};

/// One quantizer shared by every quantize node that names it.
struct QuantGroup {
  QuantizerParams params;
  std::string role = "act";  // act, weight or acc
  bool operator==(const QuantGroup&) const = default;
};

/// Kahn's algorithm over nodes keyed by id; ready nodes are taken in id
/// order so the result is deterministic.
template <typename N>
std::vector<std::string> kahn_order(const std::map<std::string, N>& nodes) {
  std::map<std::string, int> indeg;
  std::map<std::string, std::vector<std::string>> users;
  for (const auto& [k, n] : nodes) {
    indeg[k] += 0;
    std::set<std::string> uniq(n.inputs.begin(), n.inputs.end());
    for (const auto& in : uniq) {
      if (!nodes.count(in)) throw ParseError("node '" + k + "': unknown input '" + in + "'");
      ++indeg[k];
      users[in].push_back(k);
    }
  }
  std::set<std::string> ready;
  for (const auto& [k, d] : indeg) {
    if (d == 0) ready.insert(k);
  }
  std::vector<std::string> order;
  while (!ready.empty()) {
    const std::string k = *ready.begin();
    ready.erase(ready.begin());
    order.push_back(k);
    for (const auto& u : users[k]) {
      if (--indeg[u] == 0) ready.insert(u);
    }
  }
  if (order.size() != nodes.size()) {
    for (const auto& [k, d] : indeg) {
      if (d > 0) throw ParseError("cycle through node '" + k + "'");
    }
  }
  return order;
}

class Graph {
 public:
  bool has(const std::string& id) const { return nodes_.count(id) != 0; }
  const Node& node(const std::string& id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw ContractError("no node '" + id + "'");
    return it->second;
  }
  Node& node(const std::string& id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw ContractError("no node '" + id + "'");
    return it->second;
  }
  const std::map<std::string, Node>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Node& add(Node n) {
    if (has(n.id)) throw ContractError("duplicate node id '" + n.id + "'");
    const std::string id = n.id;
    return nodes_.emplace(id, std::move(n)).first->second;
  }
  Node& add(const std::string& id, OpKind op, std::vector<std::string> inputs, Attrs attrs = {}) {
    return add(Node{id, op, std::move(inputs), std::move(attrs), Tensor()});
  }
  Node& add_const(const std::string& id, Tensor value) {
    Node n{id, OpKind::kConst, {}, {}, std::move(value)};
    return add(std::move(n));
  }
  void remove(const std::string& id) { nodes_.erase(id); }

  /// Fresh id derived from base.
  std::string unique_id(const std::string& base) const {
    if (!has(base)) return base;
    for (int i = 1;; ++i) {
      std::string c = base + "_" + std::to_string(i);
      if (!has(c)) return c;
    }
  }

  /// Ids of nodes reading `id`, each once, sorted.
  std::vector<std::string> consumers(const std::string& id) const {
    std::vector<std::string> out;
    for (const auto& [k, n] : nodes_) {
      if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(k);
    }
    return out;
  }
  bool is_output(const std::string& id) const {
    return std::find(outputs_.begin(), outputs_.end(), id) != outputs_.end();
  }

  /// Rewires every reader of `from` (and the output list) to `to`, except
  /// the node named `skip`.
  void replace_uses(const std::string& from, const std::string& to, const std::string& skip = "") {
    for (auto& [k, n] : nodes_) {
      if (k == skip) continue;
      for (auto& in : n.inputs) {
        if (in == from) in = to;
      }
    }
    for (auto& o : outputs_) {
      if (o == from) o = to;
    }
  }

  std::vector<std::string>& outputs() noexcept { return outputs_; }
  const std::vector<std::string>& outputs() const noexcept { return outputs_; }

  std::map<std::string, QuantGroup>& groups() noexcept { return groups_; }
  const std::map<std::string, QuantGroup>& groups() const noexcept { return groups_; }
  QuantGroup& group(const std::string& name) {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ContractError("no quantizer group '" + name + "'");
    return it->second;
  }
  const QuantGroup& group(const std::string& name) const {
    auto it = groups_.find(name);
    if (it == groups_.end()) throw ContractError("no quantizer group '" + name + "'");
    return it->second;
  }
  const QuantGroup& group_of(const Node& q) const { return group(q.attrs.get_string("group")); }

  /// Quantize nodes referring to a group, sorted by id.
  std::vector<std::string> group_members(const std::string& name) const {
    std::vector<std::string> out;
    for (const auto& [k, n] : nodes_) {
      if (n.op == OpKind::kQuantize && n.attrs.get_string("group") == name) out.push_back(k);
    }
    return out;
  }

  std::vector<std::string> input_ids() const {
    std::vector<std::string> out;
    for (const auto& [k, n] : nodes_) {
      if (n.op == OpKind::kInput) out.push_back(k);
    }
    return out;
  }

  /// Checks arity, references, group links and acyclicity.
  void validate() const {
    for (const auto& [k, n] : nodes_) {
      const OpInfo& info = op_info(n.op);
      const int ni = static_cast<int>(n.inputs.size());
      if (ni < info.min_inputs || (info.max_inputs >= 0 && ni > info.max_inputs)) {
        throw ParseError("node '" + k + "': " + info.name + " takes " +
                         std::to_string(info.min_inputs) + " inputs, got " + std::to_string(ni));
      }
      for (const auto& in : n.inputs) {
        if (!has(in)) throw ParseError("node '" + k + "': unknown input '" + in + "'");
      }
      if (n.op == OpKind::kConst && n.value.empty()) {
        throw ParseError("node '" + k + "': const without payload");
      }
      if (n.op == OpKind::kQuantize) {
        const std::string g = n.attrs.get_string("group");
        if (!groups_.count(g)) throw ParseError("node '" + k + "': unknown group '" + g + "'");
      }
    }
    for (const auto& o : outputs_) {
      if (!has(o)) throw ParseError("outputs: unknown node '" + o + "'");
    }
    (void)topo_order();
  }

  std::vector<std::string> topo_order() const { return kahn_order(nodes_); }

  bool operator==(const Graph&) const = default;

 private:
  std::map<std::string, Node> nodes_;
  std::vector<std::string> outputs_;
  std::map<std::string, QuantGroup> groups_;
};

inline std::vector<std::string> topo_order(const Graph& g) { return g.topo_order(); }

// Text conversion.

struct SerializeOptions {
  /// When set, const payloads go to tensor files under this directory and
  /// the IR references them by path relative to `base_dir`.
  std::optional<std::filesystem::path> tensor_dir;
  std::filesystem::path base_dir;
};

inline std::string file_stem_for(const std::string& id) {
  std::string s = id;
  for (char& c : s) {
    if (c == '/' || c == ':') c = '_';
  }
  return s;
}

inline TextDoc to_doc(const Graph& g, const SerializeOptions& opt = {}) {
  TextDoc doc;
  for (const auto& id : g.topo_order()) {
    const Node& n = g.node(id);
    TextNode t{n.id, op_name(n.op), n.inputs, n.attrs, 0};
    if (n.op == OpKind::kConst) {
      t.attrs.set("shape", format_shape(n.value.shape()));
      if (opt.tensor_dir) {
        const auto path = *opt.tensor_dir / (file_stem_for(id) + ".tqt");
        save_tensor(path, n.value);
        t.attrs.set("file", std::filesystem::relative(path, opt.base_dir).generic_string());
      } else {
        t.attrs.set("data", format_data(n.value));
      }
    }
    doc.nodes.push_back(std::move(t));
  }
  for (const auto& [name, grp] : g.groups()) {
    Attrs a;
    a.set("bits", grp.params.bits);
    a.set("signed", grp.params.is_signed);
    a.set("log2_t", grp.params.log2_t);
    a.set("role", grp.role.c_str());
    doc.groups[name] = a;
  }
  doc.outputs = g.outputs();
  return doc;
}

inline Graph from_doc(const TextDoc& doc, const std::filesystem::path& base_dir = {}) {
  Graph g;
  for (const auto& t : doc.nodes) {
    const std::string who = "node '" + t.id + "'";
    auto kind = op_from_name(t.op);
    if (!kind) throw ParseError(who + ": unknown op '" + t.op + "'");
    if (g.has(t.id)) throw ParseError(who + ": defined twice");
    Node n{t.id, *kind, t.inputs, t.attrs, Tensor()};
    if (*kind == OpKind::kConst) {
      try {
        const Shape shape = parse_shape(t.attrs.get_text("shape"));
        if (t.attrs.has("file")) {
          n.value = load_tensor<double>(base_dir / t.attrs.get_string("file"));
          if (n.value.shape() != shape) throw ParseError(who + ": file shape disagrees with attribute");
        } else {
          n.value = parse_data<double>(shape, t.attrs.get_text("data"), who);
        }
      } catch (const ParseError& e) {
        throw ParseError(std::string(e.what()).find(who) == 0 ? e.what() : who + ": " + e.what());
      } catch (const IoError& e) {
        throw ParseError(who + ": " + e.what());
      }
      n.attrs.erase("shape");
      n.attrs.erase("data");
      n.attrs.erase("file");
    }
    g.add(std::move(n));
  }
  for (const auto& [name, a] : doc.groups) {
    try {
      QuantGroup grp;
      grp.params = QuantizerParams(static_cast<int>(a.get_int("bits")), a.get_int("signed") != 0,
                                   a.get_double("log2_t"));
      grp.role = a.get_string("role", "act");
      g.groups()[name] = grp;
    } catch (const Error& e) {
      throw ParseError("group '" + name + "': " + e.what());
    }
  }
  g.outputs() = doc.outputs;
  g.validate();
  return g;
}

inline Graph parse_graph(const std::string& text, const std::filesystem::path& base_dir = {}) {
  return from_doc(parse_text(text), base_dir);
}

inline std::string serialize_graph(const Graph& g) { return format_text(to_doc(g)); }

inline Graph load_graph(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read graph " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_graph(ss.str(), path.parent_path());
}

/// Writes the IR; const payloads go to `<stem>_tensors/` next to it.
inline void save_graph(const Graph& g, const std::filesystem::path& path, bool external = true) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  SerializeOptions opt;
  opt.base_dir = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (external) opt.tensor_dir = opt.base_dir / (path.stem().string() + "_tensors");
  const std::string text = format_text(to_doc(g, opt));
  std::ofstream os(path);
  if (!os) throw IoError("cannot write graph " + path.string());
  os << text;
}

}  // namespace tqt::ir
