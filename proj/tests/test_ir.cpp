// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tqt/core/rng.hpp"
#include "tqt/ir/calibrate.hpp"
#include "tqt/ir/executor.hpp"
#include "tqt/ir/passes.hpp"
#include "tqt/ir/quantize_pass.hpp"

namespace tqt::ir {
namespace {

namespace fs = std::filesystem;

const fs::path kData = TQT_TEST_DATA_DIR;

Graph fixture(const std::string& name) { return load_graph(kData / "fixtures" / (name + ".ir")); }

std::string read_file(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tensor random_batch(const Graph& g, std::size_t n, std::uint64_t seed) {
  Shape s{n};
  const Shape per = parse_shape(g.node(g.input_ids().at(0)).attrs.get_text("shape"));
  s.insert(s.end(), per.begin(), per.end());
  Rng rng(seed);
  return rng.normal_tensor(s, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::fabs(a[i] - b[i]));
  return d;
}

std::size_t count_op(const Graph& g, OpKind k) {
  std::size_t n = 0;
  for (const auto& [id, node] : g.nodes()) n += node.op == k;
  return n;
}

// Text format

TEST(TextFormat, DoubleFormattingRoundTrips) {
  EXPECT_EQ(format_double(1.0), "1.0");
  EXPECT_EQ(format_double(-0.5), "-0.5");
  EXPECT_EQ(format_double(1e-5), "1.0000000000000001e-05");
  for (double v : {0.1, 1.0 / 3.0, -2.5e300, 6.02e23}) {
    EXPECT_EQ(std::get<double>(parse_attr_value(format_double(v))), v);
  }
  EXPECT_EQ(std::get<std::int64_t>(parse_attr_value("-3")), -3);
  EXPECT_EQ(std::get<std::string>(parse_attr_value("same")), "same");
}

TEST(TextFormat, ShapeStrings) {
  EXPECT_EQ(format_shape({3, 3, 2, 4}), "3x3x2x4");
  EXPECT_EQ(parse_shape("6x6x2"), (Shape{6, 6, 2}));
  EXPECT_THROW(parse_shape("6xx2"), ParseError);
  EXPECT_THROW(parse_shape("a"), ParseError);
}

TEST(Graph, EmptyGraphRoundTrips) {
  const Graph g = parse_graph("");
  EXPECT_EQ(g.size(), 0u);
  EXPECT_EQ(serialize_graph(g), "");
  EXPECT_EQ(parse_graph(serialize_graph(g)), g);
}

TEST(Graph, ParseSerializeRoundTrip) {
  for (const char* name : {"conv_relu6", "eltwise", "leaky_relu", "avgpool", "concat", "batchnorm",
                           "nested_concat", "identity_chain"}) {
    const Graph g = fixture(name);
    const std::string text = serialize_graph(g);
    const Graph back = parse_graph(text);
    EXPECT_EQ(back, g) << name;
    EXPECT_EQ(serialize_graph(back), text) << name;
  }
}

TEST(Graph, ConvReluFixtureContents) {
  const Graph g = fixture("conv_relu6");
  EXPECT_EQ(g.size(), 6u);
  EXPECT_EQ(g.node("c1").op, OpKind::kConv2d);
  EXPECT_EQ(g.node("c1").inputs, (std::vector<std::string>{"x", "w1"}));
  EXPECT_EQ(g.node("c1").attrs.get_string("pad"), "same");
  EXPECT_EQ(g.node("c1").attrs.get_int("stride"), 1);
  EXPECT_EQ(g.node("w1").value.shape(), (Shape{3, 3, 2, 4}));
  EXPECT_EQ(g.node("w1").value[0], 0.125);
  EXPECT_EQ(g.outputs(), (std::vector<std::string>{"r1"}));
}

TEST(Graph, ExternalTensorsRoundTrip) {
  const fs::path dir = fs::temp_directory_path() / "tqt_ir_ext";
  fs::remove_all(dir);
  Graph g = fixture("eltwise");
  g = insert_quant_layers(g);
  g.group("x").params.log2_t = 1.25;
  save_graph(g, dir / "model.ir");
  EXPECT_TRUE(fs::exists(dir / "model_tensors" / "w1.tqt"));
  EXPECT_NE(read_file(dir / "model.ir").find("file=model_tensors/w1.tqt"), std::string::npos);
  EXPECT_EQ(load_graph(dir / "model.ir"), g);
  fs::remove_all(dir);
}

TEST(Graph, GroupDirectiveRoundTrip) {
  const std::string text =
      "x = input() {shape=2}\n"
      "x.q = quantize(x) {group=x}\n"
      "group x {bits=8 log2_t=-1.5 role=act signed=0}\n"
      "outputs: x.q\n";
  const Graph g = parse_graph(text);
  EXPECT_EQ(g.group("x").params.bits, 8);
  EXPECT_FALSE(g.group("x").params.is_signed);
  EXPECT_EQ(g.group("x").params.log2_t, -1.5);
  EXPECT_EQ(serialize_graph(g), text);
}

void expect_parse_error(const std::string& text, const std::string& needle) {
  try {
    parse_graph(text);
    ADD_FAILURE() << "no error for: " << text;
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(Graph, ParseErrorsNameTheNode) {
  expect_parse_error("x = input() {shape=2}\nbad = relu(x\n", "node 'bad'");
  expect_parse_error("x = input() {shape=2}\nbad = relu(x\n", "malformed input list");
  expect_parse_error("x = input() {shape=2}\nr = relu(y)\n", "node 'r': unknown input 'y'");
  expect_parse_error("x = input() {shape=2}\nr = frobnicate(x)\n", "node 'r': unknown op");
  expect_parse_error("x = input() {shape=2}\nr = relu(x, x)\n", "node 'r'");
  expect_parse_error("w = const() {data=1.0,2.0 shape=3}\n", "node 'w'");
  expect_parse_error("w = const() {data=1.0,zz shape=2}\n", "node 'w'");
  expect_parse_error("x = input() {shape=2}\nq = quantize(x) {group=g}\n", "unknown group 'g'");
  expect_parse_error("a = relu(b)\nb = relu(a)\n", "cycle");
  expect_parse_error("x = input() {shape=2}\nx = input() {shape=2}\n", "node 'x'");
  expect_parse_error("x = input() {shape=2}\noutputs: y\n", "unknown node 'y'");
  expect_parse_error("x = input() {shape 2}\n", "node 'x'");
}

// Topological order

TEST(TopoOrder, Chain) {
  const Graph g = parse_graph("c = relu(b)\nb = relu(a)\na = input() {shape=1}\n");
  EXPECT_EQ(topo_order(g), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(TopoOrder, DiamondRespectsEdgesAndBreaksTiesById) {
  const Graph g = parse_graph(
      "x = input() {shape=1}\n"
      "z = relu(x)\n"
      "a = relu6(x)\n"
      "m = eltwise_add(z, a)\n");
  const auto order = topo_order(g);
  EXPECT_EQ(order, (std::vector<std::string>{"x", "a", "z", "m"}));
}

TEST(TopoOrder, DeterministicAndValidOnFixtures) {
  for (const char* name : {"eltwise", "concat", "batchnorm"}) {
    const Graph g = fixture(name);
    const auto order = topo_order(g);
    EXPECT_EQ(order, topo_order(parse_graph(serialize_graph(g)))) << name;
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
    EXPECT_EQ(pos.size(), g.size());
    for (const auto& [id, n] : g.nodes()) {
      for (const auto& in : n.inputs) EXPECT_LT(pos[in], pos[id]) << name << " " << id;
    }
  }
}

// Executor

TEST(Executor, ConvReluMatchesDirectOps) {
  const Graph g = fixture("conv_relu6");
  const Tensor x = random_batch(g, 3, 1);
  const Tensor y = evaluate1(g, x);
  Tape t;
  const Var v = ops::relu6(ops::bias_add(
      ops::conv2d(t.constant(x), t.constant(g.node("w1").value), 1, Padding::kSame),
      t.constant(g.node("b1").value)));
  EXPECT_EQ(y, v.value());
  EXPECT_EQ(y.shape(), (Shape{3, 6, 6, 4}));
}

TEST(Executor, FeedShapeIsChecked) {
  const Graph g = fixture("conv_relu6");
  try {
    evaluate1(g, Tensor(Shape{1, 5, 6, 2}));
    ADD_FAILURE();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("node 'x'"), std::string::npos);
  }
}

TEST(Executor, InferShapes) {
  const auto s = infer_shapes(fixture("avgpool"));
  EXPECT_EQ(s.at("c1"), (Shape{6, 6, 3}));
  EXPECT_EQ(s.at("pool"), (Shape{3, 3, 3}));
  EXPECT_EQ(s.at("w1"), (Shape{3, 3, 2, 3}));
}

// Passes

void expect_function_preserved(const Graph& before, const Graph& after, std::uint64_t seed) {
  const Tensor x = random_batch(before, 100, seed);
  EXPECT_LE(max_abs_diff(evaluate1(before, x), evaluate1(after, x)), 1e-8);
}

TEST(Passes, FoldBatchnormConvDepthwiseMatmul) {
  const Graph g = fixture("batchnorm");
  const Graph f = fold_batchnorm(g);
  EXPECT_EQ(count_op(f, OpKind::kBatchNorm), 0u);
  EXPECT_EQ(count_op(f, OpKind::kBiasAdd), 3u);
  EXPECT_FALSE(f.has("g1") || f.has("m2") || f.has("v3"));
  expect_function_preserved(g, f, 2);
}

TEST(Passes, FoldBatchnormFormula) {
  Graph g = parse_graph(
      "x = input() {shape=1x1x1}\n"
      "w = const() {data=2.0 shape=1x1x1x1}\n"
      "c = conv2d(x, w)\n"
      "ga = const() {data=3.0 shape=1}\n"
      "be = const() {data=0.5 shape=1}\n"
      "mu = const() {data=1.0 shape=1}\n"
      "va = const() {data=4.0 shape=1}\n"
      "bn = batch_norm(c, ga, be, mu, va) {eps=0.0}\n"
      "outputs: bn\n");
  const Graph f = fold_batchnorm(g);
  // w' = 2 * 3 / 2, b' = 0.5 - 1 * 3 / 2
  EXPECT_EQ(f.node("w").value[0], 3.0);
  EXPECT_EQ(f.node(f.node("bn").inputs[1]).value[0], -1.0);
  EXPECT_EQ(f.node("bn").op, OpKind::kBiasAdd);
}

TEST(Passes, IdentityBatchnormLeavesWeights) {
  Graph g = parse_graph(
      "x = input() {shape=2x2x2}\n"
      "w = const() {data=0.5,-1.0,2.0,0.25 shape=1x1x2x2}\n"
      "c = conv2d(x, w)\n"
      "ga = const() {data=1.0,1.0 shape=2}\n"
      "be = const() {data=0.0,0.0 shape=2}\n"
      "mu = const() {data=0.0,0.0 shape=2}\n"
      "va = const() {data=1.0,1.0 shape=2}\n"
      "bn = batch_norm(c, ga, be, mu, va) {eps=0.0}\n"
      "outputs: bn\n");
  const Graph f = fold_batchnorm(g);
  EXPECT_EQ(f.node("w").value, g.node("w").value);
  EXPECT_EQ(f.node(f.node("bn").inputs[1]).value, Tensor(Shape{2}, 0.0));
  expect_function_preserved(g, f, 3);
}

TEST(Passes, FoldBatchnormRejectsBadPredecessor) {
  Graph g = parse_graph(
      "x = input() {shape=2}\n"
      "r = relu(x)\n"
      "ga = const() {data=1.0,1.0 shape=2}\n"
      "bn = batch_norm(r, ga, ga, ga, ga)\n"
      "outputs: bn\n");
  try {
    fold_batchnorm(g);
    ADD_FAILURE();
  } catch (const TransformError& e) {
    EXPECT_NE(std::string(e.what()).find("node 'bn'"), std::string::npos);
  }
}

TEST(Passes, CollapseNestedConcat) {
  const Graph g = fixture("nested_concat");
  const Graph f = collapse_concat(g);
  EXPECT_FALSE(f.has("inner"));
  EXPECT_EQ(f.node("outer").inputs, (std::vector<std::string>{"a", "b", "c"}));
  expect_function_preserved(g, f, 4);
}

TEST(Passes, SpliceIdentity) {
  const Graph g = fixture("identity_chain");
  const Graph f = splice_identity(g);
  EXPECT_EQ(count_op(f, OpKind::kIdentity), 0u);
  EXPECT_EQ(f.node("b").inputs, (std::vector<std::string>{"a"}));
  expect_function_preserved(g, f, 5);
}

TEST(Passes, AvgPoolBecomesDepthwiseConv) {
  const Graph g = parse_graph(
      "x = input() {shape=4x4x3}\n"
      "p = avg_pool(x) {k=2}\n"
      "outputs: p\n");
  const Graph f = avgpool_to_dwconv(g);
  EXPECT_EQ(f.node("p").op, OpKind::kDepthwiseConv2d);
  EXPECT_EQ(f.node("p").attrs.get_int("from_avgpool"), 1);
  const Tensor& r = f.node("p.r").value;
  EXPECT_EQ(r.shape(), (Shape{2, 2, 3, 1}));
  for (double v : r.data()) EXPECT_EQ(v, 0.25);
  const Tensor ones(Shape{1, 4, 4, 3}, 1.0);
  EXPECT_EQ(evaluate1(f, ones), Tensor(Shape{1, 2, 2, 3}, 1.0));
  expect_function_preserved(g, f, 6);
}

TEST(Passes, OptimizePreservesFixtures) {
  std::uint64_t seed = 10;
  for (const char* name : {"conv_relu6", "eltwise", "leaky_relu", "avgpool", "concat", "batchnorm",
                           "nested_concat", "identity_chain"}) {
    SCOPED_TRACE(name);
    const Graph g = fixture(name);
    expect_function_preserved(g, optimize(g), seed++);
  }
}

// Quantization-layer insertion

Graph quantized_fixture(const std::string& name) { return insert_quant_layers(optimize(fixture(name))); }

TEST(QuantInsert, MatchesGoldenFiles) {
  const bool update = std::getenv("TQT_UPDATE_GOLDEN") != nullptr;
  for (const char* name : {"conv_relu6", "eltwise", "leaky_relu", "avgpool", "concat"}) {
    const std::string got = serialize_graph(quantized_fixture(name));
    const fs::path path = kData / "golden" / (std::string(name) + ".q.ir");
    if (update) {
      std::ofstream(path) << got;
      continue;
    }
    ASSERT_TRUE(fs::exists(path)) << path;
    EXPECT_EQ(got, read_file(path)) << name;
  }
}

TEST(QuantInsert, Idempotent) {
  for (const char* name : {"conv_relu6", "eltwise", "leaky_relu", "avgpool", "concat"}) {
    const Graph once = quantized_fixture(name);
    EXPECT_EQ(insert_quant_layers(once), once) << name;
  }
}

TEST(QuantInsert, ConvLayerStages) {
  const Graph q = quantized_fixture("conv_relu6");
  EXPECT_EQ(q.node("c1").inputs, (std::vector<std::string>{"x.q", "w1.q"}));
  EXPECT_EQ(q.group("w1").params, QuantizerParams(8, true, 0.0));
  EXPECT_EQ(q.group("w1").role, "weight");
  EXPECT_EQ(q.group("c1").params.bits, 16);
  EXPECT_EQ(q.group("c1").role, "acc");
  EXPECT_EQ(q.node("b1.q").attrs.get_string("group"), "c1");
  EXPECT_EQ(q.node("c1b").inputs, (std::vector<std::string>{"c1.q", "b1.q"}));
  // The output quantizer sits after relu6 and is unsigned.
  EXPECT_FALSE(q.has("c1b.q"));
  EXPECT_EQ(q.node("r1.q").inputs, (std::vector<std::string>{"r1"}));
  EXPECT_FALSE(q.group("r1").params.is_signed);
  EXPECT_EQ(q.outputs(), (std::vector<std::string>{"r1.q"}));
}

TEST(QuantInsert, Int4OnlyChangesWeights) {
  const Graph q = insert_quant_layers(optimize(fixture("conv_relu6")), PrecisionConfig::int4());
  EXPECT_EQ(q.group("w1").params.bits, 4);
  EXPECT_EQ(q.group("x").params.bits, 8);
  EXPECT_EQ(q.group("r1").params.bits, 8);
  EXPECT_EQ(q.group("c1").params.bits, 16);
}

TEST(QuantInsert, EltwiseInputsShareOneSignedGroup) {
  const Graph q = quantized_fixture("eltwise");
  const auto& add = q.node("add");
  const std::string ga = q.node(add.inputs[0]).attrs.get_string("group");
  const std::string gb = q.node(add.inputs[1]).attrs.get_string("group");
  EXPECT_EQ(ga, gb);
  EXPECT_TRUE(q.group(ga).params.is_signed);
  EXPECT_FALSE(q.groups().count("r1") && ga != "r1");
  EXPECT_FALSE(q.group("r2").params.is_signed);
}

TEST(QuantInsert, LeakyReluDecomposition) {
  const Graph q = quantized_fixture("leaky_relu");
  EXPECT_EQ(q.node("lr").op, OpKind::kMaximum);
  EXPECT_EQ(q.node("lr.alpha").value, Tensor::scalar(0.1));
  EXPECT_EQ(q.group("lr.alpha").params.bits, 16);
  EXPECT_EQ(q.group("c1b").params.bits, 16);
  EXPECT_EQ(q.group_members("c1b"), (std::vector<std::string>{"c1b.q", "lr.mul.q"}));
  EXPECT_EQ(q.node("lr.q").attrs.get_string("group"), "lr");
  EXPECT_EQ(q.group("lr").params.bits, 8);
  EXPECT_EQ(q.outputs(), (std::vector<std::string>{"lr.q"}));
  // Unquantized, the decomposition computes leaky relu exactly.
  RunOptions off;
  off.quantize = false;
  const Graph g = fixture("leaky_relu");
  const Tensor x = random_batch(g, 10, 7);
  EXPECT_LE(max_abs_diff(evaluate1(g, x), evaluate1(q, x, off)), 1e-12);
}

TEST(QuantInsert, AvgPoolHasNoSixteenBitStage) {
  const Graph q = quantized_fixture("avgpool");
  EXPECT_EQ(q.node("pool").op, OpKind::kDepthwiseConv2d);
  EXPECT_FALSE(q.groups().count("pool") && q.group("pool").params.bits == 16);
  EXPECT_EQ(q.group("pool.r").params.bits, 8);
  EXPECT_EQ(q.outputs(), (std::vector<std::string>{"pool.q"}));
  EXPECT_EQ(q.group("pool").params.bits, 8);
}

TEST(QuantInsert, ConcatOfThreeSharesOneGroup) {
  const Graph q = quantized_fixture("concat");
  const auto& cat = q.node("cat");
  ASSERT_EQ(cat.inputs.size(), 3u);
  std::set<std::string> groups;
  for (const auto& in : cat.inputs) {
    EXPECT_EQ(q.node(in).op, OpKind::kQuantize);
    groups.insert(q.node(in).attrs.get_string("group"));
  }
  EXPECT_EQ(groups.size(), 1u);
  EXPECT_TRUE(q.group(*groups.begin()).params.is_signed);
  EXPECT_EQ(q.outputs(), (std::vector<std::string>{"cat"}));
}

TEST(QuantInsert, UnsupportedNodesAreNamed) {
  const std::map<std::string, std::string> cases = {
      {"x = input() {shape=4x4x1}\np = avg_pool(x) {k=2}\noutputs: p\n", "node 'p'"},
      {"x = input() {shape=2}\ni = identity(x)\noutputs: i\n", "node 'i'"},
      {"x = input() {shape=2}\nl = leaky_relu(x) {alpha=0.1}\noutputs: l\n", "node 'l'"},
  };
  for (const auto& [text, needle] : cases) {
    try {
      insert_quant_layers(parse_graph(text));
      ADD_FAILURE() << text;
    } catch (const TransformError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  }
}

TEST(QuantInsert, QuantizedOutputsLieOnTheirGrid) {
  Graph q = quantized_fixture("eltwise");
  for (auto& [name, grp] : q.groups()) grp.params.log2_t = grp.role == "acc" ? 4.0 : 1.0;
  const Tensor y = evaluate1(q, random_batch(q, 4, 8));
  const auto& p = q.group("r2").params;
  for (double v : y.data()) {
    EXPECT_EQ(v, quantize_scalar(v, p));
    EXPECT_GE(v, 0.0);
  }
}

// Calibration

TEST(CalibrateGraph, WeightAndInputThresholds) {
  Graph q = quantized_fixture("conv_relu6");
  const Tensor x = random_batch(q, 16, 9);
  const auto rec = calibrate_graph(q, {{"x", x}}, {CalibMethod::kMax, CalibMethod::kMax});
  EXPECT_EQ(q.group("w1").params.log2_t, std::log2(calib_max(q.node("w1").value)));
  EXPECT_EQ(q.group("x").params.log2_t, std::log2(calib_max(x)));
  // The relu6 output is calibrated on values that already saw quantized inputs.
  RunOptions opt;
  std::set<std::string> before = {"w1", "x", "c1"};
  opt.active_groups = &before;
  Tape tape;
  const RunResult r = run_graph(q, tape, {{"x", x}}, opt);
  EXPECT_EQ(q.group("r1").params.log2_t, std::log2(calib_max(r.value("r1"))));
  EXPECT_EQ(rec.size(), q.groups().size());
}

TEST(CalibrateGraph, AllGroupsFiniteWithKlj) {
  for (const char* name : {"eltwise", "leaky_relu", "avgpool", "concat"}) {
    Graph q = quantized_fixture(name);
    calibrate_graph(q, {{"x", random_batch(q, 16, 11)}}, init_thresholds(TrainMode::kRetrainWtTh));
    for (const auto& [g, grp] : q.groups()) EXPECT_TRUE(std::isfinite(grp.params.log2_t)) << name << g;
    EXPECT_TRUE(evaluate1(q, random_batch(q, 2, 12)).all_finite());
  }
}

}  // namespace
}  // namespace tqt::ir
