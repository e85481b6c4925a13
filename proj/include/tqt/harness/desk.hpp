// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Desk-scale quantized retraining: a procedural 8-class image task, a small
// CNN that exercises every quantization topology, and the float / static /
// retrain training loops.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "tqt/calib/calibration.hpp"
#include "tqt/core/rng.hpp"
#include "tqt/core/tensor_io.hpp"
#include "tqt/fxp/lowering.hpp"
#include "tqt/ir/calibrate.hpp"
#include "tqt/ir/executor.hpp"
#include "tqt/ir/passes.hpp"
#include "tqt/ir/quantize_pass.hpp"
#include "tqt/optim/optim.hpp"

namespace tqt::harness {

// ---------------------------------------------------------------- data

struct Dataset {
  Tensor images;  // [N, H, W, C]
  std::vector<int> labels;
  int classes = 0;

  std::size_t size() const noexcept { return labels.size(); }

  Tensor batch_images(const std::vector<std::size_t>& idx) const {
    const std::size_t per = images.size() / size();
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor out(s);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                  out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
  }
  std::vector<int> batch_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  }
  Dataset slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = begin; i < std::min(end, size()); ++i) idx.push_back(i);
    return {batch_images(idx), batch_labels(idx), classes};
  }

  void validate() const {
    if (images.rank() != 4 || images.dim(0) != labels.size() || labels.empty()) {
      throw DimensionError("dataset: images " + shape_str(images.shape()) + " vs " +
                           std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || l >= classes) throw ContractError("dataset: label " + std::to_string(l) + " out of range");
    }
  }
};

struct DeskDataConfig {
  std::size_t train = 4000;
  std::size_t val = 1000;
  std::size_t side = 32;
  double noise = 0.6;
  std::uint64_t seed = 0;
};

struct DeskData {
  Dataset train;
  Dataset val;
};

/// Class c is an oriented grating: orientation (c mod 4) * 45 degrees,
/// low or high spatial frequency for c < 4 or c >= 4. Phase, colour
/// mixing, amplitude and offsets are random; white noise is added.
inline Dataset make_gratings(Rng& rng, std::size_t n, std::size_t side, double noise) {
  constexpr int kClasses = 8;
  Dataset ds{Tensor(Shape{n, side, side, 3}), std::vector<int>(n), kClasses};
  const double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(rng.below(kClasses));
    ds.labels[i] = c;
    const double theta = (c % 4) * pi / 4.0 + rng.uniform(-0.15, 0.15);
    const double cycles = (c < 4 ? 2.5 : 5.0) * rng.uniform(0.85, 1.15);
    const double k = 2.0 * pi * cycles / static_cast<double>(side);
    const double kx = k * std::cos(theta), ky = k * std::sin(theta);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double amp = rng.uniform(0.5, 1.0);
    double mix[3], off[3];
    for (int ch = 0; ch < 3; ++ch) {
      mix[ch] = rng.uniform(-1.0, 1.0);
      off[ch] = rng.uniform(-0.3, 0.3);
    }
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double v = amp * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
        for (int ch = 0; ch < 3; ++ch) {
          ds.images[((i * side + y) * side + x) * 3 + static_cast<std::size_t>(ch)] =
              mix[ch] * v + off[ch] + noise * rng.normal();
        }
      }
    }
  }
  return ds;
}

inline DeskData make_desk_data(const DeskDataConfig& cfg = {}) {
  if (cfg.train < 1 || cfg.val < 1 || cfg.side < 8) throw ContractError("desk data: bad configuration");
  Rng rng(cfg.seed ^ 0x5eedda7aull);
  DeskData d;
  d.train = make_gratings(rng, cfg.train, cfg.side, cfg.noise);
  d.val = make_gratings(rng, cfg.val, cfg.side, cfg.noise);
  return d;
}

/// Directory layout: images.tqt (float64 [N,H,W,C]) and labels.tqt (int32 [N]).
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  IntTensor labels(Shape{ds.size()});
  for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = ds.labels[i];
  save_tensor(dir / "images.tqt", ds.images);
  save_tensor(dir / "labels.tqt", labels);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.images = load_tensor<double>(dir / "images.tqt");
  const IntTensor labels = load_tensor<std::int32_t>(dir / "labels.tqt");
  ds.labels.assign(labels.data().begin(), labels.data().end());
  ds.classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------- network

/// conv3x3/2 relu6 -> dwconv3x3 relu -> conv1x1 + skip, relu -> two stride-2
/// branches (conv3x3 leaky_relu, conv1x1 relu) -> concat -> avg_pool -> fc.
inline ir::Graph build_desk_cnn(std::uint64_t seed = 0, std::size_t side = 32, int classes = 8) {
  using ir::OpKind;
  if (side % 4 != 0) throw ContractError("desk cnn: side must be a multiple of 4");
  Rng rng(seed ^ 0xc0ffee11ull);
  ir::Graph g;
  auto he = [&](Shape s, std::size_t fan_in) {
    return rng.normal_tensor(std::move(s), std::sqrt(2.0 / static_cast<double>(fan_in)));
  };
  auto window = [](std::int64_t stride, const char* pad = "same") {
    ir::Attrs a;
    a.set("stride", static_cast<long>(stride));
    a.set("pad", pad);
    return a;
  };
  auto conv = [&](const std::string& id, const std::string& x, OpKind op, Shape w, std::size_t fan_in,
                  std::int64_t stride, std::size_t out_ch) {
    g.add_const(id + ".w", he(std::move(w), fan_in));
    g.add_const(id + ".b", Tensor(Shape{out_ch}, 0.0));
    g.add(id, op, {x, id + ".w"}, window(stride));
    g.add(id + "b", OpKind::kBiasAdd, {id, id + ".b"});
    return id + "b";
  };
  constexpr std::size_t kC = 16;
  ir::Attrs in;
  in.set("shape", std::to_string(side) + "x" + std::to_string(side) + "x3");
  g.add("x", OpKind::kInput, {}, in);

  g.add("r1", OpKind::kRelu6, {conv("c1", "x", OpKind::kConv2d, {3, 3, 3, kC}, 27, 2, kC)});
  g.add("r2", OpKind::kRelu, {conv("c2", "r1", OpKind::kDepthwiseConv2d, {3, 3, kC, 1}, 9, 1, kC)});
  const std::string c3 = conv("c3", "r2", OpKind::kConv2d, {1, 1, kC, kC}, kC, 1, kC);
  g.add("add", OpKind::kEltwiseAdd, {c3, "r1"});
  g.add("r3", OpKind::kRelu, {"add"});

  ir::Attrs leak;
  leak.set("alpha", 0.1);
  g.add("l4a", OpKind::kLeakyRelu, {conv("c4a", "r3", OpKind::kConv2d, {3, 3, kC, kC}, 9 * kC, 2, kC)}, leak);
  g.add("r4b", OpKind::kRelu, {conv("c4b", "r3", OpKind::kConv2d, {1, 1, kC, kC}, kC, 2, kC)});
  g.add("cat", OpKind::kConcat, {"l4a", "r4b"});

  const auto k = static_cast<long>(side / 4);
  ir::Attrs pool = window(k, "valid");
  pool.set("k", k);
  g.add("pool", OpKind::kAvgPool, {"cat"}, pool);

  g.add_const("fc.w", he({2 * kC, static_cast<std::size_t>(classes)}, 2 * kC));
  g.add_const("fc.b", Tensor(Shape{static_cast<std::size_t>(classes)}, 0.0));
  g.add("fc", OpKind::kMatmul, {"pool", "fc.w"});
  g.add("logits", OpKind::kBiasAdd, {"fc", "fc.b"});
  g.outputs() = {"logits"};
  g.validate();
  return g;
}

/// Constants that act as weights or biases of a compute layer, looking
/// through quantize nodes. Fixed constants (pooling reciprocals, leaky
/// slopes) are excluded.
inline std::set<std::string> trainable_params(const ir::Graph& g) {
  using ir::OpKind;
  std::set<std::string> out;
  auto source = [&](std::string id) {
    while (g.node(id).op == OpKind::kQuantize) id = g.node(id).inputs[0];
    return id;
  };
  for (const auto& [id, n] : g.nodes()) {
    const bool weighted = ((n.op == OpKind::kConv2d || n.op == OpKind::kDepthwiseConv2d ||
                            n.op == OpKind::kMatmul) &&
                           n.attrs.get_int("from_avgpool", 0) == 0) ||
                          n.op == OpKind::kBiasAdd;
    if (!weighted || n.inputs.size() < 2) continue;
    const std::string s = source(n.inputs[1]);
    if (g.node(s).op == OpKind::kConst) out.insert(s);
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

struct EvalResult {
  double top1 = 0.0;  // percent
  double loss = 0.0;  // mean softmax cross-entropy
};

namespace detail {

inline std::string single_input(const ir::Graph& g) {
  const auto ins = g.input_ids();
  if (ins.size() != 1 || g.outputs().size() != 1) {
    throw ContractError("desk graphs need exactly one input and one output");
  }
  return ins[0];
}

inline Tensor logits_2d(const Tensor& y) {
  if (y.rank() < 2) throw DimensionError("logits need a batch axis, got " + shape_str(y.shape()));
  return y.reshaped(Shape{y.dim(0), y.size() / y.dim(0)});
}

inline void score(const Tensor& logits, const std::vector<int>& labels, std::size_t& correct, double& loss) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &logits[i * k];
    const auto best = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw DimensionError("label " + std::to_string(labels[i]) + " outside " + std::to_string(k) + " logits");
    }
    correct += best == static_cast<std::size_t>(labels[i]);
    const double mx = row[best];
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    loss += std::log(denom) - (row[labels[i]] - mx);
  }
}

inline std::vector<std::size_t> range_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return idx;
}

}  // namespace detail

/// Deterministic top-1 and loss over the whole dataset, in index order.
inline EvalResult evaluate(const ir::Graph& g, const Dataset& ds, const ir::RunOptions& opt = {},
                           std::size_t batch = 250) {
  const std::string in = detail::single_input(g);
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const auto idx = detail::range_indices(b, std::min(ds.size(), b + batch));
    const Tensor y = ir::evaluate(g, {{in, ds.batch_images(idx)}}, opt).at(g.outputs()[0]);
    detail::score(detail::logits_2d(y), ds.batch_labels(idx), correct, loss);
  }
  const double n = static_cast<double>(ds.size());
  return {100.0 * static_cast<double>(correct) / n, loss / n};
}

/// Same as evaluate(), on the integer runtime. Logits are dequantized only
/// to score them.
inline EvalResult evaluate_integer(const fxp::LoweredGraph& lg, const Dataset& ds, std::size_t batch = 250) {
  const auto ins = lg.input_ids();
  if (ins.size() != 1 || lg.outputs().size() != 1) throw ContractError("lowered graph needs one input and one output");
  const std::string src = lg.node(ins[0]).attrs.get_string("source");
  std::size_t correct = 0;
  double loss = 0.0;
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    const auto idx = detail::range_indices(b, std::min(ds.size(), b + batch));
    const auto feeds = fxp::quantize_feeds(lg, {{src, ds.batch_images(idx)}});
    const auto out = fxp::execute_integer(lg, feeds);
    detail::score(detail::logits_2d(out.at(lg.outputs()[0]).real()), ds.batch_labels(idx), correct, loss);
  }
  const double n = static_cast<double>(ds.size());
  return {100.0 * static_cast<double>(correct) / n, loss / n};
}

// ---------------------------------------------------------------- training

/// Optimisation recipe. Intervals are in steps at this recipe's batch.
struct TrainRecipe {
  std::size_t batch = 32;
  int epochs = 5;
  double weight_lr = 1e-3;
  double weight_decay = 0.94;
  long weight_interval = 300;
  double threshold_lr = 1e-2;
  double threshold_decay = 0.5;
  long threshold_interval = 200;
  long freeze_start = 300;
  long freeze_every = 50;
  long val_every = 200;
  std::size_t calib_samples = 50;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || epochs > 5) throw ContractError("epochs must be in [0, 5]");
    if (batch < 1) throw ContractError("batch must be >= 1");
    if (val_every < 1 || weight_interval < 1 || threshold_interval < 1 || freeze_every < 1) {
      throw ContractError("recipe intervals must be >= 1");
    }
  }
};

/// Float pre-training recipe.
inline TrainRecipe float_recipe() {
  TrainRecipe r;
  r.weight_lr = 4e-3;
  r.weight_interval = 250;
  r.weight_decay = 0.7;
  return r;
}

/// Quantized retraining recipe (fine-tuning from float weights).
inline TrainRecipe retrain_recipe() {
  TrainRecipe r;
  r.weight_lr = 2e-4;
  return r;
}

struct ValPoint {
  long step = 0;
  double top1 = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  ir::Graph graph;       // best validation checkpoint
  EvalResult initial;    // before any training step
  EvalResult best;       // at the best checkpoint
  double mean_last5 = 0.0;
  long best_step = 0;
  long steps = 0;
  std::vector<ValPoint> history;
  std::vector<std::string> threshold_names;
  std::vector<bool> frozen;
};

enum class TrainTarget { kFloat, kWeights, kWeightsAndThresholds };

namespace detail {

inline std::vector<std::size_t> shuffled(Rng& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

inline double staircase(double base, double factor, long interval, long step) {
  return base * std::pow(factor, static_cast<double>(step / interval));
}

}  // namespace detail

/// Callback invoked after each validation.
using ValidationHook = std::function<void(const ValPoint&)>;

/// Trains `g` on data.train and validates on data.val every recipe.val_every
/// steps and at the end. Float targets ignore quantize nodes. Threshold
/// training uses Adam on log2_t with incremental freezing.
inline TrainResult train_graph(ir::Graph g, const DeskData& data, TrainTarget target, const TrainRecipe& recipe,
                               const ValidationHook& hook = {}) {
  recipe.validate();
  data.train.validate();
  data.val.validate();
  const std::string in = detail::single_input(g);
  const bool quant = target != TrainTarget::kFloat;
  const bool train_th = target == TrainTarget::kWeightsAndThresholds;

  ir::RunOptions opt;
  opt.quantize = quant;
  opt.trainable_consts = trainable_params(g);
  opt.train_thresholds = train_th;
  ir::RunOptions eval_opt;
  eval_opt.quantize = quant;

  TrainResult res;
  for (const auto& [name, grp] : g.groups()) {
    if (!g.group_members(name).empty()) res.threshold_names.push_back(name);
  }
  const std::size_t nth = res.threshold_names.size();
  std::map<std::string, AdamState> w_adam;
  for (const auto& id : opt.trainable_consts) w_adam.emplace(id, AdamState(recipe.weight_lr, 0.9, 0.999));
  std::vector<AdamState> t_adam(nth, AdamState(recipe.threshold_lr, 0.9, 0.999));
  FreezeController freeze(nth, 24.0, static_cast<double>(recipe.freeze_start), recipe.freeze_every);

  res.initial = evaluate(g, data.val, eval_opt);
  res.best = res.initial;
  res.graph = g;
  res.frozen.assign(nth, false);
  auto validate_at = [&](long step) {
    const EvalResult e = evaluate(g, data.val, eval_opt);
    res.history.push_back({step, e.top1, e.loss});
    if (hook) hook(res.history.back());
    if (e.top1 > res.best.top1 || (e.top1 == res.best.top1 && e.loss < res.best.loss)) {
      res.best = e;
      res.best_step = step;
      res.graph = g;
    }
  };

  Rng rng(recipe.seed ^ 0x7a1eull);
  const std::size_t per_epoch = data.train.size() / recipe.batch;
  long step = 0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    const auto order = detail::shuffled(rng, data.train.size());
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * recipe.batch),
                                         order.begin() + static_cast<std::ptrdiff_t>((b + 1) * recipe.batch));
      Tape tape;
      ir::RunResult r = ir::run_graph(g, tape, {{in, data.train.batch_images(idx)}}, opt);
      Var logits = r.values.at(g.outputs()[0]);
      if (logits.value().rank() != 2) {
        logits = ops::reshape(logits, Shape{idx.size(), logits.value().size() / idx.size()});
      }
      const Var loss = ops::softmax_cross_entropy(logits, data.train.batch_labels(idx));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                            std::to_string(epoch) + ")");
      }
      tape.backprop(loss);

      const double wlr = detail::staircase(recipe.weight_lr, recipe.weight_decay, recipe.weight_interval, step);
      for (const auto& id : opt.trainable_consts) {
        Tensor& w = g.node(id).value;
        const Tensor upd = adam_step(w_adam.at(id), tape.grad(r.values.at(id)), wlr);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += upd[i];
      }
      if (train_th) {
        std::vector<double> grads(nth, 0.0), logs(nth, 0.0);
        for (std::size_t i = 0; i < nth; ++i) {
          const auto it = r.groups.find(res.threshold_names[i]);
          if (it != r.groups.end()) grads[i] = tape.grad(it->second)[0];
          logs[i] = g.group(res.threshold_names[i]).params.log2_t;
        }
        freeze.update(grads, logs);
        const double tlr =
            detail::staircase(recipe.threshold_lr, recipe.threshold_decay, recipe.threshold_interval, step);
        for (std::size_t i = 0; i < nth; ++i) {
          if (freeze.frozen()[i]) continue;
          g.group(res.threshold_names[i]).params.log2_t += adam_step(t_adam[i], grads[i], tlr);
        }
      }
      ++step;
      if (step % recipe.val_every == 0) validate_at(step);
    }
  }
  if (step == 0 || step % recipe.val_every != 0) {
    if (step > 0) validate_at(step);
  }
  res.steps = step;
  if (train_th) res.frozen = freeze.frozen();
  const std::size_t h = res.history.size();
  const std::size_t from = h > 5 ? h - 5 : 0;
  double s = 0.0;
  for (std::size_t i = from; i < h; ++i) s += res.history[i].top1;
  res.mean_last5 = h ? s / static_cast<double>(h - from) : res.initial.top1;
  return res;
}

/// Optimised, quantized and calibrated copy of a float graph. Calibration
/// uses the first recipe.calib_samples training images.
inline ir::Graph prepare_quantized(const ir::Graph& float_graph, const ir::PrecisionConfig& precision,
                                   TrainMode mode, const Dataset& calib, std::size_t calib_samples = 50) {
  ir::Graph q = ir::insert_quant_layers(ir::optimize(float_graph), precision);
  const Dataset batch = calib.slice(0, calib_samples);
  ir::calibrate_graph(q, {{detail::single_input(q), batch.images}}, init_thresholds(mode));
  return q;
}

/// Quantized run: calibrate per the mode's policy, then retrain unless the
/// mode is static or recipe.epochs is zero.
inline TrainResult train_quantized(const ir::Graph& float_graph, const DeskData& data,
                                   const ir::PrecisionConfig& precision, TrainMode mode,
                                   const TrainRecipe& recipe, const ValidationHook& hook = {}) {
  ir::Graph q = prepare_quantized(float_graph, precision, mode, data.train, recipe.calib_samples);
  TrainRecipe r = recipe;
  if (mode == TrainMode::kStatic) r.epochs = 0;
  const TrainTarget target =
      mode == TrainMode::kRetrainWtTh ? TrainTarget::kWeightsAndThresholds : TrainTarget::kWeights;
  return train_graph(std::move(q), data, target, r, hook);
}

/// Reads dir/train and dir/val, each in the save_dataset() layout.
inline DeskData load_desk_data(const std::filesystem::path& dir) {
  DeskData d{load_dataset(dir / "train"), load_dataset(dir / "val")};
  d.val.classes = d.train.classes = std::max(d.train.classes, d.val.classes);
  return d;
}

inline void save_desk_data(const DeskData& d, const std::filesystem::path& dir) {
  save_dataset(d.train, dir / "train");
  save_dataset(d.val, dir / "val");
}

/// File-level training run. `mode` is "float" or a quantized mode name; the
/// graph is a float graph either way.
struct TrainRunConfig {
  std::filesystem::path graph;
  std::filesystem::path data;
  std::string mode = "retrain-wt-th";
  ir::PrecisionConfig precision = ir::PrecisionConfig::int8();
  int epochs = 5;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
};

inline TrainResult run_training(const TrainRunConfig& cfg, const ValidationHook& hook = {}) {
  const ir::Graph g = ir::load_graph(cfg.graph);
  const DeskData data = load_desk_data(cfg.data);
  TrainRecipe r = cfg.mode == "float" ? float_recipe() : retrain_recipe();
  r.epochs = cfg.epochs;
  r.batch = cfg.batch;
  r.seed = cfg.seed;
  if (cfg.mode == "float") return train_graph(g, data, TrainTarget::kFloat, r, hook);
  return train_quantized(g, data, cfg.precision, parse_train_mode(cfg.mode), r, hook);
}

/// Mean change of ceil(log2 t) per threshold between two graphs sharing
/// group names.
inline double mean_ceil_deviation(const ir::Graph& before, const ir::Graph& after) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& [name, grp] : after.groups()) {
    if (!before.groups().count(name) || after.group_members(name).empty()) continue;
    s += std::ceil(grp.params.log2_t) - std::ceil(before.group(name).params.log2_t);
    ++n;
  }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace tqt::harness
