// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tqt/harness/checks.hpp"
#include "tqt/tqt.hpp"

namespace fs = std::filesystem;
using namespace tqt;

namespace {

struct CommonOpts {
  std::string graph;
  std::string data;
  std::string mode = "retrain-wt-th";
  std::string precision = "INT8";
  int bits_w = 0;
  int bits_a = 0;
  std::uint64_t seed = 0;
  int epochs = 5;
  std::string out;
};

ir::PrecisionConfig precision_of(const CommonOpts& o) {
  ir::PrecisionConfig p = ir::PrecisionConfig::parse(o.precision);
  if (o.bits_w > 0) p.weight_bits = o.bits_w;
  if (o.bits_a > 0) p.act_bits = o.bits_a;
  return p;
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw ContractError(std::string("missing required flag ") + flag);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// A dataset directory, or its val/ split when present.
harness::Dataset eval_split(const std::string& dir) {
  const fs::path p(dir);
  return fs::exists(p / "val") ? harness::load_dataset(p / "val") : harness::load_dataset(p);
}

void save_or_print(const ir::Graph& g, const std::string& out) {
  if (out.empty()) {
    std::cout << ir::serialize_graph(g);
  } else {
    ir::save_graph(g, out);
  }
}

bool has_quantizers(const ir::Graph& g) {
  for (const auto& [id, n] : g.nodes()) {
    if (n.op == ir::OpKind::kQuantize) return true;
  }
  return false;
}

// ---------------------------------------------------------------- commands

int cmd_transform(const CommonOpts& o, const std::string& passes) {
  require(o.graph, "--graph");
  ir::Graph g = ir::load_graph(o.graph);
  std::stringstream ss(passes);
  std::string p;
  while (std::getline(ss, p, ',')) {
    if (p == "all") g = ir::optimize(std::move(g));
    else if (p == "fold_batchnorm") g = ir::fold_batchnorm(std::move(g));
    else if (p == "collapse_concat") g = ir::collapse_concat(std::move(g));
    else if (p == "splice_identity") g = ir::splice_identity(std::move(g));
    else if (p == "avgpool_to_dwconv") g = ir::avgpool_to_dwconv(std::move(g));
    else throw ContractError("unknown pass '" + p + "'");
  }
  save_or_print(g, o.out);
  return 0;
}

int cmd_quantize(const CommonOpts& o) {
  require(o.graph, "--graph");
  save_or_print(ir::insert_quant_layers(ir::optimize(ir::load_graph(o.graph)), precision_of(o)), o.out);
  return 0;
}

int cmd_calibrate(const CommonOpts& o, std::size_t samples) {
  require(o.graph, "--graph");
  require(o.data, "--data");
  ir::Graph g = ir::load_graph(o.graph);
  if (!has_quantizers(g)) g = ir::insert_quant_layers(ir::optimize(std::move(g)), precision_of(o));
  const fs::path d(o.data);
  const harness::Dataset ds =
      fs::exists(d / "train") ? harness::load_dataset(d / "train") : harness::load_dataset(d);
  const auto in = g.input_ids();
  if (in.size() != 1) throw ContractError("calibrate needs a single-input graph");
  const auto rows = ir::calibrate_graph(g, {{in[0], ds.slice(0, samples).images}},
                                        init_thresholds(parse_train_mode(o.mode)));
  write_calibration_csv(std::cout, rows);
  if (!o.out.empty()) ir::save_graph(g, o.out);
  return 0;
}

int cmd_train(const CommonOpts& o, std::size_t batch) {
  require(o.graph, "--graph");
  require(o.data, "--data");
  require(o.out, "--out");
  harness::TrainRunConfig cfg;
  cfg.graph = o.graph;
  cfg.data = o.data;
  cfg.mode = o.mode;
  cfg.precision = precision_of(o);
  cfg.epochs = o.epochs;
  cfg.batch = batch;
  cfg.seed = o.seed;
  const fs::path out(o.out);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.csv");
  metrics << "step,top1,loss\n";
  const auto r = harness::run_training(cfg, [&](const harness::ValPoint& v) {
    metrics << v.step << ',' << fmt(v.top1) << ',' << fmt(v.loss) << '\n';
    std::cerr << "step " << v.step << " top1 " << fmt(v.top1) << " loss " << fmt(v.loss) << '\n';
  });
  ir::save_graph(r.graph, out / "model.ir");
  std::cout << "mode,precision,initial_top1,best_top1,best_loss,best_step,mean_last5,steps\n"
            << o.mode << ',' << (o.mode == "float" ? "float" : cfg.precision.name) << ','
            << fmt(r.initial.top1) << ',' << fmt(r.best.top1) << ',' << fmt(r.best.loss) << ','
            << r.best_step << ',' << fmt(r.mean_last5) << ',' << r.steps << '\n';
  return 0;
}

int cmd_lower(const CommonOpts& o) {
  require(o.graph, "--graph");
  require(o.out, "--out");
  const auto lg = fxp::lower(ir::load_graph(o.graph));
  fxp::save_bundle(lg, o.out);
  std::cout << "nodes," << lg.nodes().size() << "\nbundle," << o.out << '\n';
  return 0;
}

int cmd_infer(const CommonOpts& o) {
  require(o.graph, "--graph");
  require(o.data, "--data");
  const harness::Dataset ds = eval_split(o.data);
  harness::EvalResult e;
  std::string path;
  if (fs::is_directory(o.graph)) {
    e = harness::evaluate_integer(fxp::load_bundle(o.graph), ds);
    path = "integer";
  } else {
    e = harness::evaluate(ir::load_graph(o.graph), ds);
    path = "emulated";
  }
  std::cout << "path,samples,top1,loss\n" << path << ',' << ds.size() << ',' << fmt(e.top1) << ',' << fmt(e.loss) << '\n';
  return 0;
}

int cmd_bitexact(const CommonOpts& o, std::size_t trials) {
  require(o.graph, "--graph");
  const ir::Graph g = ir::load_graph(o.graph);
  const auto lg = fxp::lower(g);
  const auto rep = fxp::bitexact_check(g, lg, trials, o.seed + 1);
  std::cout << "trials,compared,mismatches,first_node\n"
            << rep.trials << ',' << rep.compared << ',' << rep.mismatches << ',' << rep.first_node << '\n';
  if (!rep.ok()) throw OverflowError("bit-exactness violated: " + rep.summary());
  return 0;
}

struct ToyOpts {
  int bits = 8;
  double sigma = 1.0;
  std::string optimizer = "log-adam";
  double alpha = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  long steps = 2000;
  std::size_t batch = 1000;
  bool compare_clipped = false;
};

int cmd_toy(const CommonOpts& o, const ToyOpts& t) {
  if (t.compare_clipped) {
    harness::ClipCompareConfig c;
    c.bits = t.bits;
    c.sigma = t.sigma;
    c.seed = o.seed;
    const auto r = harness::compare_clipped_vs_tqt(c);
    std::cout << "loss_tqt,loss_clipped,t_tqt,t_clipped,max_abs\n"
              << fmt(r.loss_tqt) << ',' << fmt(r.loss_clipped) << ',' << fmt(r.t_tqt) << ','
              << fmt(r.t_clipped) << ',' << fmt(r.max_abs) << '\n';
    return 0;
  }
  harness::ToyRunConfig c;
  c.bits = t.bits;
  c.sigma = t.sigma;
  c.optimizer = harness::parse_toy_optimizer(t.optimizer);
  c.alpha = t.alpha;
  c.beta1 = t.beta1;
  c.beta2 = t.beta2;
  c.steps = t.steps;
  c.batch = t.batch;
  c.seed = o.seed;
  const auto tr = harness::toy_l2_run(c);
  if (!o.out.empty()) {
    std::ofstream os(o.out);
    if (!os) throw IoError("cannot write " + o.out);
    os << "step,log2_t,loss,grad\n";
    for (std::size_t i = 0; i < tr.log2_t.size(); ++i) {
      os << i << ',' << fmt(tr.log2_t[i]) << ',' << fmt(tr.loss[i]) << ',' << fmt(tr.grad[i]) << '\n';
    }
  }
  const auto rep = harness::measure_oscillation(tr);
  std::cout << "diverged,final_log2_t,boundary,period,r_g,max_deviation,crossings,reliable\n"
            << tr.diverged << ',' << fmt(tr.log2_t.back()) << ',' << rep.boundary << ',' << fmt(rep.period)
            << ',' << fmt(rep.r_g) << ',' << fmt(rep.max_deviation) << ',' << rep.crossings << ','
            << rep.reliable << '\n';
  return 0;
}

int cmd_gradcheck(const CommonOpts& o, std::size_t points) {
  const auto g = harness::quantizer_gradcheck(points, o.seed + 2);
  const auto f = harness::fused_unfused_check(points, o.seed + 3);
  std::cout << "points,max_rel_err_x,max_rel_err_log2_t,sign_mismatches,fakequant_inner_nonzero,"
               "fused_forward_mismatches,fused_max_ulp\n"
            << g.points << ',' << fmt(g.max_rel_err_x) << ',' << fmt(g.max_rel_err_log2_t) << ','
            << g.inner_sign_mismatches << ',' << g.fakequant_inner_nonzero << ',' << f.forward_mismatches << ','
            << std::max(f.max_ulp_grad_x, f.max_ulp_grad_log2_t) << '\n';
  if (!g.ok() || !f.ok()) throw InternalError("gradient check failed");
  return 0;
}

int cmd_guidelines(const std::vector<int>& bits) {
  std::cout << "b,alpha_max,beta1_min,beta2_min,steps_estimate\n";
  for (int b : bits) {
    const auto g = adam_guidelines(b);
    std::cout << b << ',' << fmt(g.alpha_max) << ',' << fmt(g.beta1_min) << ',' << fmt(g.beta2_min) << ','
              << fmt(g.steps_estimate) << '\n';
  }
  return 0;
}

int cmd_dataset(const CommonOpts& o, const harness::DeskDataConfig& cfg) {
  require(o.out, "--out");
  harness::DeskDataConfig c = cfg;
  c.seed = o.seed;
  harness::save_desk_data(harness::make_desk_data(c), o.out);
  std::cout << "train," << c.train << "\nval," << c.val << '\n';
  return 0;
}

int cmd_model(const CommonOpts& o) {
  save_or_print(harness::build_desk_cnn(o.seed), o.out);
  return 0;
}

void print_error(const char* kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trained power-of-2 quantization thresholds toolkit"};
  app.require_subcommand(1);
  CommonOpts o;
  ToyOpts toy;
  std::string passes = "all";
  std::size_t samples = 50, batch = 32, trials = 100, points = 1000;
  std::vector<int> guide_bits{2, 4, 8};
  harness::DeskDataConfig data_cfg;

  auto graph_flag = [&](CLI::App* c) { c->add_option("--graph", o.graph, "Graph IR file"); };
  auto data_flag = [&](CLI::App* c) { c->add_option("--data", o.data, "Dataset directory"); };
  auto out_flag = [&](CLI::App* c, const char* what) { c->add_option("--out", o.out, what); };
  auto precision_flags = [&](CLI::App* c) {
    c->add_option("--precision", o.precision, "INT8 or INT4");
    c->add_option("--bits-w", o.bits_w, "Override weight bit-width");
    c->add_option("--bits-a", o.bits_a, "Override activation bit-width");
  };
  auto seed_flag = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed"); };

  auto* transform = app.add_subcommand("transform", "Apply graph passes");
  graph_flag(transform);
  out_flag(transform, "Output graph");
  transform->add_option("--passes", passes,
                        "Comma list: all, fold_batchnorm, collapse_concat, splice_identity, avgpool_to_dwconv");

  auto* quantize = app.add_subcommand("quantize", "Optimise and insert quantization layers");
  graph_flag(quantize);
  precision_flags(quantize);
  out_flag(quantize, "Output graph");

  auto* calibrate = app.add_subcommand("calibrate", "Initialise thresholds from data");
  graph_flag(calibrate);
  data_flag(calibrate);
  precision_flags(calibrate);
  calibrate->add_option("--mode", o.mode, "static, retrain-wt or retrain-wt-th");
  calibrate->add_option("--samples", samples, "Calibration batch size");
  out_flag(calibrate, "Output graph");

  auto* train = app.add_subcommand("train", "Float or quantized training on a dataset");
  graph_flag(train);
  data_flag(train);
  precision_flags(train);
  seed_flag(train);
  train->add_option("--mode", o.mode, "float, static, retrain-wt or retrain-wt-th");
  train->add_option("--epochs", o.epochs, "Epochs (0-5)");
  train->add_option("--batch", batch, "Minibatch size");
  out_flag(train, "Output directory");

  auto* lower = app.add_subcommand("lower", "Lower a quantized graph to an integer bundle");
  graph_flag(lower);
  out_flag(lower, "Bundle directory");

  auto* infer = app.add_subcommand("infer", "Evaluate a graph or integer bundle on a dataset");
  infer->add_option("--graph", o.graph, "Graph IR file or bundle directory");
  data_flag(infer);

  auto* bitexact = app.add_subcommand("bitexact", "Compare emulated and integer execution");
  graph_flag(bitexact);
  seed_flag(bitexact);
  bitexact->add_option("--trials", trials, "Random inputs");

  auto* toy_cmd = app.add_subcommand("toy", "Single-quantizer L2 experiments");
  seed_flag(toy_cmd);
  out_flag(toy_cmd, "Trajectory CSV");
  toy_cmd->add_option("--bits", toy.bits);
  toy_cmd->add_option("--sigma", toy.sigma);
  toy_cmd->add_option("--optimizer", toy.optimizer, "raw-sgd, log-sgd, log-adam or normed-log-sgd");
  toy_cmd->add_option("--alpha", toy.alpha);
  toy_cmd->add_option("--beta1", toy.beta1);
  toy_cmd->add_option("--beta2", toy.beta2);
  toy_cmd->add_option("--steps", toy.steps);
  toy_cmd->add_option("--batch", toy.batch);
  toy_cmd->add_flag("--compare-clipped", toy.compare_clipped, "Run the clipped-gradient comparison");

  auto* gradcheck = app.add_subcommand("gradcheck", "Check quantizer gradients");
  seed_flag(gradcheck);
  gradcheck->add_option("--points", points);

  auto* guidelines = app.add_subcommand("guidelines", "Adam settings for log-threshold training");
  guidelines->add_option("--bits", guide_bits, "Bit-widths")->delimiter(',');

  auto* dataset = app.add_subcommand("dataset", "Write the synthetic image dataset");
  seed_flag(dataset);
  out_flag(dataset, "Output directory");
  dataset->add_option("--train", data_cfg.train);
  dataset->add_option("--val", data_cfg.val);
  dataset->add_option("--noise", data_cfg.noise);

  auto* model = app.add_subcommand("model", "Write the untrained desk CNN");
  seed_flag(model);
  out_flag(model, "Output graph");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() != 0) {
      print_error("usage", e.what());
      return 2;
    }
    return app.exit(e);
  }

  try {
    if (*transform) return cmd_transform(o, passes);
    if (*quantize) return cmd_quantize(o);
    if (*calibrate) return cmd_calibrate(o, samples);
    if (*train) return cmd_train(o, batch);
    if (*lower) return cmd_lower(o);
    if (*infer) return cmd_infer(o);
    if (*bitexact) return cmd_bitexact(o, trials);
    if (*toy_cmd) return cmd_toy(o, toy);
    if (*gradcheck) return cmd_gradcheck(o, points);
    if (*guidelines) return cmd_guidelines(guide_bits);
    if (*dataset) return cmd_dataset(o, data_cfg);
    if (*model) return cmd_model(o);
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
