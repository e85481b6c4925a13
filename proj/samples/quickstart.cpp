// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

// Quantize a small conv block, calibrate it, lower it to integer ops and
// confirm the integer path reproduces the emulated one.

#include <iostream>

#include "tqt/tqt.hpp"

int main() {
  using namespace tqt;

  const ir::Graph g = ir::parse_graph(
      "x = input() {shape=8x8x3}\n"
      "w = const() {data=0.5,-0.25,0.125,0.75,-0.5,0.25,0.0,0.375,-0.125 shape=1x1x3x3}\n"
      "b = const() {data=0.1,-0.2,0.05 shape=3}\n"
      "c = conv2d(x, w) {pad=same stride=1}\n"
      "cb = bias_add(c, b)\n"
      "r = relu(cb)\n"
      "outputs: r\n");

  ir::Graph q = ir::insert_quant_layers(ir::optimize(g), ir::PrecisionConfig::int8());

  Rng rng(7);
  const Tensor calib = rng.normal_tensor({32, 8, 8, 3});
  ir::calibrate_graph(q, {{"x", calib}}, init_thresholds(TrainMode::kRetrainWtTh));
  for (const auto& [name, grp] : q.groups()) {
    const auto& p = grp.params;
    std::cout << name << ": b=" << p.bits << (p.is_signed ? " signed" : " unsigned") << " log2_t=" << p.log2_t
              << " f=" << p.frac_len() << '\n';
  }

  const fxp::LoweredGraph lg = fxp::lower(q);
  const auto rep = fxp::bitexact_check(q, lg, 20);
  std::cout << rep.summary() << '\n';
  return rep.ok() ? 0 : 1;
}
