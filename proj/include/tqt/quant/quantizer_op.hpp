// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Tape-level quantizer nodes. `quantize` is the fused custom-gradient node;
// `quantize_unfused` builds the same function from primitives, using
// straight-through nodes so that round and ceil see identity gradients.

#include <cmath>

#include "tqt/core/tape.hpp"
#include "tqt/quant/quantizer.hpp"

namespace tqt::ops {

/// Fused quantizer. `log2_t` is a one-element variable.
inline Var quantize(Var x, Var log2_t, int bits, bool is_signed) {
  if (log2_t.value().size() != 1) throw DimensionError("quantize: log2_t must be scalar");
  const QuantizerParams q(bits, is_signed, log2_t.value()[0]);
  Tensor out = quantize_forward(x.value(), q);
  return detail::tape_of(x).custom({x, log2_t}, std::move(out), [bits, is_signed](const BackwardArgs& g) {
    const QuantizerParams q(bits, is_signed, (*g.inputs[1])[0]);
    QuantGrads qg = quantize_backward(*g.inputs[0], q, g.upstream);
    return std::vector<Tensor>{std::move(qg.grad_x), Tensor::scalar(qg.grad_log2_t)};
  });
}

/// Same quantizer composed from primitives.
inline Var quantize_unfused(Var x, Var log2_t, int bits, bool is_signed) {
  const QuantizerParams q(bits, is_signed, log2_t.value()[0]);
  Var c = straight_through(log2_t, [](double v) { return std::ceil(v); });
  Var s = mul_scalar(exp2(c), std::ldexp(1.0, -(is_signed ? bits - 1 : bits)));
  Var r = straight_through(div(x, s), bankers_round_real);
  Var k = clip(r, static_cast<double>(q.n()), static_cast<double>(q.p()));
  return mul(k, s);
}

}  // namespace tqt::ops
