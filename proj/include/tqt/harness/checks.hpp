// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Self-checks of the quantizer against independent references: a
// brute-force grid search, finite differences of the straight-through
// surrogate, the primitive-composed quantizer, and exact rational arithmetic
// for the affine product.

#include <algorithm>
#include <array>
#include <bit>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "tqt/core/rng.hpp"
#include "tqt/core/tape.hpp"
#include "tqt/quant/quantizer.hpp"
#include "tqt/quant/quantizer_op.hpp"

namespace tqt::harness {

/// Distance in units in the last place.
inline std::uint64_t ulp_distance(double a, double b) {
  if (a == b) return 0;
  auto key = [](double v) {
    const auto i = std::bit_cast<std::int64_t>(v);
    return i < 0 ? std::numeric_limits<std::int64_t>::min() - i : i;
  };
  const std::int64_t ka = key(a), kb = key(b);
  return ka > kb ? static_cast<std::uint64_t>(ka - kb) : static_cast<std::uint64_t>(kb - ka);
}

// ---------------------------------------------------------------- forward

struct OracleReport {
  std::size_t compared = 0;
  std::size_t mismatches = 0;
  double first_x = 0.0;
  int first_bits = 0;
  bool first_signed = false;
};

/// Nearest grid level by enumeration of every k in [n, p]; ties go to the
/// even k.
inline double nearest_level(double x, int bits, bool is_signed, double s) {
  const std::int64_t n = is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
  const std::int64_t p = is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
  std::int64_t best = n;
  double best_d = std::fabs(static_cast<double>(n) * s - x);
  for (std::int64_t k = n + 1; k <= p; ++k) {
    const double d = std::fabs(static_cast<double>(k) * s - x);
    if (d < best_d || (d == best_d && k % 2 == 0)) {
      best = k;
      best_d = d;
    }
  }
  return static_cast<double>(best) * s;
}

/// quantize_forward against nearest_level over (b, signed) in {3,4,8} x
/// {signed, unsigned}, `per_config` scalars each. A quarter of the inputs
/// sit exactly on half-steps to exercise ties.
inline OracleReport quantizer_oracle_check(std::size_t per_config = 10000, std::uint64_t seed = 1) {
  Rng rng(seed);
  OracleReport rep;
  for (int bits : {3, 4, 8}) {
    for (bool sgn : {true, false}) {
      for (std::size_t i = 0; i < per_config; ++i) {
        const QuantizerParams q(bits, sgn, rng.uniform(-6.0, 6.0));
        const double s = q.scale();
        const double lo = static_cast<double>(q.n()) - 4.0, hi = static_cast<double>(q.p()) + 4.0;
        double u = rng.uniform(lo, hi);
        if (i % 4 == 0) u = std::floor(u) + 0.5;
        const double x = u * s;
        const Tensor y = quantize_forward(Tensor::from({x}), q);
        ++rep.compared;
        if (y[0] != nearest_level(x, bits, sgn, s) && rep.mismatches++ == 0) {
          rep.first_x = x;
          rep.first_bits = bits;
          rep.first_signed = sgn;
        }
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------- gradients

struct GradcheckReport {
  std::size_t points = 0;
  double max_rel_err_x = 0.0;
  double max_rel_err_log2_t = 0.0;
  std::size_t inner_sign_mismatches = 0;   // threshold gradient vs s ln2 (round(x/s) - x/s)
  std::size_t fakequant_inner_nonzero = 0;  // clipped baseline limit gradients inside (n, p)
  double tolerance = 1e-4;

  bool ok() const {
    return max_rel_err_x < tolerance && max_rel_err_log2_t < tolerance && inner_sign_mismatches == 0 &&
           fakequant_inner_nonzero == 0;
  }
};

namespace detail {

// Straight-through surrogate of up * q(x): round and ceil offsets are frozen
// at the base point, so its derivatives are what the custom gradient claims.
inline double surrogate(double x, double l, double up, double c_round, double c_ceil, int bits, bool sgn,
                        int region) {
  const double s = std::exp2(l + c_ceil) / std::ldexp(1.0, sgn ? bits - 1 : bits);
  const QuantizerParams q(bits, sgn, 0.0);
  const double k = region < 0 ? static_cast<double>(q.n())
                   : region > 0 ? static_cast<double>(q.p())
                                : x / s + c_round;
  return up * k * s;
}

inline double rel_err(double fd, double an) {
  const double scale = std::max({std::fabs(fd), std::fabs(an), 1e-8});
  return std::fabs(fd - an) / scale;
}

}  // namespace detail

/// Central differences (step h) of the surrogate at random points at least
/// 1e-3 away from rounding and ceiling discontinuities.
inline GradcheckReport quantizer_gradcheck(std::size_t points = 1000, std::uint64_t seed = 2, double h = 1e-4) {
  Rng rng(seed);
  GradcheckReport rep;
  for (std::size_t i = 0; i < points; ++i) {
    const int bits = std::array{3, 4, 8}[i % 3];
    const bool sgn = (i / 3) % 2 == 0;
    double l = rng.uniform(-3.0, 3.0);
    while (std::fabs(l - std::round(l)) < 1e-3) l = rng.uniform(-3.0, 3.0);
    const QuantizerParams q(bits, sgn, l);
    const double s = q.scale();
    double u;
    do {
      u = rng.uniform(static_cast<double>(q.n()) - 3.0, static_cast<double>(q.p()) + 3.0);
    } while (std::fabs(u - std::floor(u) - 0.5) < 1e-3);
    const double x = u * s;
    const double up = rng.uniform(0.5, 2.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    const double r = bankers_round_real(u);
    const int region = r < q.n() ? -1 : r > q.p() ? 1 : 0;
    const double c_round = r - u, c_ceil = std::ceil(l) - l;

    const QuantGrads g = quantize_backward(Tensor::from({x}), q, Tensor::from({up}));
    auto f = [&](double xx, double ll) { return detail::surrogate(xx, ll, up, c_round, c_ceil, bits, sgn, region); };
    const double fd_l = (f(x, l + h) - f(x, l - h)) / (2.0 * h);
    const double fd_x = (f(x + h * s, l) - f(x - h * s, l)) / (2.0 * h * s);
    rep.max_rel_err_log2_t = std::max(rep.max_rel_err_log2_t, detail::rel_err(fd_l, g.grad_log2_t));
    rep.max_rel_err_x = std::max(rep.max_rel_err_x, detail::rel_err(fd_x, g.grad_x[0]));

    if (region == 0) {
      const QuantGrads unit = quantize_backward(Tensor::from({x}), q, Tensor::from({1.0}));
      const double want = s * std::numbers::ln2 * (r - u);
      if ((unit.grad_log2_t > 0) != (want > 0) || (unit.grad_log2_t < 0) != (want < 0)) {
        ++rep.inner_sign_mismatches;
      }
    }
    ++rep.points;
  }
  // Clipped baseline: limit gradients vanish strictly inside (n, p).
  for (std::size_t i = 0; i < points; ++i) {
    const double n_th = -rng.uniform(0.5, 2.0), p_th = rng.uniform(0.5, 2.0);
    const double x = rng.uniform(n_th, p_th);
    if (x <= n_th || x >= p_th) continue;
    const FakeQuantResult fq = fakequant_clipped(Tensor::from({x}), n_th, p_th, std::array{3, 4, 8}[i % 3]);
    if (fq.grad_n[0] != 0.0 || fq.grad_p[0] != 0.0) ++rep.fakequant_inner_nonzero;
  }
  return rep;
}

// ---------------------------------------------------------------- fused vs unfused

struct FusedReport {
  std::size_t tensors = 0;
  std::size_t forward_mismatches = 0;
  std::uint64_t max_ulp_grad_x = 0;
  std::uint64_t max_ulp_grad_log2_t = 0;

  bool ok() const { return forward_mismatches == 0 && max_ulp_grad_x <= 1 && max_ulp_grad_log2_t <= 1; }
};

/// The fused quantizer node against the primitive composition with
/// straight-through wiring, on random tensors and upstream gradients.
inline FusedReport fused_unfused_check(std::size_t tensors = 1000, std::uint64_t seed = 3) {
  Rng rng(seed);
  FusedReport rep;
  for (std::size_t t = 0; t < tensors; ++t) {
    const int bits = std::array{2, 3, 4, 8, 16}[t % 5];
    const bool sgn = t % 3 != 0;
    const double l = rng.uniform(-4.0, 4.0);
    const std::size_t n = 1 + rng.below(64);
    const Tensor x = rng.normal_tensor({n}, std::exp2(rng.uniform(-4.0, 4.0)));
    const Tensor up = rng.normal_tensor({n});
    Tape t1, t2;
    const Var x1 = t1.leaf(x), l1 = t1.leaf(Tensor::scalar(l));
    const Var x2 = t2.leaf(x), l2 = t2.leaf(Tensor::scalar(l));
    const Var y1 = ops::quantize(x1, l1, bits, sgn);
    const Var y2 = ops::quantize_unfused(x2, l2, bits, sgn);
    for (std::size_t i = 0; i < n; ++i) rep.forward_mismatches += y1.value()[i] != y2.value()[i];
    t1.backprop(ops::sum(ops::mul(y1, t1.constant(up))));
    t2.backprop(ops::sum(ops::mul(y2, t2.constant(up))));
    rep.max_ulp_grad_log2_t = std::max(rep.max_ulp_grad_log2_t, ulp_distance(t1.grad(l1)[0], t2.grad(l2)[0]));
    const Tensor g1 = t1.grad(x1), g2 = t2.grad(x2);
    for (std::size_t i = 0; i < n; ++i) rep.max_ulp_grad_x = std::max(rep.max_ulp_grad_x, ulp_distance(g1[i], g2[i]));
    ++rep.tensors;
  }
  return rep;
}

// ---------------------------------------------------------------- affine

struct AffineReport {
  std::size_t sets = 0;
  std::size_t reconstruction_failures = 0;
  std::size_t symmetric_failures = 0;

  bool ok() const { return reconstruction_failures == 0 && symmetric_failures == 0; }
};

/// Exact rational check: s3 (q3_full - z3) equals r1 r2 with
/// r_i = s_i (q_i - z_i), and with zero-points cleared the full and
/// symmetric paths agree.
inline AffineReport affine_identity_check(std::size_t sets = 10000, std::uint64_t seed = 4) {
  using Q = boost::multiprecision::cpp_rational;
  Rng rng(seed);
  auto rat = [&] { return Q(1 + static_cast<long>(rng.below(1000)), 1 + static_cast<long>(rng.below(1000))); };
  auto small = [&] { return static_cast<std::int64_t>(rng.below(256)) - 128; };
  AffineReport rep;
  for (std::size_t i = 0; i < sets; ++i) {
    AffineParams<Q> a{rat(), rat(), rat(), small(), small(), small()};
    const std::int64_t q1 = small(), q2 = small();
    const auto full = affine_product_demo(q1, q2, a);
    const Q r1 = a.s1 * Q(q1 - a.z1), r2 = a.s2 * Q(q2 - a.z2);
    rep.reconstruction_failures += a.s3 * (full.q3_full - Q(a.z3)) != r1 * r2;
    a.z1 = a.z2 = a.z3 = 0;
    const auto zero = affine_product_demo(q1, q2, a);
    rep.symmetric_failures += zero.q3_full != zero.q3_symmetric;
    ++rep.sets;
  }
  return rep;
}

}  // namespace tqt::harness
