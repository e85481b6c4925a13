// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "tqt/core/tensor.hpp"

namespace tqt {

/// Round half to even. Exact for |x| < 2^52.
inline double bankers_round_real(double x) {
  const double fl = std::floor(x);
  const double d = x - fl;
  if (d > 0.5) return fl + 1.0;
  if (d < 0.5) return fl;
  // A fractional part of exactly 0.5 implies |x| < 2^52, so fl fits.
  return (static_cast<std::int64_t>(fl) & 1) == 0 ? fl : fl + 1.0;
}

inline std::int64_t bankers_round(double x) {
  if (!(std::fabs(x) < 0x1.0p62)) throw ContractError("bankers_round: |x| must be < 2^62");
  return static_cast<std::int64_t>(bankers_round_real(x));
}

/// Per-tensor symmetric power-of-2 quantizer. Only log2 of the threshold is
/// stored; scale, limits and fractional length are derived on use.
struct QuantizerParams {
  int bits = 8;
  bool is_signed = true;
  double log2_t = 0.0;

  QuantizerParams() = default;
  QuantizerParams(int b, bool sgn, double l2t) : bits(b), is_signed(sgn), log2_t(l2t) {
    validate();
  }

  void validate() const {
    if (bits < 2 || bits > 32) {
      throw ContractError("quantizer bit-width must be in [2, 32], got " + std::to_string(bits));
    }
    if (!std::isfinite(log2_t)) throw ContractError("quantizer log2_t must be finite");
  }

  std::int64_t n() const { return is_signed ? -(std::int64_t{1} << (bits - 1)) : 0; }
  std::int64_t p() const {
    return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
  }
  /// Integer ceil of log2_t.
  int ceil_log2_t() const { return static_cast<int>(std::ceil(log2_t)); }
  /// Fractional length f with s = 2^-f.
  int frac_len() const { return (is_signed ? bits - 1 : bits) - ceil_log2_t(); }
  double scale() const { return std::ldexp(1.0, -frac_len()); }
  double threshold() const { return std::exp2(log2_t); }

  bool operator==(const QuantizerParams&) const = default;
};

struct ScaleInfo {
  double s;
  int f;
};

inline ScaleInfo scale_from_log_threshold(const QuantizerParams& q) {
  q.validate();
  return {q.scale(), q.frac_len()};
}

/// Integer grid index clip(round(x/s), n, p).
inline std::int64_t quantize_index(double x, const QuantizerParams& q) {
  const double r = bankers_round_real(x / q.scale());
  return static_cast<std::int64_t>(
      std::clamp(r, static_cast<double>(q.n()), static_cast<double>(q.p())));
}

inline double quantize_scalar(double x, const QuantizerParams& q) {
  return static_cast<double>(quantize_index(x, q)) * q.scale();
}

inline Tensor quantize_forward(const Tensor& x, const QuantizerParams& q) {
  q.validate();
  const double s = q.scale(), inv = 1.0 / s;
  const double lo = static_cast<double>(q.n()), hi = static_cast<double>(q.p());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::clamp(bankers_round_real(x[i] * inv), lo, hi) * s;
  }
  return out;
}

struct QuantGrads {
  Tensor grad_x;
  double grad_log2_t = 0.0;
};

/// Exact local gradients of the quantizer. Inner region (n <= round(x/s) <= p)
/// passes the upstream gradient to x and contributes up*s*ln2*(round(x/s)-x/s)
/// to log2_t; saturated elements block x and contribute up*s*ln2*n (or p).
///
/// The threshold sum is evaluated as (sum up*c + sum -up*x/s)*s*ln2 with c the
/// clipped integer, the same order a primitive-composed quantizer produces
/// under reverse accumulation.
inline QuantGrads quantize_backward(const Tensor& x, const QuantizerParams& q,
                                    const Tensor& upstream) {
  require_same_shape(x.shape(), upstream.shape(), "quantize_backward");
  q.validate();
  const double s = q.scale();
  const double lo = static_cast<double>(q.n()), hi = static_cast<double>(q.p());
  QuantGrads g{Tensor(x.shape(), 0.0), 0.0};
  double sum_c = 0.0, sum_x = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double up = upstream[i];
    const double xs = x[i] / s;
    const double r = bankers_round_real(xs);
    const bool inner = r >= lo && r <= hi;
    sum_c += up * std::clamp(r, lo, hi);
    if (inner) {
      sum_x += -up * xs;
      g.grad_x[i] = up;
    }
  }
  g.grad_log2_t = (sum_c + sum_x) * s * std::numbers::ln2;
  return g;
}

/// Clipped-gradient baseline with free real limits n_th < p_th and 2^b
/// uniformly spaced levels. Rounding is treated as identity in the backward
/// pass, so limit gradients are those of clip(x, n, p).
struct FakeQuantResult {
  Tensor y;
  Tensor grad_x;  // d y / d x per element
  Tensor grad_n;  // d y / d n_th per element
  Tensor grad_p;  // d y / d p_th per element
};

inline FakeQuantResult fakequant_clipped(const Tensor& x, double n_th, double p_th, int b) {
  if (!(n_th < p_th)) throw ContractError("fakequant_clipped: requires n < p");
  if (b < 2 || b > 32) throw ContractError("fakequant_clipped: bad bit-width");
  const double delta = (p_th - n_th) / (std::ldexp(1.0, b) - 1.0);
  FakeQuantResult r{Tensor(x.shape()), Tensor(x.shape(), 0.0), Tensor(x.shape(), 0.0),
                    Tensor(x.shape(), 0.0)};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double c = std::clamp(x[i], n_th, p_th);
    r.y[i] = bankers_round_real((c - n_th) / delta) * delta + n_th;
    if (x[i] < n_th) {
      r.grad_n[i] = 1.0;
    } else if (x[i] > p_th) {
      r.grad_p[i] = 1.0;
    } else {
      r.grad_x[i] = 1.0;
    }
  }
  return r;
}

/// Affine (scale + zero-point) quantization parameters for a product
/// r3 = r1 * r2 with r_i = s_i (q_i - z_i).
template <typename R = double>
struct AffineParams {
  R s1{1}, s2{1}, s3{1};
  std::int64_t z1 = 0, z2 = 0, z3 = 0;
};

template <typename R = double>
struct AffineProduct {
  R q3_full;
  R q3_symmetric;
};

/// Output integer of an affine product, with all zero-point cross terms, and
/// the zero-point-free simplification. R may be an exact rational type.
template <typename R = double>
AffineProduct<R> affine_product_demo(std::int64_t q1, std::int64_t q2, const AffineParams<R>& a) {
  if (!(a.s1 > R(0) && a.s2 > R(0) && a.s3 > R(0))) {
    throw ContractError("affine_product_demo: scales must be positive");
  }
  const R m = a.s1 * a.s2 / a.s3;
  const R cross = R(q1 * q2) - R(q1 * a.z2) - R(q2 * a.z1) + R(a.z1 * a.z2);
  return {R(a.z3) + m * cross, m * R(q1 * q2)};
}

}  // namespace tqt
