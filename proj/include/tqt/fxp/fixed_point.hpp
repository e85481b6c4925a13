// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "tqt/core/tensor.hpp"
#include "tqt/quant/quantizer.hpp"

namespace tqt::fxp {

using Int64Tensor = BasicTensor<std::int64_t>;

inline std::int64_t int_min(int bits, bool is_signed) {
  return is_signed ? -(std::int64_t{1} << (bits - 1)) : 0;
}
inline std::int64_t int_max(int bits, bool is_signed) {
  return is_signed ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
}

/// Integers with a fractional length: real value = elem * 2^-f.
struct FixedPointTensor {
  IntTensor elems;
  int f = 0;
  int bits = 32;
  bool is_signed = true;

  void validate(const std::string& who = "fixed-point tensor") const {
    if (bits < 2 || bits > 32) throw ContractError(who + ": bit-width must be in [2, 32]");
    const std::int64_t lo = int_min(bits, is_signed), hi = int_max(bits, is_signed);
    for (std::size_t i = 0; i < elems.size(); ++i) {
      if (elems[i] < lo || elems[i] > hi) {
        throw OverflowError(who + ": element " + std::to_string(elems[i]) + " at " + std::to_string(i) +
                            " outside " + std::to_string(bits) + "-bit " +
                            (is_signed ? "signed" : "unsigned") + " range");
      }
    }
  }

  Tensor real() const {
    Tensor out(elems.shape());
    for (std::size_t i = 0; i < elems.size(); ++i) out[i] = std::ldexp(static_cast<double>(elems[i]), -f);
    return out;
  }

  bool operator==(const FixedPointTensor&) const = default;
};

/// Quantizes reals with the given parameters into grid integers.
inline FixedPointTensor to_fixed_point(const Tensor& x, const QuantizerParams& q) {
  q.validate();
  FixedPointTensor t{IntTensor(x.shape()), q.frac_len(), q.bits, q.is_signed};
  for (std::size_t i = 0; i < x.size(); ++i) t.elems[i] = static_cast<std::int32_t>(quantize_index(x[i], q));
  return t;
}

/// Round-half-to-even right shift by `shift` (left shift when negative),
/// saturated to the out_bits range.
inline std::int64_t shift_requant(std::int64_t x, int shift, int out_bits, bool out_signed) {
  const std::int64_t lo = int_min(out_bits, out_signed), hi = int_max(out_bits, out_signed);
  std::int64_t r;
  if (shift > 0) {
    if (shift >= 63) {
      r = 0;  // |x| < 2^63 <= half of 2^shift, rounds to zero
    } else {
      const std::int64_t q = x >> shift;  // floor
      const std::int64_t rem = x - q * (std::int64_t{1} << shift);
      const std::int64_t half = std::int64_t{1} << (shift - 1);
      r = q + ((rem > half || (rem == half && (q & 1) != 0)) ? 1 : 0);
    }
  } else {
    const int k = -shift;
    if (x == 0) {
      r = 0;
    } else if (k >= 62 || std::llabs(x) > (std::numeric_limits<std::int64_t>::max() >> k)) {
      r = x > 0 ? hi : lo;
    } else {
      r = x * (std::int64_t{1} << k);
    }
  }
  return std::clamp(r, lo, hi);
}

}  // namespace tqt::fxp
