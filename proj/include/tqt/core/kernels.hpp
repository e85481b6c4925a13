// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense kernels in NHWC layout. Convolutions are cross-correlations (no
// kernel flip). Templated so the integer runtime can run the same loops with
// 64-bit accumulators.

#include <algorithm>
#include <cstdint>
#include <string>

#include "tqt/core/tensor.hpp"

namespace tqt {

enum class Padding { kValid, kSame };

inline Padding parse_padding(const std::string& s) {
  if (s == "valid") return Padding::kValid;
  if (s == "same") return Padding::kSame;
  throw ContractError("padding must be 'valid' or 'same', got '" + s + "'");
}
inline const char* padding_name(Padding p) { return p == Padding::kSame ? "same" : "valid"; }

/// Spatial bookkeeping for one 2-D window op, TF conventions.
struct Window2d {
  std::size_t batch = 0, in_h = 0, in_w = 0, channels = 0;
  std::size_t k_h = 0, k_w = 0, stride = 1;
  std::size_t out_h = 0, out_w = 0;
  std::size_t pad_top = 0, pad_left = 0;

  static Window2d make(const Shape& x, std::size_t k_h, std::size_t k_w, std::size_t stride,
                       Padding pad) {
    if (x.size() != 4) throw DimensionError("expected NHWC input, got " + shape_str(x));
    if (stride < 1) throw ContractError("stride must be >= 1");
    Window2d g;
    g.batch = x[0];
    g.in_h = x[1];
    g.in_w = x[2];
    g.channels = x[3];
    g.k_h = k_h;
    g.k_w = k_w;
    g.stride = stride;
    if (pad == Padding::kSame) {
      g.out_h = (g.in_h + stride - 1) / stride;
      g.out_w = (g.in_w + stride - 1) / stride;
      const auto total = [&](std::size_t out, std::size_t in, std::size_t k) {
        const std::size_t need = (out - 1) * stride + k;
        return need > in ? need - in : std::size_t{0};
      };
      g.pad_top = total(g.out_h, g.in_h, k_h) / 2;
      g.pad_left = total(g.out_w, g.in_w, k_w) / 2;
    } else {
      if (g.in_h < k_h || g.in_w < k_w) {
        throw DimensionError("valid window " + std::to_string(k_h) + "x" +
                             std::to_string(k_w) + " larger than input " + shape_str(x));
      }
      g.out_h = (g.in_h - k_h) / stride + 1;
      g.out_w = (g.in_w - k_w) / stride + 1;
    }
    return g;
  }

  /// Input row for output row oy and kernel row ky, or -1 when in padding.
  std::ptrdiff_t in_row(std::size_t oy, std::size_t ky) const {
    const auto r = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                   static_cast<std::ptrdiff_t>(pad_top);
    return (r < 0 || r >= static_cast<std::ptrdiff_t>(in_h)) ? -1 : r;
  }
  std::ptrdiff_t in_col(std::size_t ox, std::size_t kx) const {
    const auto c = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                   static_cast<std::ptrdiff_t>(pad_left);
    return (c < 0 || c >= static_cast<std::ptrdiff_t>(in_w)) ? -1 : c;
  }
};

/// out[M,N] = a[M,K] * b[K,N]; accumulation in Acc.
template <typename T, typename Acc = T>
BasicTensor<Acc> matmul_kernel(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul inner dims disagree: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  BasicTensor<Acc> out(Shape{m, n}, Acc{});
  for (std::size_t i = 0; i < m; ++i) {
    Acc* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const Acc av = static_cast<Acc>(a[i * k + p]);
      const T* brow = &b[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += av * static_cast<Acc>(brow[j]);
    }
  }
  return out;
}

/// Regular convolution, kernel [kh, kw, C, F].
template <typename T, typename Acc = T>
BasicTensor<Acc> conv2d_kernel(const BasicTensor<T>& x, const BasicTensor<T>& w,
                               std::size_t stride, Padding pad) {
  if (w.rank() != 4) throw DimensionError("conv2d kernel must be [kh,kw,C,F]");
  const auto g = Window2d::make(x.shape(), w.dim(0), w.dim(1), stride, pad);
  if (w.dim(2) != g.channels) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(w.shape()));
  }
  const std::size_t f = w.dim(3), c = g.channels;
  BasicTensor<Acc> out(Shape{g.batch, g.out_h, g.out_w, f}, Acc{});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        Acc* o = &out[((n * g.out_h + oy) * g.out_w + ox) * f];
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const auto iy = g.in_row(oy, ky);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const auto ix = g.in_col(ox, kx);
            if (ix < 0) continue;
            const T* xin = &x[((n * g.in_h + iy) * g.in_w + ix) * c];
            const T* wk = &w[(ky * g.k_w + kx) * c * f];
            for (std::size_t ci = 0; ci < c; ++ci) {
              const Acc xv = static_cast<Acc>(xin[ci]);
              const T* wrow = wk + ci * f;
              for (std::size_t fo = 0; fo < f; ++fo) o[fo] += xv * static_cast<Acc>(wrow[fo]);
            }
          }
        }
      }
    }
  }
  return out;
}

/// Depthwise convolution (multiplier 1), kernel [kh, kw, C, 1].
template <typename T, typename Acc = T>
BasicTensor<Acc> depthwise_conv2d_kernel(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                         std::size_t stride, Padding pad) {
  if (w.rank() != 4 || w.dim(3) != 1) {
    throw DimensionError("depthwise kernel must be [kh,kw,C,1], got " + shape_str(w.shape()));
  }
  const auto g = Window2d::make(x.shape(), w.dim(0), w.dim(1), stride, pad);
  if (w.dim(2) != g.channels) {
    throw DimensionError("depthwise channel mismatch: input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(w.shape()));
  }
  const std::size_t c = g.channels;
  BasicTensor<Acc> out(Shape{g.batch, g.out_h, g.out_w, c}, Acc{});
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        Acc* o = &out[((n * g.out_h + oy) * g.out_w + ox) * c];
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const auto iy = g.in_row(oy, ky);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const auto ix = g.in_col(ox, kx);
            if (ix < 0) continue;
            const T* xin = &x[((n * g.in_h + iy) * g.in_w + ix) * c];
            const T* wk = &w[(ky * g.k_w + kx) * c];
            for (std::size_t ci = 0; ci < c; ++ci) {
              o[ci] += static_cast<Acc>(xin[ci]) * static_cast<Acc>(wk[ci]);
            }
          }
        }
      }
    }
  }
  return out;
}

// Gradients of the real-valued kernels.

inline void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gout,
                            std::size_t stride, Padding pad, Tensor* gx, Tensor* gw) {
  const auto g = Window2d::make(x.shape(), w.dim(0), w.dim(1), stride, pad);
  const std::size_t f = w.dim(3), c = g.channels;
  if (gx) *gx = zeros_like(x);
  if (gw) *gw = zeros_like(w);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const double* go = &gout[((n * g.out_h + oy) * g.out_w + ox) * f];
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const auto iy = g.in_row(oy, ky);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const auto ix = g.in_col(ox, kx);
            if (ix < 0) continue;
            const std::size_t xoff = ((n * g.in_h + iy) * g.in_w + ix) * c;
            const std::size_t woff = (ky * g.k_w + kx) * c * f;
            for (std::size_t ci = 0; ci < c; ++ci) {
              const double* wrow = &w[woff + ci * f];
              if (gx) {
                double acc = 0.0;
                for (std::size_t fo = 0; fo < f; ++fo) acc += go[fo] * wrow[fo];
                (*gx)[xoff + ci] += acc;
              }
              if (gw) {
                const double xv = x[xoff + ci];
                double* gwrow = &(*gw)[woff + ci * f];
                for (std::size_t fo = 0; fo < f; ++fo) gwrow[fo] += xv * go[fo];
              }
            }
          }
        }
      }
    }
  }
}

inline void depthwise_conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& gout,
                                      std::size_t stride, Padding pad, Tensor* gx,
                                      Tensor* gw) {
  const auto g = Window2d::make(x.shape(), w.dim(0), w.dim(1), stride, pad);
  const std::size_t c = g.channels;
  if (gx) *gx = zeros_like(x);
  if (gw) *gw = zeros_like(w);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const double* go = &gout[((n * g.out_h + oy) * g.out_w + ox) * c];
        for (std::size_t ky = 0; ky < g.k_h; ++ky) {
          const auto iy = g.in_row(oy, ky);
          if (iy < 0) continue;
          for (std::size_t kx = 0; kx < g.k_w; ++kx) {
            const auto ix = g.in_col(ox, kx);
            if (ix < 0) continue;
            const std::size_t xoff = ((n * g.in_h + iy) * g.in_w + ix) * c;
            const std::size_t woff = (ky * g.k_w + kx) * c;
            for (std::size_t ci = 0; ci < c; ++ci) {
              if (gx) (*gx)[xoff + ci] += go[ci] * w[woff + ci];
              if (gw) (*gw)[woff + ci] += go[ci] * x[xoff + ci];
            }
          }
        }
      }
    }
  }
}

}  // namespace tqt
