// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <numbers>
#include <set>

#include "test_util.hpp"
#include "tqt/core/rng.hpp"
#include "tqt/quant/quantizer.hpp"
#include "tqt/quant/quantizer_op.hpp"

namespace tqt {
namespace {

constexpr double kLn2 = std::numbers::ln2;

TEST(BankersRound, HalvesGoToEven) {
  EXPECT_EQ(bankers_round(0.5), 0);
  EXPECT_EQ(bankers_round(1.5), 2);
  EXPECT_EQ(bankers_round(2.5), 2);
  EXPECT_EQ(bankers_round(-0.5), 0);
  EXPECT_EQ(bankers_round(-1.5), -2);
  EXPECT_EQ(bankers_round(0.4999), 0);
  EXPECT_EQ(bankers_round(-2.7), -3);
  EXPECT_THROW(bankers_round(0x1.0p63), ContractError);
}

TEST(Scale, FromLogThreshold) {
  auto a = scale_from_log_threshold(QuantizerParams(3, true, std::log2(1.0)));
  EXPECT_EQ(a.s, 0.25);
  EXPECT_EQ(a.f, 2);
  auto b = scale_from_log_threshold(QuantizerParams(8, true, std::log2(1.5)));
  EXPECT_EQ(b.s, std::ldexp(1.0, -6));
  EXPECT_EQ(b.f, 6);
  auto c = scale_from_log_threshold(QuantizerParams(3, false, 0.0));
  EXPECT_EQ(c.s, 0.125);
  EXPECT_EQ(c.f, 3);
}

TEST(Scale, LimitsFollowSignedness) {
  QuantizerParams s(8, true, 0.0), u(8, false, 0.0);
  EXPECT_EQ(s.n(), -128);
  EXPECT_EQ(s.p(), 127);
  EXPECT_EQ(u.n(), 0);
  EXPECT_EQ(u.p(), 255);
  EXPECT_THROW(QuantizerParams(1, true, 0.0), ContractError);
}

TEST(Scale, IntegerLogThresholdUsesItself) {
  EXPECT_EQ(QuantizerParams(4, true, 2.0).scale(), 0.5);
  EXPECT_EQ(QuantizerParams(4, true, 2.0 + 1e-9).scale(), 1.0);
}

TEST(QuantizeForward, WorkedExamples) {
  QuantizerParams q(3, true, 0.0);
  Tensor y = quantize_forward(Tensor::from({0.6, 1.0, -2.0, 0.0}), q);
  EXPECT_EQ(y, Tensor::from({0.5, 0.75, -1.0, 0.0}));
}

TEST(QuantizeForward, GridValuesAreFixedPoints) {
  QuantizerParams q(4, true, 1.3);
  const double s = q.scale();
  Tensor x(Shape{16});
  for (int k = -8; k <= 7; ++k) x[k + 8] = k * s;
  EXPECT_EQ(quantize_forward(x, q), x);
}

TEST(QuantizeForward, IdempotentAndOnGrid) {
  Rng rng(17);
  for (int b : {2, 3, 4, 8}) {
    for (bool sgn : {true, false}) {
      QuantizerParams q(b, sgn, rng.uniform(-3.0, 3.0));
      Tensor x = rng.normal_tensor({500}, 3.0);
      Tensor y = quantize_forward(x, q);
      EXPECT_EQ(quantize_forward(y, q), y);
      for (double v : y.data()) {
        const double k = v / q.scale();
        EXPECT_EQ(k, std::round(k));
        EXPECT_GE(k, q.n());
        EXPECT_LE(k, q.p());
      }
    }
  }
}

TEST(QuantizeBackward, WorkedExamples) {
  QuantizerParams q(3, true, 0.0);
  auto g = quantize_backward(Tensor::from({0.6}), q, Tensor::from({1.0}));
  EXPECT_EQ(g.grad_x[0], 1.0);
  EXPECT_NEAR(g.grad_log2_t, 0.25 * kLn2 * (2.0 - 2.4), 1e-15);
  EXPECT_NEAR(g.grad_log2_t, -0.0693, 5e-5);

  auto h = quantize_backward(Tensor::from({10.0}), q, Tensor::from({1.0}));
  EXPECT_EQ(h.grad_x[0], 0.0);
  EXPECT_NEAR(h.grad_log2_t, 0.25 * kLn2 * 3.0, 1e-15);
  EXPECT_NEAR(h.grad_log2_t, 0.5199, 5e-5);

  auto lo = quantize_backward(Tensor::from({-10.0}), q, Tensor::from({1.0}));
  EXPECT_NEAR(lo.grad_log2_t, 0.25 * kLn2 * -4.0, 1e-15);

  auto z = quantize_backward(Tensor::from({0.6, 10.0}), q, Tensor::from({0.0, 0.0}));
  EXPECT_EQ(z.grad_x, Tensor::from({0.0, 0.0}));
  EXPECT_EQ(z.grad_log2_t, 0.0);
  EXPECT_THROW(quantize_backward(Tensor::from({1.0}), q, Tensor::from({1.0, 2.0})),
               DimensionError);
}

// Smooth surrogate that freezes round and ceil offsets at a base point; its
// derivatives are what the straight-through gradient promises.
double surrogate_loss(const Tensor& x, double l, const Tensor& up, const std::vector<double>& c,
                      double c_ceil, int b, bool sgn, const std::vector<int>& region) {
  const double s = std::exp2(l + c_ceil) / std::ldexp(1.0, sgn ? b - 1 : b);
  QuantizerParams q(b, sgn, 0.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double k = region[i] < 0 ? q.n() : region[i] > 0 ? q.p() : x[i] / s + c[i];
    acc += up[i] * k * s;
  }
  return acc;
}

TEST(QuantizeBackward, MatchesFiniteDifferenceOfSurrogate) {
  Rng rng(99);
  const double h = 1e-4;
  for (int trial = 0; trial < 200; ++trial) {
    const int b = std::array{3, 4, 8}[trial % 3];
    const bool sgn = trial % 2 == 0;
    double l = rng.uniform(-2.0, 2.0);
    while (std::fabs(l - std::round(l)) < 1e-3) l = rng.uniform(-2.0, 2.0);
    QuantizerParams q(b, sgn, l);
    const double s = q.scale();
    Tensor x(Shape{8}), up = rng.normal_tensor({8});
    std::vector<double> c(8);
    std::vector<int> region(8);
    for (std::size_t i = 0; i < 8; ++i) {
      double u;
      do {
        u = rng.uniform(static_cast<double>(q.n()) - 3.0, static_cast<double>(q.p()) + 3.0);
      } while (std::fabs(u - std::floor(u) - 0.5) < 1e-3);
      x[i] = u * s;
      const double r = bankers_round_real(u);
      region[i] = r < q.n() ? -1 : r > q.p() ? 1 : 0;
      c[i] = r - u;
    }
    const double cc = std::ceil(l) - l;
    auto g = quantize_backward(x, q, up);
    const double fd_l = (surrogate_loss(x, l + h, up, c, cc, b, sgn, region) -
                         surrogate_loss(x, l - h, up, c, cc, b, sgn, region)) /
                        (2 * h);
    EXPECT_LT(std::fabs(fd_l - g.grad_log2_t) / std::max(std::fabs(fd_l), 1e-8), 1e-4);
    for (std::size_t i = 0; i < 8; ++i) {
      Tensor xp = x, xm = x;
      xp[i] += h * s;
      xm[i] -= h * s;
      const double fd_x = (surrogate_loss(xp, l, up, c, cc, b, sgn, region) -
                           surrogate_loss(xm, l, up, c, cc, b, sgn, region)) /
                          (2 * h * s);
      EXPECT_NEAR(fd_x, g.grad_x[i], 1e-4 * std::max(1.0, std::fabs(fd_x)));
    }
  }
}

TEST(QuantizeBackward, ToyLossSignStructure) {
  // dL/dlog2_t = (q - x) dq/dlog2_t is >= 0 inside (s(n-0.5), s(p+0.5)), <= 0 outside.
  for (bool sgn : {true, false}) {
    QuantizerParams q(3, sgn, 0.0);
    const double s = q.scale();
    const double xn = s * (q.n() - 0.5), xp = s * (q.p() + 0.5);
    for (double x = -3.0; x <= 3.0; x += 0.001) {
      const double qx = quantize_scalar(x, q);
      auto g = quantize_backward(Tensor::from({x}), q, Tensor::from({qx - x}));
      if (x > xn && x < xp) {
        EXPECT_GE(g.grad_log2_t, 0.0) << x;
      } else if (x < xn || x > xp) {
        EXPECT_LE(g.grad_log2_t, 0.0) << x;
      }
    }
  }
}

TEST(FakeQuant, ZeroLimitGradientsInside) {
  Tensor x = Tensor::from({-1.0, -0.3, 0.0, 0.5, 0.87});
  auto r = fakequant_clipped(x, -1.125, 0.875, 3);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(r.grad_n[i], 0.0);
    EXPECT_EQ(r.grad_p[i], 0.0);
    EXPECT_EQ(r.grad_x[i], 1.0);
  }
}

TEST(FakeQuant, SaturatedSides) {
  auto r = fakequant_clipped(Tensor::from({2.0, -3.0}), -1.125, 0.875, 3);
  EXPECT_EQ(r.grad_p[0], 1.0);
  EXPECT_EQ(r.grad_x[0], 0.0);
  EXPECT_EQ(r.grad_n[1], 1.0);
  EXPECT_EQ(r.grad_x[1], 0.0);
  EXPECT_EQ(r.y[0], 0.875);
  EXPECT_EQ(r.y[1], -1.125);
  EXPECT_THROW(fakequant_clipped(Tensor::from({0.0}), 1.0, 1.0, 3), ContractError);
}

TEST(FakeQuant, StaircaseHasEightEvenLevels) {
  const double n = -1.125, p = 0.875, step = 2.0 / 7.0;
  Tensor x(Shape{4001});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = -2.0 + 4.0 * i / 4000.0;
  auto r = fakequant_clipped(x, n, p, 3);
  std::set<double> levels;
  double prev = -1e9;
  for (double v : r.y.data()) {
    EXPECT_GE(v, prev);
    prev = v;
    const double k = (v - n) / step;
    EXPECT_NEAR(k, std::round(k), 1e-12);
    levels.insert(std::round(k));
  }
  EXPECT_EQ(levels.size(), 8u);
}

TEST(FakeQuant, UpperLimitNeverMovesInwardOnToyLoss) {
  Rng rng(4);
  Tensor x = rng.normal_tensor({2000});
  double n = -0.5, p = 0.5, max_x = 0.0;
  for (double v : x.data()) max_x = std::max(max_x, v);
  for (int step = 0; step < 300; ++step) {
    auto r = fakequant_clipped(x, n, p, 8);
    double gn = 0.0, gp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      gn += (r.y[i] - x[i]) * r.grad_n[i];
      gp += (r.y[i] - x[i]) * r.grad_p[i];
    }
    const double p_next = p - 1e-3 * gp;
    EXPECT_GE(p_next, p);
    EXPECT_LE(p_next, max_x + 1e-12);
    p = p_next;
    n -= 1e-3 * gn;
  }
  EXPECT_GT(p, 0.5);
}

TEST(Affine, ZeroPointFreeCase) {
  auto r = affine_product_demo<double>(3, 5, {});
  EXPECT_EQ(r.q3_full, 15.0);
  EXPECT_EQ(r.q3_symmetric, 15.0);
}

TEST(Affine, WorkedExample) {
  AffineParams<double> a{0.5, 0.25, 0.125, 1, 2, 0};
  auto r = affine_product_demo(3, 5, a);
  EXPECT_EQ(r.q3_full, 6.0);
  EXPECT_EQ(r.q3_full, (0.5 * (3 - 1)) * (0.25 * (5 - 2)) / 0.125);
}

TEST(Affine, ExactRationalReconstruction) {
  using Q = boost::multiprecision::cpp_rational;
  Rng rng(8);
  auto rat = [&] { return Q(1 + static_cast<long>(rng.below(97)), 1 + static_cast<long>(rng.below(89))); };
  for (int i = 0; i < 2000; ++i) {
    AffineParams<Q> a{rat(), rat(), rat(), static_cast<long>(rng.below(256)) - 128,
                      static_cast<long>(rng.below(256)) - 128, static_cast<long>(rng.below(256)) - 128};
    const std::int64_t q1 = static_cast<std::int64_t>(rng.below(256)) - 128;
    const std::int64_t q2 = static_cast<std::int64_t>(rng.below(256)) - 128;
    auto r = affine_product_demo(q1, q2, a);
    const Q r1 = a.s1 * Q(q1 - a.z1), r2 = a.s2 * Q(q2 - a.z2);
    EXPECT_EQ(a.s3 * (r.q3_full - Q(a.z3)), r1 * r2);
    a.z1 = a.z2 = a.z3 = 0;
    auto z = affine_product_demo(q1, q2, a);
    EXPECT_EQ(z.q3_full, z.q3_symmetric);
  }
}

TEST(FusedOp, MatchesUnfusedComposition) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = std::array{2, 3, 4, 8, 16}[trial % 5];
    const bool sgn = trial % 3 != 0;
    const double l = rng.uniform(-4.0, 4.0);
    Tensor x = rng.normal_tensor({64}, std::exp2(rng.uniform(-4.0, 4.0)));
    Tensor up = rng.normal_tensor({64});
    Tape t1, t2;
    Var x1 = t1.leaf(x), l1 = t1.leaf(Tensor::scalar(l));
    Var x2 = t2.leaf(x), l2 = t2.leaf(Tensor::scalar(l));
    Var y1 = ops::quantize(x1, l1, b, sgn);
    Var y2 = ops::quantize_unfused(x2, l2, b, sgn);
    ASSERT_EQ(y1.value(), y2.value());
    t1.backprop(ops::sum(ops::mul(y1, t1.constant(up))));
    t2.backprop(ops::sum(ops::mul(y2, t2.constant(up))));
    EXPECT_LE(testing::ulp_distance(t1.grad(l1)[0], t2.grad(l2)[0]), 1u);
    const Tensor g1 = t1.grad(x1), g2 = t2.grad(x2);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(testing::ulp_distance(g1[i], g2[i]), 1u);
  }
}

}  // namespace
}  // namespace tqt
