// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "tqt/harness/toy.hpp"

namespace tqt::harness {
namespace {

ToyTrajectory sawtooth(int period, int n, double low, double high, double g_low, double g_high) {
  ToyTrajectory tr;
  for (int i = 0; i < n; ++i) {
    const bool is_low = i % period == 0;
    tr.log2_t.push_back(is_low ? low : high);
    tr.grad.push_back(is_low ? g_low : g_high);
    tr.loss.push_back(0.0);
  }
  return tr;
}

TEST(Oscillation, SawtoothPeriodAndRatio) {
  const auto tr = sawtooth(50, 3000, 2.9, 3.5, -49.0, 1.0);
  const auto r = measure_oscillation(tr);
  EXPECT_EQ(r.boundary, 3);
  EXPECT_DOUBLE_EQ(r.period, 50.0);
  EXPECT_DOUBLE_EQ(r.r_g, 49.0);
  EXPECT_NEAR(r.max_deviation, 0.5, 1e-12);
  EXPECT_TRUE(r.reliable);
  EXPECT_EQ(r.low_steps, 18u);
}

TEST(Oscillation, FlatTrajectoryIsUnreliable) {
  ToyTrajectory tr;
  tr.log2_t.assign(100, 2.5);
  tr.grad.assign(100, 0.0);
  tr.loss.assign(100, 0.0);
  const auto r = measure_oscillation(tr);
  EXPECT_FALSE(r.reliable);
  EXPECT_EQ(r.crossings, 0u);
}

TEST(Oscillation, ConvergedStep) {
  ToyTrajectory tr;
  for (double v : {10.0, 8.0, 6.0, 4.5, 3.2, 2.6, 3.4, 2.9}) tr.log2_t.push_back(v);
  EXPECT_EQ(converged_step(tr, 3), 4);
  EXPECT_EQ(converged_step(tr, 20), -1);
}

TEST(ToyLoss, GradientMatchesElementwiseFormula) {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({500}, 2.0);
  for (bool is_signed : {true, false}) {
    const QuantizerParams q(4, is_signed, 1.3);
    const auto [loss, g] = toy_loss_grad(x, q);
    const double s = q.scale();
    const double n = is_signed ? -8.0 : 0.0, p = is_signed ? 7.0 : 15.0;
    double want_loss = 0.0, want_g = 0.0;
    for (double v : x.data()) {
      const double r = std::nearbyint(v / s);
      const double k = std::clamp(r, n, p);
      const double e = k * s - v;
      want_loss += 0.5 * e * e;
      const double dq = (r < n || r > p) ? k * s : (r - v / s) * s;
      want_g += e * dq * std::numbers::ln2;
    }
    EXPECT_NEAR(loss, want_loss, 1e-9 * want_loss);
    EXPECT_NEAR(g, want_g, 1e-9 * std::max(1.0, std::fabs(want_g)));
  }
}

TEST(ToyRun, ZeroLearningRateIsFlat) {
  for (auto opt : {ToyOptimizer::kRawSgd, ToyOptimizer::kLogSgd, ToyOptimizer::kNormedLogSgd}) {
    ToyRunConfig cfg;
    cfg.optimizer = opt;
    cfg.alpha = 0.0;
    cfg.steps = 50;
    const auto tr = toy_l2_run(cfg);
    ASSERT_EQ(tr.log2_t.size(), 50u);
    for (double l : tr.log2_t) EXPECT_EQ(l, 3.0);
  }
}

TEST(ToyRun, Reproducible) {
  ToyRunConfig cfg;
  cfg.steps = 200;
  cfg.seed = 11;
  const auto a = toy_l2_run(cfg), b = toy_l2_run(cfg);
  EXPECT_EQ(a.log2_t, b.log2_t);
  cfg.seed = 12;
  EXPECT_NE(toy_l2_run(cfg).log2_t, a.log2_t);
}

TEST(ToyRun, NormedStepsAreBoundedByAlpha) {
  for (double sigma : {1e-2, 1.0, 100.0}) {
    ToyRunConfig cfg;
    cfg.optimizer = ToyOptimizer::kNormedLogSgd;
    cfg.sigma = sigma;
    cfg.alpha = 0.1;
    cfg.steps = 500;
    const auto tr = toy_l2_run(cfg);
    ASSERT_FALSE(tr.diverged);
    for (std::size_t i = 1; i < tr.log2_t.size(); ++i) {
      EXPECT_LE(std::fabs(tr.log2_t[i] - tr.log2_t[i - 1]), cfg.alpha + 1e-12);
    }
  }
}

TEST(ToyRun, LogSgdIsUnstableAtLargeScale) {
  ToyRunConfig cfg;
  cfg.optimizer = ToyOptimizer::kLogSgd;
  cfg.sigma = 100.0;
  cfg.alpha = 0.01;
  cfg.steps = 2000;
  const auto tr = toy_l2_run(cfg);
  bool wide = tr.diverged;
  if (!wide) {
    const auto [lo, hi] = std::minmax_element(tr.log2_t.begin(), tr.log2_t.end());
    wide = *hi - *lo > 2.0;
  }
  EXPECT_TRUE(wide);
}

TEST(ToyRun, AdamSettlesWithinOneBin) {
  for (double sigma : {1e-2, 1.0, 100.0}) {
    ToyRunConfig cfg;
    cfg.sigma = sigma;
    cfg.steps = 2000;
    const auto tr = toy_l2_run(cfg);
    ASSERT_FALSE(tr.diverged);
    const auto [lo, hi] = std::minmax_element(tr.log2_t.begin() + 1500, tr.log2_t.end());
    EXPECT_LT(*hi - *lo, 1.0) << "sigma " << sigma;
  }
}

TEST(ContaminatedNormal, OutlierFraction) {
  Rng rng(5);
  const Tensor x = contaminated_normal(rng, 200000, 1.0, 1e-2, 100.0);
  std::size_t big = 0;
  for (double v : x.data()) big += std::fabs(v) > 8.0;
  // P(|N(0, 100^2)| > 8) ~ 0.936.
  EXPECT_NEAR(static_cast<double>(big) / 200000.0, 0.00936, 0.001);
}

TEST(ClipCompare, ConfigurationIsChecked) {
  ClipCompareConfig cfg;
  cfg.steps = 2;
  EXPECT_THROW(compare_clipped_vs_tqt(cfg), ContractError);
}

TEST(ClipCompare, Reproducible) {
  ClipCompareConfig cfg;
  cfg.steps = 300;
  cfg.seed = 4;
  const auto a = compare_clipped_vs_tqt(cfg), b = compare_clipped_vs_tqt(cfg);
  EXPECT_EQ(a.loss_tqt, b.loss_tqt);
  EXPECT_EQ(a.t_clipped, b.t_clipped);
  EXPECT_GT(a.max_abs, 0.0);
}

TEST(ClipCompare, WithoutOutliersBothStayNearTheBulk) {
  ClipCompareConfig cfg;
  cfg.outlier_frac = 0.0;
  cfg.steps = 3000;
  const auto r = compare_clipped_vs_tqt(cfg);
  EXPECT_LT(r.t_tqt, 16.0);
  EXPECT_LT(r.t_clipped, 16.0);
  EXPECT_GT(r.t_tqt, 2.0);
  EXPECT_GT(r.t_clipped, 2.0);
  EXPECT_LT(r.loss_tqt, 2.0 * r.loss_clipped);
  EXPECT_LT(r.loss_clipped, 2.0 * r.loss_tqt);
}

TEST(ClipCompare, TrainedThresholdClipsOutliers) {
  const auto r = compare_clipped_vs_tqt(ClipCompareConfig{});
  EXPECT_LT(r.loss_tqt, r.loss_clipped);
  EXPECT_LT(r.t_tqt, r.max_abs);
  EXPECT_GE(r.t_clipped, 0.9 * r.max_abs);
}

}  // namespace
}  // namespace tqt::harness
