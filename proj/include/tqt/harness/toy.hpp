// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Single-quantizer experiments on the L2 loss L = sum (q(x) - x)^2 / 2 with
// Gaussian inputs: threshold trajectories, oscillation measurement and the
// clipped-gradient comparison.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tqt/core/rng.hpp"
#include "tqt/optim/optim.hpp"
#include "tqt/quant/quantizer.hpp"

namespace tqt::harness {

enum class ToyOptimizer { kRawSgd, kLogSgd, kLogAdam, kNormedLogSgd };

inline const char* toy_optimizer_name(ToyOptimizer o) {
  switch (o) {
    case ToyOptimizer::kRawSgd: return "raw-sgd";
    case ToyOptimizer::kLogSgd: return "log-sgd";
    case ToyOptimizer::kLogAdam: return "log-adam";
    case ToyOptimizer::kNormedLogSgd: return "normed-log-sgd";
  }
  return "?";
}

inline ToyOptimizer parse_toy_optimizer(const std::string& s) {
  for (auto o : {ToyOptimizer::kRawSgd, ToyOptimizer::kLogSgd, ToyOptimizer::kLogAdam,
                 ToyOptimizer::kNormedLogSgd}) {
    if (s == toy_optimizer_name(o)) return o;
  }
  throw ContractError("unknown toy optimizer '" + s + "'");
}

struct ToyRunConfig {
  int bits = 8;
  bool is_signed = true;
  double sigma = 1.0;
  std::size_t batch = 1000;
  ToyOptimizer optimizer = ToyOptimizer::kLogAdam;
  double alpha = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long steps = 2000;
  std::uint64_t seed = 0;
  /// Starting log2 threshold; defaults to log2(8 sigma).
  std::optional<double> init_log2_t;

  void validate() const {
    if (steps < 1) throw ContractError("toy run: steps must be >= 1");
    if (!(sigma > 0.0)) throw ContractError("toy run: sigma must be positive");
    if (batch < 1) throw ContractError("toy run: batch must be >= 1");
    QuantizerParams(bits, is_signed, 0.0).validate();
  }
};

/// Entry i holds the state before update i: log2_t, the batch loss and the
/// log-threshold gradient.
struct ToyTrajectory {
  std::vector<double> log2_t;
  std::vector<double> loss;
  std::vector<double> grad;
  bool diverged = false;
  long diverged_at = -1;
};

inline constexpr double kDivergenceLog2 = 64.0;

/// Batch L2 loss and gradient w.r.t. log2_t.
inline std::pair<double, double> toy_loss_grad(const Tensor& x, const QuantizerParams& q) {
  const Tensor y = quantize_forward(x, q);
  Tensor err(x.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    err[i] = y[i] - x[i];
    loss += 0.5 * err[i] * err[i];
  }
  return {loss, quantize_backward(x, q, err).grad_log2_t};
}

inline ToyTrajectory toy_l2_run(const ToyRunConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  ToyTrajectory tr;
  double l = cfg.init_log2_t.value_or(std::log2(8.0 * cfg.sigma));
  AdamState adam(cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps);
  NormedGradState normed{cfg.beta2, cfg.eps, 0, 0.0};
  for (long i = 0; i < cfg.steps; ++i) {
    const Tensor x = rng.normal_tensor({cfg.batch}, cfg.sigma);
    const QuantizerParams q(cfg.bits, cfg.is_signed, l);
    const auto [loss, g] = toy_loss_grad(x, q);
    tr.log2_t.push_back(l);
    tr.loss.push_back(loss);
    tr.grad.push_back(g);
    switch (cfg.optimizer) {
      case ToyOptimizer::kRawSgd: {
        // Gradient step on t itself; dL/dt = dL/dlog2_t / (t ln 2).
        const double t = std::exp2(l);
        const double t_new = t - cfg.alpha * g / (t * std::numbers::ln2);
        l = t_new > 0.0 ? std::log2(t_new) : -std::numeric_limits<double>::infinity();
        break;
      }
      case ToyOptimizer::kLogSgd:
        l -= cfg.alpha * g;
        break;
      case ToyOptimizer::kLogAdam:
        l += adam_step(adam, g);
        break;
      case ToyOptimizer::kNormedLogSgd:
        l -= cfg.alpha * normed_grad(normed, g);
        break;
    }
    if (!std::isfinite(l) || std::fabs(l) > kDivergenceLog2) {
      tr.diverged = true;
      tr.diverged_at = i + 1;
      break;
    }
  }
  return tr;
}

struct OscillationReport {
  double period = std::numeric_limits<double>::quiet_NaN();  // T
  double r_g = std::numeric_limits<double>::quiet_NaN();
  double g_low = std::numeric_limits<double>::quiet_NaN();
  double g_high = std::numeric_limits<double>::quiet_NaN();
  int boundary = 0;  // critical integer log2 threshold
  double max_deviation = 0.0;
  std::size_t crossings = 0;  // upward crossings of the boundary in the tail
  std::size_t low_steps = 0;
  bool reliable = false;
};

namespace detail {

inline std::vector<std::size_t> upward_crossings(const std::vector<double>& l, std::size_t from, int b) {
  std::vector<std::size_t> out;
  for (std::size_t i = from + 1; i < l.size(); ++i) {
    if (l[i - 1] <= b && l[i] > b) out.push_back(i);
  }
  return out;
}

}  // namespace detail

/// Oscillation statistics over the last `tail` fraction of a trajectory.
/// The lower bin is log2_t <= boundary, where the integer ceiling and hence
/// the scale drop by one step.
inline OscillationReport measure_oscillation(const ToyTrajectory& tr, double tail = 0.3) {
  OscillationReport r;
  const auto& l = tr.log2_t;
  if (l.size() < 4 || tr.diverged) return r;
  const std::size_t from = static_cast<std::size_t>(static_cast<double>(l.size()) * (1.0 - tail));
  std::vector<double> t(l.begin() + static_cast<std::ptrdiff_t>(from), l.end());
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(t.size() / 2), t.end());
  const double median = t[t.size() / 2];
  const int lo_b = static_cast<int>(std::floor(median)), hi_b = static_cast<int>(std::ceil(median));
  const auto c_lo = detail::upward_crossings(l, from, lo_b), c_hi = detail::upward_crossings(l, from, hi_b);
  r.boundary = c_hi.size() > c_lo.size() ? hi_b : lo_b;
  const auto& ups = c_hi.size() > c_lo.size() ? c_hi : c_lo;
  r.crossings = ups.size();
  if (ups.size() >= 2) {
    r.period = static_cast<double>(ups.back() - ups.front()) / static_cast<double>(ups.size() - 1);
  }
  double sum_lo = 0.0, sum_hi = 0.0;
  std::size_t n_lo = 0, n_hi = 0;
  bool within = true;
  for (std::size_t i = from; i < l.size(); ++i) {
    r.max_deviation = std::max(r.max_deviation, std::fabs(l[i] - r.boundary));
    within = within && std::fabs(l[i] - median) <= 1.0;
    if (l[i] <= r.boundary) {
      sum_lo += tr.grad[i];
      ++n_lo;
    } else {
      sum_hi += tr.grad[i];
      ++n_hi;
    }
  }
  r.low_steps = n_lo;
  if (n_lo > 0) r.g_low = sum_lo / static_cast<double>(n_lo);
  if (n_hi > 0) r.g_high = sum_hi / static_cast<double>(n_hi);
  if (n_lo > 0 && n_hi > 0) r.r_g = -r.g_low / r.g_high;
  r.reliable = within && ups.size() >= 2 && r.r_g > 0.0;
  return r;
}

/// First step from which log2_t stays within 1 of `boundary`, or -1.
inline long converged_step(const ToyTrajectory& tr, int boundary) {
  if (tr.diverged) return -1;
  long first = -1;
  for (std::size_t i = 0; i < tr.log2_t.size(); ++i) {
    if (std::fabs(tr.log2_t[i] - boundary) <= 1.0) {
      if (first < 0) first = static_cast<long>(i);
    } else {
      first = -1;
    }
  }
  return first;
}

// Clipped-gradient baseline against the trained power-of-2 threshold.

struct ClipCompareConfig {
  int bits = 8;
  double sigma = 1.0;
  double outlier_frac = 1e-3;
  double outlier_scale = 100.0;  // outliers ~ N(0, (scale * sigma)^2)
  std::size_t batch = 1000;
  long steps = 8000;
  double alpha = 0.01;
  std::uint64_t seed = 0;
};

struct ClipCompareResult {
  double loss_tqt = 0.0;
  double loss_clipped = 0.0;
  double t_tqt = 0.0;
  double n_clipped = 0.0;
  double p_clipped = 0.0;
  double t_clipped = 0.0;  // max(|n|, p)
  double max_abs = 0.0;  // over every training sample seen
};

/// Contaminated normal: each sample is an outlier with probability `frac`.
inline Tensor contaminated_normal(Rng& rng, std::size_t n, double sigma, double frac, double scale) {
  Tensor x(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const bool out = rng.uniform() < frac;
    x[i] = rng.normal() * sigma * (out ? scale : 1.0);
  }
  return x;
}

/// Trains both thresholds with log-domain Adam on fresh minibatches each
/// step. Reported losses are the mean per-sample L2 loss over the last 10% of
/// steps.
inline ClipCompareResult compare_clipped_vs_tqt(const ClipCompareConfig& cfg) {
  if (cfg.steps < 10 || cfg.batch < 1) throw ContractError("compare_clipped_vs_tqt: bad configuration");
  Rng rng(cfg.seed);
  ClipCompareResult res;
  // Both start at three standard deviations of a warm-up sample.
  const std::size_t warm = std::max<std::size_t>(50 * cfg.batch, 10000);
  const Tensor first = contaminated_normal(rng, warm, cfg.sigma, cfg.outlier_frac, cfg.outlier_scale);
  double sq = 0.0;
  for (double v : first.data()) sq += v * v;
  const double init = std::log2(3.0 * std::sqrt(sq / static_cast<double>(warm)));
  double l = init, ln = init, lp = init;
  AdamState a_t(cfg.alpha, 0.9, 0.999), a_n(cfg.alpha, 0.9, 0.999), a_p(cfg.alpha, 0.9, 0.999);
  const long tail_from = cfg.steps - cfg.steps / 10;
  double tail_tqt = 0.0, tail_clip = 0.0;
  for (long step = 0; step < cfg.steps; ++step) {
    const Tensor x = contaminated_normal(rng, cfg.batch, cfg.sigma, cfg.outlier_frac, cfg.outlier_scale);
    for (double v : x.data()) res.max_abs = std::max(res.max_abs, std::fabs(v));

    const QuantizerParams q(cfg.bits, true, l);
    const auto [loss_t, g_t] = toy_loss_grad(x, q);

    const double n_th = -std::exp2(ln), p_th = std::exp2(lp);
    const FakeQuantResult fq = fakequant_clipped(x, n_th, p_th, cfg.bits);
    double loss_c = 0.0, g_n = 0.0, g_p = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double e = fq.y[i] - x[i];
      loss_c += 0.5 * e * e;
      g_n += e * fq.grad_n[i];
      g_p += e * fq.grad_p[i];
    }
    // Chain through n = -2^ln and p = 2^lp.
    g_n *= n_th * std::numbers::ln2;
    g_p *= p_th * std::numbers::ln2;

    if (step >= tail_from) {
      tail_tqt += loss_t / static_cast<double>(cfg.batch);
      tail_clip += loss_c / static_cast<double>(cfg.batch);
    }
    l += adam_step(a_t, g_t);
    ln += adam_step(a_n, g_n);
    lp += adam_step(a_p, g_p);
  }
  const double tail_n = static_cast<double>(cfg.steps - tail_from);
  res.loss_tqt = tail_tqt / tail_n;
  res.loss_clipped = tail_clip / tail_n;
  res.t_tqt = std::exp2(l);
  res.n_clipped = -std::exp2(ln);
  res.p_clipped = std::exp2(lp);
  res.t_clipped = std::max(-res.n_clipped, res.p_clipped);
  return res;
}

}  // namespace tqt::harness
