// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "tqt/core/tensor.hpp"

namespace tqt {

inline void require_finite_grad(double g, const char* where) {
  if (!std::isfinite(g)) throw TrainingError(std::string("non-finite gradient in ") + where);
}

inline double sgd_step(double param, double grad, double lr) {
  require_finite_grad(grad, "sgd_step");
  if (!std::isfinite(param) || !std::isfinite(lr)) throw TrainingError("sgd_step: non-finite input");
  return param - lr * grad;
}

inline void sgd_step(Tensor& param, const Tensor& grad, double lr) {
  require_same_shape(param.shape(), grad.shape(), "sgd_step");
  for (std::size_t i = 0; i < param.size(); ++i) param[i] = sgd_step(param[i], grad[i], lr);
}

/// Adam with bias correction; update = -alpha * m_hat / (sqrt(v_hat) + eps).
struct AdamState {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<double> m, v;

  AdamState() = default;
  AdamState(double a, double b1, double b2, double e = 1e-8)
      : alpha(a), beta1(b1), beta2(b2), eps(e) {}

  void reset() {
    step = 0;
    m.clear();
    v.clear();
  }
};

/// Advances the state by one gradient and returns the parameter update.
/// `lr` overrides alpha when non-negative (for scheduled learning rates).
inline Tensor adam_step(AdamState& st, const Tensor& grad, double lr = -1.0) {
  if (st.m.empty()) {
    st.m.assign(grad.size(), 0.0);
    st.v.assign(grad.size(), 0.0);
  }
  if (st.m.size() != grad.size()) throw DimensionError("adam_step: gradient size changed");
  ++st.step;
  const double alpha = lr >= 0.0 ? lr : st.alpha;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  Tensor upd(grad.shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    require_finite_grad(g, "adam_step");
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
    upd[i] = -alpha * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + st.eps);
  }
  return upd;
}

inline double adam_step(AdamState& st, double grad, double lr = -1.0) {
  return adam_step(st, Tensor::scalar(grad), lr)[0];
}

/// Gradient normalised by its bias-corrected moving variance, then squashed
/// by tanh.
struct NormedGradState {
  double beta = 0.999;
  double eps = 1e-8;
  long step = 0;
  double v = 0.0;
};

inline double normed_grad(NormedGradState& st, double g) {
  require_finite_grad(g, "normed_grad");
  ++st.step;
  st.v = st.beta * st.v + (1.0 - st.beta) * g * g;
  const double v_hat = st.v / (1.0 - std::pow(st.beta, static_cast<double>(st.step)));
  return std::tanh(g / (std::sqrt(v_hat) + st.eps));
}

struct AdamGuidelines {
  double alpha_max;
  double beta1_min;
  double beta2_min;
  double steps_estimate;  // at alpha_max and beta2_min
};

/// Stable Adam settings for log-threshold training at bit-width b.
inline AdamGuidelines adam_guidelines(int b) {
  if (b < 2) throw ContractError("adam_guidelines: b must be >= 2");
  const double half = std::ldexp(1.0, b - 1);
  const double p = half - 1.0;
  AdamGuidelines g;
  g.alpha_max = 0.1 / std::sqrt(half);
  g.beta1_min = 1.0 / std::numbers::e;
  g.beta2_min = 1.0 - 0.1 / p;
  g.steps_estimate = 1.0 / g.alpha_max + 1.0 / (1.0 - g.beta2_min);
  return g;
}

/// Staircase exponential decay: base * factor^floor(step / (interval * 24 / N)).
struct LrSchedule {
  double base = 1e-2;
  double factor = 0.5;
  double interval_at_24 = 1000.0;

  double at(long step, double batch) const {
    if (step < 0) throw ContractError("lr_schedule: step must be >= 0");
    if (!(batch > 0.0)) throw ContractError("lr_schedule: batch must be positive");
    const double interval = interval_at_24 * 24.0 / batch;
    return base * std::pow(factor, std::floor(static_cast<double>(step) / interval));
  }
};

enum class ParamKind { kWeights, kThresholds };

inline LrSchedule default_schedule(ParamKind kind) {
  return kind == ParamKind::kWeights ? LrSchedule{1e-6, 0.94, 3000.0}
                                     : LrSchedule{1e-2, 0.5, 1000.0};
}

inline double lr_schedule(ParamKind kind, long step, double batch) {
  return default_schedule(kind).at(step, batch);
}

/// Incremental threshold freezing. From `start` steps on, every `every`
/// steps the unfrozen threshold with the smallest |grad| among the eligible
/// ones is frozen. Eligible: the EMA of log2_t and the current value share
/// the same integer ceiling, i.e. sit on the same side of the nearest
/// scale-changing boundary.
class FreezeController {
 public:
  FreezeController() = default;
  FreezeController(std::size_t count, double batch, double start_at_24 = 1000.0, long every = 50,
                   double ema_decay = 0.9)
      : start_(static_cast<long>(std::llround(start_at_24 * 24.0 / batch))),
        every_(every),
        decay_(ema_decay),
        ema_(count, 0.0),
        frozen_(count, false) {
    if (every < 1) throw ContractError("freeze interval must be >= 1");
  }

  long start() const noexcept { return start_; }
  long step() const noexcept { return step_; }
  const std::vector<bool>& frozen() const noexcept { return frozen_; }
  const std::vector<double>& ema() const noexcept { return ema_; }
  std::size_t frozen_count() const {
    return static_cast<std::size_t>(std::count(frozen_.begin(), frozen_.end(), true));
  }

  bool eligible(std::size_t i, double log2_t) const {
    return std::ceil(ema_[i]) == std::ceil(log2_t);
  }

  /// Call once per training step with the current gradients and values.
  /// Returns the index frozen at this step, or -1.
  long update(const std::vector<double>& grads, const std::vector<double>& log2_ts) {
    if (grads.size() != ema_.size() || log2_ts.size() != ema_.size()) {
      throw DimensionError("freeze_step: expected " + std::to_string(ema_.size()) + " thresholds");
    }
    for (std::size_t i = 0; i < ema_.size(); ++i) {
      ema_[i] = step_ == 0 ? log2_ts[i] : decay_ * ema_[i] + (1.0 - decay_) * log2_ts[i];
    }
    long picked = -1;
    if (step_ >= start_ && (step_ - start_) % every_ == 0) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < ema_.size(); ++i) {
        if (frozen_[i] || !eligible(i, log2_ts[i])) continue;
        if (std::fabs(grads[i]) < best) {
          best = std::fabs(grads[i]);
          picked = static_cast<long>(i);
        }
      }
      if (picked >= 0) frozen_[static_cast<std::size_t>(picked)] = true;
    }
    ++step_;
    return picked;
  }

 private:
  long start_ = 0;
  long every_ = 50;
  double decay_ = 0.9;
  long step_ = 0;
  std::vector<double> ema_;
  std::vector<bool> frozen_;
};

/// Per-step CSV: step, loss, then log2_t, grad and frozen flag per threshold.
class TrainingLog {
 public:
  TrainingLog(std::ostream& os, std::vector<std::string> names) : os_(os), names_(std::move(names)) {
    os_ << "step,loss";
    for (const auto& n : names_) os_ << ',' << n << ".log2_t";
    for (const auto& n : names_) os_ << ',' << n << ".grad";
    for (const auto& n : names_) os_ << ',' << n << ".frozen";
    os_ << '\n';
  }

  void row(long step, double loss, const std::vector<double>& log2_ts,
           const std::vector<double>& grads, const std::vector<bool>& frozen) {
    if (log2_ts.size() != names_.size() || grads.size() != names_.size() ||
        frozen.size() != names_.size()) {
      throw DimensionError("training log row size mismatch");
    }
    os_ << step << ',' << fmt(loss);
    for (double v : log2_ts) os_ << ',' << fmt(v);
    for (double v : grads) os_ << ',' << fmt(v);
    for (bool f : frozen) os_ << ',' << (f ? 1 : 0);
    os_ << '\n';
  }

 private:
  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
  }

  std::ostream& os_;
  std::vector<std::string> names_;
};

}  // namespace tqt
