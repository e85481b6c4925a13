// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tqt/core/tensor.hpp"

namespace tqt {

/// Smallest threshold handed out by any calibrator.
inline constexpr double kMinThreshold = 0x1.0p-10;

/// Magnitude histogram over [0, max|x|] with running moments of the signed
/// samples.
class Histogram {
 public:
  static constexpr std::size_t kDefaultBins = 1024;

  Histogram() = default;

  static Histogram build(std::span<const double> samples, std::size_t bins = kDefaultBins) {
    if (bins == 0) throw ContractError("histogram needs at least one bin");
    Histogram h;
    for (double v : samples) {
      h.max_abs_ = std::max(h.max_abs_, std::fabs(v));
      ++h.n_;
      const double d = v - h.mean_;
      h.mean_ += d / static_cast<double>(h.n_);
      h.m2_ += d * (v - h.mean_);
    }
    const double range = h.max_abs_ > 0.0 ? h.max_abs_ : kMinThreshold;
    h.edges_.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) {
      h.edges_[i] = range * static_cast<double>(i) / static_cast<double>(bins);
    }
    h.counts_.assign(bins, 0.0);
    for (double v : samples) {
      auto k = static_cast<std::size_t>(std::fabs(v) / range * static_cast<double>(bins));
      h.counts_[std::min(k, bins - 1)] += 1.0;
    }
    return h;
  }

  /// Histogram with given counts over [0, range].
  static Histogram from_counts(std::vector<double> counts, double range) {
    if (counts.empty() || !(range > 0.0)) throw ContractError("histogram: bad counts or range");
    Histogram h;
    const std::size_t bins = counts.size();
    h.edges_.resize(bins + 1);
    for (std::size_t i = 0; i <= bins; ++i) {
      h.edges_[i] = range * static_cast<double>(i) / static_cast<double>(bins);
    }
    h.counts_ = std::move(counts);
    double total = 0.0;
    for (double c : h.counts_) total += c;
    h.n_ = static_cast<std::size_t>(std::llround(total));
    h.max_abs_ = range;
    return h;
  }

  std::size_t bins() const noexcept { return counts_.size(); }
  const std::vector<double>& edges() const noexcept { return edges_; }
  const std::vector<double>& counts() const noexcept { return counts_; }
  std::size_t sample_count() const noexcept { return n_; }
  double max_abs() const noexcept { return max_abs_; }
  double mean() const noexcept { return mean_; }
  /// Population variance.
  double variance() const noexcept { return n_ ? m2_ / static_cast<double>(n_) : 0.0; }

 private:
  std::vector<double> edges_;
  std::vector<double> counts_;
  std::size_t n_ = 0;
  double max_abs_ = 0.0;
  double mean_ = 0.0;
  double m2_ = 0.0;
};

inline void require_nonempty(const Tensor& x, const char* what) {
  if (x.empty()) throw ContractError(std::string(what) + ": empty tensor");
}

inline double calib_max(const Tensor& x) {
  require_nonempty(x, "calib_max");
  double m = 0.0;
  for (double v : x.data()) m = std::max(m, std::fabs(v));
  return m > 0.0 ? m : kMinThreshold;
}

inline double calib_nsd(const Tensor& x, double nsd = 3.0) {
  require_nonempty(x, "calib_nsd");
  const Histogram h = Histogram::build(x.data(), 1);
  return std::max(nsd * std::sqrt(h.variance()), kMinThreshold);
}

/// Nearest-rank percentile of |x|, pct in (0, 100].
inline double calib_percentile(const Tensor& x, double pct) {
  require_nonempty(x, "calib_percentile");
  if (!(pct > 0.0 && pct <= 100.0)) throw ContractError("calib_percentile: pct out of range");
  std::vector<double> mags(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mags[i] = std::fabs(x[i]);
  const auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * mags.size()));
  const auto k = std::max<std::size_t>(rank, 1) - 1;
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
  return std::max(mags[k], kMinThreshold);
}

/// Smallest number of retained bins considered by calib_klj.
inline std::size_t klj_first_candidate(std::size_t bins, int bits, bool is_signed) {
  const std::size_t levels = std::size_t{1} << (is_signed ? bits - 1 : bits);
  return std::min(levels, bins);
}

/// Symmetric KL distance J = KL(P||Q) + KL(Q||P) for a threshold at the upper
/// edge of bin keep-1. P is the retained histogram with all clipped mass
/// folded into its last bin; Q is the retained slice re-binned to the
/// quantizer's levels and spread back over its nonzero bins. Both are
/// normalised.
inline double klj_distance(const Histogram& h, std::size_t keep, int bits, bool is_signed) {
  constexpr double kEps = 1e-12;
  const auto& counts = h.counts();
  const std::size_t nb = counts.size();
  if (keep == 0 || keep > nb) throw ContractError("klj_distance: keep out of range");

  std::vector<double> p(counts.begin(), counts.begin() + static_cast<std::ptrdiff_t>(keep));
  double p_total = 0.0;
  for (std::size_t j = keep; j < nb; ++j) p[keep - 1] += counts[j];
  for (double v : p) p_total += v;
  if (!(p_total > 0.0)) throw ContractError("klj_distance: empty histogram");

  const std::size_t levels = std::size_t{1} << (is_signed ? bits - 1 : bits);
  std::vector<double> q(keep, 0.0);
  double q_total = 0.0;
  std::size_t start = 0;
  while (start < keep) {
    const std::size_t level = start * levels / keep;
    std::size_t end = start;
    double mass = 0.0;
    std::size_t nonzero = 0;
    while (end < keep && end * levels / keep == level) {
      mass += counts[end];
      nonzero += counts[end] != 0.0 ? 1 : 0;
      ++end;
    }
    for (std::size_t j = start; j < end; ++j) {
      if (counts[j] != 0.0) q[j] = mass / static_cast<double>(nonzero);
    }
    q_total += mass;
    start = end;
  }

  double j_dist = 0.0;
  for (std::size_t j = 0; j < keep; ++j) {
    const double pj = p[j] / p_total;
    const double qj = q_total > 0.0 ? q[j] / q_total : 0.0;
    if (pj > 0.0) j_dist += pj * std::log((pj + kEps) / (qj + kEps));
    if (qj > 0.0) j_dist += qj * std::log((qj + kEps) / (pj + kEps));
  }
  return j_dist;
}

/// Threshold (a bin upper edge) minimising the KL-J distance; ties go to the
/// smallest candidate.
inline double calib_klj(const Histogram& h, int bits, bool is_signed) {
  double total = 0.0;
  for (double c : h.counts()) total += c;
  if (h.bins() == 0 || !(total > 0.0)) throw ContractError("calib_klj: empty histogram");
  if (bits < 2 || bits > 24) throw ContractError("calib_klj: bit-width must be in [2, 24]");
  std::size_t best = 0;
  double best_j = 0.0;
  for (std::size_t keep = klj_first_candidate(h.bins(), bits, is_signed); keep <= h.bins(); ++keep) {
    const double j = klj_distance(h, keep, bits, is_signed);
    if (best == 0 || j < best_j) {
      best = keep;
      best_j = j;
    }
  }
  return std::max(h.edges()[best], kMinThreshold);
}

inline double calib_klj(const Tensor& x, int bits, bool is_signed,
                        std::size_t bins = Histogram::kDefaultBins) {
  require_nonempty(x, "calib_klj");
  return calib_klj(Histogram::build(x.data(), bins), bits, is_signed);
}

enum class CalibMethod { kMax, kNsd, kPercentile, kKlj };

inline const char* calib_method_name(CalibMethod m) {
  switch (m) {
    case CalibMethod::kMax: return "max";
    case CalibMethod::kNsd: return "3sd";
    case CalibMethod::kPercentile: return "percentile";
    case CalibMethod::kKlj: return "klj";
  }
  return "?";
}

enum class TrainMode { kStatic, kRetrainWt, kRetrainWtTh };

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "static") return TrainMode::kStatic;
  if (s == "retrain-wt") return TrainMode::kRetrainWt;
  if (s == "retrain-wt-th") return TrainMode::kRetrainWtTh;
  throw ContractError("unknown mode '" + s + "' (static, retrain-wt, retrain-wt-th)");
}

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::kStatic: return "static";
    case TrainMode::kRetrainWt: return "retrain-wt";
    case TrainMode::kRetrainWtTh: return "retrain-wt-th";
  }
  return "?";
}

struct CalibPolicy {
  CalibMethod weights;
  CalibMethod activations;
  bool operator==(const CalibPolicy&) const = default;
};

inline CalibPolicy init_thresholds(TrainMode mode) {
  return {mode == TrainMode::kRetrainWtTh ? CalibMethod::kNsd : CalibMethod::kMax,
          CalibMethod::kKlj};
}

/// Threshold for a weight-like tensor. 3SD falls back to MAX when the tensor
/// is constant, since a zero spread says nothing about its range.
inline double calibrate_weight(const Tensor& w, CalibMethod m) {
  if (m == CalibMethod::kNsd) {
    const double t = calib_nsd(w);
    return t > kMinThreshold ? t : calib_max(w);
  }
  if (m == CalibMethod::kMax) return calib_max(w);
  throw ContractError(std::string("unsupported weight calibration method ") + calib_method_name(m));
}

struct CalibRecord {
  std::string name;
  CalibMethod method;
  double t;
  int bits;
  bool is_signed;
};

inline void write_calibration_csv(std::ostream& os, const std::vector<CalibRecord>& rows) {
  os << "name,method,t,log2_t,b,signed\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.name << ',' << calib_method_name(r.method) << ',';
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", r.t, std::log2(r.t));
    os << buf << ',' << r.bits << ',' << (r.is_signed ? 1 : 0) << '\n';
  }
}

}  // namespace tqt
