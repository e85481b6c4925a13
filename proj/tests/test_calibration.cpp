// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <map>
#include <numeric>
#include <sstream>

#include "tqt/calib/calibration.hpp"
#include "tqt/core/rng.hpp"

namespace tqt {
namespace {

TEST(CalibMax, Examples) {
  EXPECT_EQ(calib_max(Tensor::from({-3.0, 1.0, 2.0})), 3.0);
  EXPECT_EQ(calib_max(Tensor::from({0.0, 0.0})), std::ldexp(1.0, -10));
  EXPECT_THROW(calib_max(Tensor()), ContractError);
}

TEST(CalibMax, GaussianSampleWithinThreeToSixSigma) {
  Rng rng(12);
  for (double sigma : {0.01, 1.0, 50.0}) {
    const double t = calib_max(rng.normal_tensor({10000}, sigma));
    EXPECT_GE(t, 3.0 * sigma);
    EXPECT_LE(t, 6.0 * sigma);
  }
}

TEST(CalibNsd, Examples) {
  EXPECT_EQ(calib_nsd(Tensor::from({2.0, 2.0, 2.0})), std::ldexp(1.0, -10));
  EXPECT_DOUBLE_EQ(calib_nsd(Tensor::from({-1.0, 1.0}), 3.0), 3.0);
  Rng rng(13);
  EXPECT_NEAR(calib_nsd(rng.normal_tensor({100000})), 3.0, 0.1);
}

TEST(CalibPercentile, NearestRank) {
  Tensor x(Shape{100});
  for (int i = 0; i < 100; ++i) x[i] = (i % 2 ? -1.0 : 1.0) * (i + 1);
  EXPECT_EQ(calib_percentile(x, 100.0), 100.0);
  EXPECT_EQ(calib_percentile(x, 99.0), 99.0);
  EXPECT_EQ(calib_percentile(x, 50.0), 50.0);
  EXPECT_THROW(calib_percentile(x, 0.0), ContractError);
}

TEST(Histogram, CountsAndMoments) {
  Rng rng(3);
  Tensor x = rng.normal_tensor({5000}, 2.0);
  Histogram h = Histogram::build(x.data(), 64);
  double total = 0.0;
  for (double c : h.counts()) total += c;
  EXPECT_EQ(total, 5000.0);
  EXPECT_EQ(h.sample_count(), 5000u);
  for (std::size_t i = 1; i < h.edges().size(); ++i) EXPECT_GT(h.edges()[i], h.edges()[i - 1]);
  EXPECT_EQ(h.edges().back(), h.max_abs());
  double mean = 0.0, m2 = 0.0;
  for (double v : x.data()) mean += v;
  mean /= 5000.0;
  for (double v : x.data()) m2 += (v - mean) * (v - mean);
  EXPECT_NEAR(h.mean(), mean, 1e-12);
  EXPECT_NEAR(h.variance(), m2 / 5000.0, 1e-10);
}

// Independent evaluator: explicit bin->level map, per-level averages, and a
// direct J sum over normalised vectors.
double reference_j(const std::vector<double>& counts, std::size_t keep, std::size_t levels) {
  std::vector<double> p(counts.begin(), counts.begin() + keep), q(keep, 0.0);
  for (std::size_t j = keep; j < counts.size(); ++j) p[keep - 1] += counts[j];
  std::map<std::size_t, std::pair<double, int>> level;
  for (std::size_t j = 0; j < keep; ++j) {
    auto& e = level[(j * levels) / keep];
    e.first += counts[j];
    if (counts[j] > 0) e.second += 1;
  }
  for (std::size_t j = 0; j < keep; ++j) {
    if (counts[j] > 0) {
      const auto& e = level[(j * levels) / keep];
      q[j] = e.first / e.second;
    }
  }
  const double sp = std::accumulate(p.begin(), p.end(), 0.0);
  const double sq = std::accumulate(q.begin(), q.end(), 0.0);
  double jd = 0.0;
  for (std::size_t j = 0; j < keep; ++j) {
    const double pj = p[j] / sp, qj = sq > 0 ? q[j] / sq : 0.0;
    if (pj > 0) jd += pj * std::log((pj + 1e-12) / (qj + 1e-12));
    if (qj > 0) jd += qj * std::log((qj + 1e-12) / (pj + 1e-12));
  }
  return jd;
}

std::size_t reference_argmin(const std::vector<double>& counts, std::size_t levels) {
  const std::size_t first = std::min(levels, counts.size());
  std::size_t best = first;
  double bj = reference_j(counts, first, levels);
  for (std::size_t k = first + 1; k <= counts.size(); ++k) {
    const double j = reference_j(counts, k, levels);
    if (j < bj) {
      bj = j;
      best = k;
    }
  }
  return best;
}

TEST(CalibKlj, SingleBinMass) {
  std::vector<double> c(1024, 0.0);
  c[500] = 40.0;
  Histogram h = Histogram::from_counts(c, 1024.0);
  EXPECT_EQ(calib_klj(h, 8, true), 501.0);
  EXPECT_NEAR(klj_distance(h, 501, 8, true), 0.0, 1e-15);
  EXPECT_GT(klj_distance(h, 500, 8, true), 0.0);
}

TEST(CalibKlj, UniformKeepsFullRange) {
  Histogram h = Histogram::from_counts(std::vector<double>(1024, 5.0), 1.0);
  EXPECT_EQ(calib_klj(h, 8, true), 1.0);
  EXPECT_EQ(reference_argmin(h.counts(), 128), 1024u);
}

TEST(CalibKlj, AgreesWithIndependentScan) {
  Rng rng(21);
  for (int trial = 0; trial < 4; ++trial) {
    Tensor x = rng.normal_tensor({20000});
    Histogram h = Histogram::build(x.data(), 256);
    for (auto [b, sgn] : {std::pair{4, true}, std::pair{8, false}}) {
      const std::size_t levels = std::size_t{1} << (sgn ? b - 1 : b);
      const std::size_t k = reference_argmin(h.counts(), levels);
      EXPECT_EQ(calib_klj(h, b, sgn), h.edges()[k]);
      for (std::size_t keep : {1u, 17u, 200u, 256u}) {
        EXPECT_NEAR(klj_distance(h, keep, b, sgn), reference_j(h.counts(), keep, levels), 1e-12);
      }
    }
  }
}

TEST(CalibKlj, GaussianClipsTail) {
  for (std::uint64_t seed : {22u, 23u, 24u}) {
    Rng rng(seed);
    Tensor x = rng.normal_tensor({100000});
    for (int b : {4, 8}) {
      const double t = calib_klj(x, b, true);
      EXPECT_LT(t, calib_max(x));
      EXPECT_GT(t, 1.0);
    }
  }
}

TEST(CalibKlj, InvariantToMassScaling) {
  Rng rng(23);
  Tensor x = rng.normal_tensor({5000});
  Histogram h = Histogram::build(x.data(), 512);
  std::vector<double> scaled = h.counts();
  for (auto& c : scaled) c *= 7.0;
  Histogram h7 = Histogram::from_counts(scaled, h.max_abs());
  EXPECT_EQ(calib_klj(h, 8, true), calib_klj(h7, 8, true));
}

TEST(CalibKlj, DistanceNonNegative) {
  Rng rng(24);
  Histogram h = Histogram::build(rng.normal_tensor({3000}).data(), 128);
  for (std::size_t k = 1; k <= 128; ++k) EXPECT_GE(klj_distance(h, k, 4, true), 0.0);
}

TEST(CalibKlj, EmptyHistogramThrows) {
  EXPECT_THROW(calib_klj(Histogram::from_counts(std::vector<double>(8, 0.0), 1.0), 8, true),
               ContractError);
}

TEST(InitThresholds, PolicyTable) {
  EXPECT_EQ(init_thresholds(TrainMode::kStatic), (CalibPolicy{CalibMethod::kMax, CalibMethod::kKlj}));
  EXPECT_EQ(init_thresholds(TrainMode::kRetrainWt), (CalibPolicy{CalibMethod::kMax, CalibMethod::kKlj}));
  EXPECT_EQ(init_thresholds(TrainMode::kRetrainWtTh), (CalibPolicy{CalibMethod::kNsd, CalibMethod::kKlj}));
  EXPECT_EQ(parse_train_mode("retrain-wt-th"), TrainMode::kRetrainWtTh);
  EXPECT_THROW(parse_train_mode("dynamic"), ContractError);
}

TEST(CalibrateWeight, ConstantTensorFallsBackToMax) {
  EXPECT_EQ(calibrate_weight(Tensor(Shape{9}, 1.0 / 9.0), CalibMethod::kNsd), 1.0 / 9.0);
}

TEST(CalibReport, CsvRows) {
  std::ostringstream os;
  write_calibration_csv(os, {{"conv1/w", CalibMethod::kMax, 2.0, 8, true}});
  EXPECT_EQ(os.str(), "name,method,t,log2_t,b,signed\nconv1/w,max,2,1,8,1\n");
}

}  // namespace
}  // namespace tqt
