// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <vector>

#include "tqt/core/tape.hpp"

namespace tqt::testing {

/// Distance in units in the last place between two doubles.
inline std::uint64_t ulp_distance(double a, double b) {
  if (a == b) return 0;
  auto key = [](double v) {
    std::int64_t i;
    std::memcpy(&i, &v, sizeof i);
    return i < 0 ? std::numeric_limits<std::int64_t>::min() - i : i;
  };
  const std::int64_t ka = key(a), kb = key(b);
  return ka > kb ? static_cast<std::uint64_t>(ka - kb) : static_cast<std::uint64_t>(kb - ka);
}

/// Builds a scalar loss on a fresh tape from the given leaf values.
using LossBuilder = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double eval_loss(const LossBuilder& f, const std::vector<Tensor>& leaves) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : leaves) vars.push_back(tape.leaf(t));
  return f(tape, vars).value()[0];
}

/// Largest relative error between tape gradients and central differences.
inline double max_gradcheck_error(const LossBuilder& f, const std::vector<Tensor>& leaves,
                                  double h = 1e-4) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : leaves) vars.push_back(tape.leaf(t));
  tape.backprop(f(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    for (std::size_t i = 0; i < leaves[k].size(); ++i) {
      auto plus = leaves, minus = leaves;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double fd = (eval_loss(f, plus) - eval_loss(f, minus)) / (2.0 * h);
      const double err = std::fabs(fd - analytic[i]) /
                         std::max({std::fabs(fd), std::fabs(analytic[i]), 1e-3});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace tqt::testing
