// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Threshold initialisation for a quantized graph. Weight groups are set from
// their constants. Activation groups are set one at a time, ordered by the
// topological position of their last member, each from values computed with
// every previously fixed group already quantizing.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tqt/calib/calibration.hpp"
#include "tqt/ir/executor.hpp"

namespace tqt::ir {

inline std::vector<CalibRecord> calibrate_graph(Graph& g, const std::map<std::string, Tensor>& feeds,
                                                const CalibPolicy& policy,
                                                std::size_t bins = Histogram::kDefaultBins) {
  std::vector<CalibRecord> records;
  std::set<std::string> fixed;
  const auto order = g.topo_order();
  std::map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;

  std::vector<std::pair<std::size_t, std::string>> act_groups;
  for (auto& [name, grp] : g.groups()) {
    const auto members = g.group_members(name);
    if (members.empty()) continue;
    if (grp.role == "weight") {
      std::vector<double> samples;
      for (const auto& m : members) {
        const Node& src = g.node(g.node(m).inputs[0]);
        if (src.op != OpKind::kConst) {
          throw TransformError("node '" + m + "': weight quantizer without constant input");
        }
        samples.insert(samples.end(), src.value.vec().begin(), src.value.vec().end());
      }
      const Shape shape{samples.size()};
    const Tensor all(shape, std::move(samples));
      const double t = calibrate_weight(all, policy.weights);
      grp.params.log2_t = std::log2(t);
      records.push_back({name, policy.weights, t, grp.params.bits, grp.params.is_signed});
      fixed.insert(name);
    } else {
      std::size_t last = 0;
      for (const auto& m : members) last = std::max(last, pos.at(m));
      act_groups.emplace_back(last, name);
    }
  }
  std::sort(act_groups.begin(), act_groups.end());

  for (const auto& [last, name] : act_groups) {
    (void)last;
    RunOptions opt;
    opt.active_groups = &fixed;
    Tape tape;
    RunResult r = run_graph(g, tape, feeds, opt);
    std::vector<double> samples;
    for (const auto& m : g.group_members(name)) {
      const Tensor& v = r.value(g.node(m).inputs[0]);
      samples.insert(samples.end(), v.vec().begin(), v.vec().end());
    }
    QuantGroup& grp = g.group(name);
    const Shape shape{samples.size()};
    const Tensor all(shape, std::move(samples));
    if (policy.activations != CalibMethod::kKlj && policy.activations != CalibMethod::kMax) {
      throw ContractError("activation calibration supports klj and max");
    }
    const double t = policy.activations == CalibMethod::kKlj
                         ? calib_klj(all, grp.params.bits, grp.params.is_signed, bins)
                         : calib_max(all);
    grp.params.log2_t = std::log2(t);
    records.push_back({name, policy.activations, t, grp.params.bits, grp.params.is_signed});
    fixed.insert(name);
  }
  return records;
}

}  // namespace tqt::ir
