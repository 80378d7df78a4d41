// Copyright 2026 The ensdiag Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ensdiag/model.hpp"
#include "ensdiag/numeric/exact_sum.hpp"
#include "ensdiag/train.hpp"

namespace ensdiag {

/// Diagonal of the empirical Fisher: per parameter entry, the mean over
/// probes of the squared gradient of log P(label | context).
struct FisherDiag {
  std::vector<Tensor> mean;  // parallel to ModelParams::tensors
  std::size_t count = 0;     // probes that contributed
  std::size_t skipped = 0;   // probes dropped for non-finite gradients
};

/// Gradient of log P(probe.label | probe.tokens) with respect to every parameter.
inline ParamGrads log_likelihood_gradient(const ModelParams& params, const ProbeSample& probe) {
  ParamGrads g = params.zeros_like();
  Tape tape;
  const std::size_t pos[1] = {probe.position};
  const Var logits = record_mlm_logits(tape, params, probe.tokens, pos, &g);
  const Var nll = ops::cross_entropy_sum(tape, logits, {probe.label});
  tape.backward(nll, -1.0);
  return g;
}

/// Probe gradients are computed in parallel chunks and folded into exactly
/// rounded per-entry sums in probe order, so the estimate is bitwise
/// independent of probe order and of duplicating the probe list.
inline FisherDiag fisher_diag(const ModelParams& params, const std::vector<ProbeSample>& probes, std::size_t threads = 0) {
  std::vector<NonnegativeSums> acc;
  for (const auto& t : params.tensors) acc.emplace_back(t.value.size());
  FisherDiag fd;
  const std::size_t per_probe = params.parameter_count();
  const std::size_t chunk = std::clamp<std::size_t>((std::size_t{1} << 24) / std::max<std::size_t>(per_probe, 1), 1, 64);
  for (std::size_t begin = 0; begin < probes.size(); begin += chunk) {
    const std::size_t end = std::min(probes.size(), begin + chunk);
    std::vector<ParamGrads> grads(end - begin);
    parallel_for(end - begin, threads, [&](std::size_t i) { grads[i] = log_likelihood_gradient(params, probes[begin + i]); });
    for (auto& g : grads) {
      const bool finite = std::all_of(g.begin(), g.end(), [](const Tensor& t) { return t.all_finite(); });
      if (!finite) {
        ++fd.skipped;
        continue;
      }
      for (std::size_t t = 0; t < g.size(); ++t)
        for (std::size_t e = 0; e < g[t].size(); ++e) {
          const double v = g[t].values[e];
          acc[t].add(e, v * v);
        }
      ++fd.count;
    }
  }
  const double n = static_cast<double>(fd.count);
  for (std::size_t t = 0; t < acc.size(); ++t) {
    Tensor m(params.tensors[t].value.shape);
    if (fd.count > 0)
      for (std::size_t e = 0; e < acc[t].size(); ++e) m.values[e] = acc[t].value(e) / n;
    fd.mean.push_back(std::move(m));
  }
  return fd;
}

/// Unnormalized Fisher mass per layer group and per layer (0 = embeddings,
/// 1..L = blocks, L+1 = head).
struct FisherTotals {
  std::array<double, 3> group{};
  std::vector<double> layer;
  std::vector<LayerGroup> layer_group;
};

struct FisherShares {
  std::array<double, 3> group{};  // embeddings, transformer, head
  std::vector<double> layer;
  std::vector<LayerGroup> layer_group;

  double share(LayerGroup g) const { return group[static_cast<std::size_t>(g)]; }
};

inline FisherTotals fisher_totals(const FisherDiag& fd, const ModelParams& params) {
  if (fd.mean.size() != params.tensors.size()) throw std::invalid_argument("group_aggregate: Fisher diagonal does not cover every parameter tensor");
  std::array<ExactSum, 3> g;
  std::vector<ExactSum> l(params.layer_count());
  FisherTotals out;
  out.layer_group.resize(params.layer_count());
  for (std::size_t t = 0; t < fd.mean.size(); ++t) {
    const auto& nt = params.tensors[t];
    if (!fd.mean[t].same_shape(nt.value)) throw std::invalid_argument("group_aggregate: shape mismatch for '" + nt.name + "'");
    for (double v : fd.mean[t].values) {
      g[static_cast<std::size_t>(nt.group)].add(v);
      l[nt.layer].add(v);
    }
    out.layer_group[nt.layer] = nt.group;
  }
  for (std::size_t i = 0; i < 3; ++i) out.group[i] = g[i].value();
  for (auto& s : l) out.layer.push_back(s.value());
  return out;
}

/// Normalizes totals into shares; empty when the total mass is zero.
inline std::optional<FisherShares> normalize(const FisherTotals& t) {
  ExactSum total;
  for (double v : t.group) total.add(v);
  const double z = total.value();
  if (!(z > 0.0)) return std::nullopt;
  FisherShares s;
  for (std::size_t i = 0; i < 3; ++i) s.group[i] = t.group[i] / z;
  for (double v : t.layer) s.layer.push_back(v / z);
  s.layer_group = t.layer_group;
  return s;
}

inline std::optional<FisherShares> group_aggregate(const FisherDiag& fd, const ModelParams& params) {
  return normalize(fisher_totals(fd, params));
}

/// Member totals averaged entrywise (before any normalization).
inline FisherTotals average_totals(const std::vector<FisherTotals>& members) {
  if (members.empty()) throw std::invalid_argument("average_totals: no members");
  FisherTotals out;
  out.layer_group = members.front().layer_group;
  const double n = static_cast<double>(members.size());
  for (std::size_t i = 0; i < 3; ++i) {
    ExactSum s;
    for (const auto& m : members) s.add(m.group[i]);
    out.group[i] = s.value() / n;
  }
  for (std::size_t l = 0; l < members.front().layer.size(); ++l) {
    ExactSum s;
    for (const auto& m : members) s.add(m.layer.at(l));
    out.layer.push_back(s.value() / n);
  }
  return out;
}

struct EnsembleFisher {
  std::optional<FisherShares> ensemble;
  std::vector<std::optional<FisherShares>> members;
  std::vector<FisherDiag> diagonals;
};

inline EnsembleFisher ensemble_fisher_detail(const std::vector<ModelParams>& members, const std::vector<ProbeSample>& probes,
                                             std::size_t threads = 0) {
  if (members.empty()) throw std::invalid_argument("ensemble_fisher: need at least one member");
  EnsembleFisher out;
  std::vector<FisherTotals> totals;
  for (const auto& m : members) {
    out.diagonals.push_back(fisher_diag(m, probes, threads));
    totals.push_back(fisher_totals(out.diagonals.back(), m));
    out.members.push_back(normalize(totals.back()));
  }
  out.ensemble = normalize(average_totals(totals));
  return out;
}

/// Group shares of the ensemble: member group sums are averaged, then normalized once.
inline std::optional<FisherShares> ensemble_fisher(const std::vector<ModelParams>& members, const std::vector<ProbeSample>& probes,
                                                   std::size_t threads = 0) {
  return ensemble_fisher_detail(members, probes, threads).ensemble;
}

}  // namespace ensdiag
