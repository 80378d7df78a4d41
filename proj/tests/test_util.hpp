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
#include <cmath>
#include <vector>

#include <Eigen/QR>

#include "ensdiag/metrics.hpp"
#include "ensdiag/model.hpp"
#include "ensdiag/numeric/rng.hpp"

namespace ensdiag::testing {

inline ModelConfig tiny_config(std::size_t vocab = 11, std::size_t d = 8, std::size_t layers = 1, std::size_t heads = 2,
                               std::size_t ffn = 12, std::size_t len = 6, std::uint64_t seed = 5) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.model_dim = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.ffn_dim = ffn;
  c.max_seq_len = len;
  c.weight_seed = seed;
  return c;
}

/// Init with a larger spread so finite differences see non-trivial curvature.
inline ModelParams spread_params(const ModelConfig& c, double scale, std::uint64_t seed) {
  ModelParams p = init_params(c);
  Rng rng(seed);
  for (auto& t : p.tensors)
    for (double& v : t.value.values) v += scale * rng.normal();
  return p;
}

inline std::vector<double> random_distribution(Rng& rng, std::size_t v, double sharpness = 1.0) {
  std::vector<double> p(v);
  double s = 0.0;
  for (double& x : p) {
    x = std::exp(sharpness * rng.normal());
    s += x;
  }
  for (double& x : p) x /= s;
  return p;
}

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace ensdiag::testing

namespace ensdiag::testing {

/// Largest relative error between the analytic MLM-loss gradient and a
/// central difference with step h, over `per_tensor` random entries of every
/// parameter tensor (all entries when the tensor is smaller).
inline double max_fd_relative_error(const ModelParams& params, const std::vector<MaskedSequence>& batch, std::size_t per_tensor, Rng& rng,
                                    double h = 1e-5) {
  const auto analytic = loss_and_grads(params, batch).grads;
  ModelParams work = params;
  double worst = 0.0;
  for (std::size_t t = 0; t < work.tensors.size(); ++t) {
    auto& vals = work.tensors[t].value.values;
    std::vector<std::size_t> entries;
    if (vals.size() <= per_tensor) {
      for (std::size_t e = 0; e < vals.size(); ++e) entries.push_back(e);
    } else {
      for (std::size_t i = 0; i < per_tensor; ++i) entries.push_back(rng.uniform_int(vals.size()));
    }
    for (std::size_t e : entries) {
      const double orig = vals[e];
      vals[e] = orig + h;
      const double up = loss_and_grads(work, batch).loss;
      vals[e] = orig - h;
      const double down = loss_and_grads(work, batch).loss;
      vals[e] = orig;
      worst = std::max(worst, relative_error(analytic[t].values[e], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

/// Random masked batch for a config: content ids only, a few masked slots,
/// and an optional PAD tail.
inline std::vector<MaskedSequence> random_batch(const ModelConfig& c, std::size_t n, Rng& rng, bool pad_tail = true) {
  std::vector<MaskedSequence> out;
  for (std::size_t s = 0; s < n; ++s) {
    MaskedSequence m;
    const std::size_t len = pad_tail ? 2 + rng.uniform_int(c.max_seq_len - 1) : c.max_seq_len;
    m.tokens.assign(c.max_seq_len, kPadId);
    for (std::size_t i = 0; i < len; ++i) m.tokens[i] = static_cast<TokenId>(kNumSpecials + rng.uniform_int(c.vocab_size - kNumSpecials));
    const std::size_t masked = 1 + rng.uniform_int(std::min<std::size_t>(len, 3));
    for (std::size_t i = 0; i < masked; ++i) {
      const std::size_t p = rng.uniform_int(len);
      if (std::find(m.positions.begin(), m.positions.end(), p) != m.positions.end()) continue;
      m.positions.push_back(p);
      m.labels.push_back(m.tokens[p]);
      m.tokens[p] = kMaskId;
    }
    out.push_back(std::move(m));
  }
  return out;
}


/// Haar-distributed orthogonal matrix from the QR of a Gaussian matrix.
inline Tensor random_orthogonal(std::size_t d, Rng& rng) {
  Eigen::MatrixXd g(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (std::size_t j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Tensor out({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) out(i, j) = q(i, j);
  return out;
}

inline Tensor gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.values) v = rng.normal();
  return t;
}

inline EmbeddingMatrix plain_embedding(Tensor t) {
  const std::size_t v = t.rows();
  return EmbeddingMatrix(std::move(t), std::vector<bool>(v, false));
}

/// Column-centered, unit-Frobenius copy.
inline Tensor standardize(const Tensor& x) {
  Tensor y = x;
  for (std::size_t c = 0; c < y.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < y.rows(); ++r) m += y(r, c);
    m /= static_cast<double>(y.rows());
    for (std::size_t r = 0; r < y.rows(); ++r) y(r, c) -= m;
  }
  double n = 0.0;
  for (double v : y.values) n += v * v;
  n = std::sqrt(n);
  for (double& v : y.values) v /= n;
  return y;
}

/// Residual of aligning standardized b onto standardized a with a fixed
/// orthogonal map q and its best scale.
inline double residual_under_map(const Tensor& a, const Tensor& b, const Tensor& q) {
  const Tensor bq = matmul(b, q);
  double t = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    t += a.values[i] * bq.values[i];
    nn += bq.values[i] * bq.values[i];
  }
  const double s = std::max(0.0, t / nn);
  double r = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) r += (a.values[i] - s * bq.values[i]) * (a.values[i] - s * bq.values[i]);
  return r;
}

/// Probes with random content ids and one masked position each.
inline std::vector<ProbeSample> random_probes(const ModelConfig& c, std::size_t n, Rng& rng) {
  std::vector<ProbeSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    ProbeSample p;
    p.tokens.resize(c.max_seq_len);
    for (auto& t : p.tokens) t = static_cast<TokenId>(kNumSpecials + rng.uniform_int(c.vocab_size - kNumSpecials));
    p.position = rng.uniform_int(c.max_seq_len);
    p.label = p.tokens[p.position];
    p.tokens[p.position] = kMaskId;
    out.push_back(std::move(p));
  }
  return out;
}

/// Per-probe backprops through the training loss path, squared and averaged.
inline std::vector<Tensor> oracle_fisher(const ModelParams& params, const std::vector<ProbeSample>& probes) {
  auto sum = params.zeros_like();
  for (const auto& p : probes) {
    const std::vector<MaskedSequence> one{p.as_masked()};
    const auto g = loss_and_grads(params, one).grads;
    for (std::size_t t = 0; t < g.size(); ++t)
      for (std::size_t e = 0; e < g[t].size(); ++e) sum[t].values[e] += g[t].values[e] * g[t].values[e];
  }
  for (auto& t : sum)
    for (double& v : t.values) v /= static_cast<double>(probes.size());
  return sum;
}

}  // namespace ensdiag::testing
