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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <vector>

#include "ensdiag/model.hpp"
#include "test_util.hpp"

using namespace ensdiag;
using namespace ensdiag::testing;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat rows_of(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

std::vector<double> affine(const std::vector<double>& x, const Tensor& w, const Tensor& b) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b.values[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
    y[j] = s;
  }
  return y;
}

std::vector<double> norm(const std::vector<double>& x, const Tensor& g, const Tensor& b) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) / std::sqrt(var + 1e-12) * g.values[i] + b.values[i];
  return y;
}

/// Straight-line encoder evaluation, one vector at a time.
std::vector<double> oracle_logits(const ModelParams& p, const std::vector<TokenId>& tokens, std::size_t position) {
  const auto& c = p.config;
  const std::size_t n = tokens.size(), d = c.model_dim, dh = d / c.n_heads;
  const Mat tok = rows_of(p.at("embeddings.token")), pos = rows_of(p.at("embeddings.position"));
  Mat x(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> e(d);
    for (std::size_t j = 0; j < d; ++j) e[j] = tok[tokens[i]][j] + pos[i][j];
    x[i] = norm(e, p.at("embeddings.norm.gain"), p.at("embeddings.norm.offset"));
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    Mat q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto h = norm(x[i], p.at(b + "attn_norm.gain"), p.at(b + "attn_norm.offset"));
      q[i] = affine(h, p.at(b + "attn.query.weight"), p.at(b + "attn.query.bias"));
      k[i] = affine(h, p.at(b + "attn.key.weight"), p.at(b + "attn.key.bias"));
      v[i] = affine(h, p.at(b + "attn.value.weight"), p.at(b + "attn.value.bias"));
    }
    Mat att(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < c.n_heads; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> s(n, -INFINITY);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          if (tokens[j] == kPadId) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][head * dh + e] * k[j][head * dh + e];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += tokens[j] == kPadId ? 0.0 : std::exp(s[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
          if (tokens[j] == kPadId) continue;
          const double w = std::exp(s[j] - mx) / z;
          for (std::size_t e = 0; e < dh; ++e) att[i][head * dh + e] += w * v[j][head * dh + e];
        }
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto o = affine(att[i], p.at(b + "attn.output.weight"), p.at(b + "attn.output.bias"));
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o[j];
      const auto h2 = norm(x[i], p.at(b + "ffn_norm.gain"), p.at(b + "ffn_norm.offset"));
      auto f = affine(h2, p.at(b + "ffn.in.weight"), p.at(b + "ffn.in.bias"));
      for (double& u : f) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
      const auto o2 = affine(f, p.at(b + "ffn.out.weight"), p.at(b + "ffn.out.bias"));
      for (std::size_t j = 0; j < d; ++j) x[i][j] += o2[j];
    }
  }
  const auto y = norm(x[position], p.at("head.norm.gain"), p.at("head.norm.offset"));
  return affine(y, p.at("head.output.weight"), p.at("head.output.bias"));
}

ModelParams zero_params(const ModelConfig& c) {
  ModelParams p = init_params(c);
  for (auto& t : p.tensors) t.value.fill(0.0);
  return p;
}

}  // namespace

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(tiny_config().validate());
  auto bad = tiny_config();
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.n_layers = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  const auto paper = paper_profile(4096);
  EXPECT_EQ(paper.model_dim, 768u);
  EXPECT_EQ(paper.n_layers, 12u);
  EXPECT_EQ(paper.n_heads, 12u);
  EXPECT_NO_THROW(paper.validate());
}

TEST(InitParams, DeskParameterCount) {
  // Embeddings 259*64 + 64*64 + 2*64 = 20800; each block 49984; head 2*64 + 64*259 + 259 = 16963.
  const ModelConfig c = desk_profile(259);
  EXPECT_EQ(closed_form_parameter_count(c), 20800u + 2 * 49984u + 16963u);
  EXPECT_EQ(closed_form_parameter_count(c), 137731u);
  EXPECT_EQ(init_params(c).parameter_count(), 137731u);
}

TEST(InitParams, CountIsPureFunctionOfConfig) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto c = tiny_config(5 + rng.uniform_int(30), 4 * (1 + rng.uniform_int(4)), 1 + rng.uniform_int(3), 2, 3 + rng.uniform_int(9),
                         2 + rng.uniform_int(9), rng.next_u64());
    EXPECT_EQ(init_params(c).parameter_count(), closed_form_parameter_count(c));
  }
}

TEST(InitParams, SeedDeterminism) {
  auto c = tiny_config();
  EXPECT_EQ(init_params(c), init_params(c));
  auto c2 = c;
  c2.weight_seed = c.weight_seed + 1;
  EXPECT_FALSE(init_params(c) == init_params(c2));
}

TEST(InitParams, Distribution) {
  const auto p = init_params(desk_profile(259));
  double s = 0.0, ss = 0.0;
  std::size_t n = 0;
  for (const auto& t : p.tensors) {
    const bool gain = t.name.ends_with(".gain");
    const bool zero = t.name.ends_with(".bias") || t.name.ends_with(".offset");
    for (double v : t.value.values) {
      if (gain) {
        EXPECT_EQ(v, 1.0);
      } else if (zero) {
        EXPECT_EQ(v, 0.0);
      } else {
        EXPECT_LE(std::abs(v), 0.04);
        s += v;
        ss += v * v;
        ++n;
      }
    }
  }
  EXPECT_NEAR(s / static_cast<double>(n), 0.0, 1e-3);
  // Truncation at two sigma shrinks the standard deviation to about 0.88 sigma.
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), 0.02 * 0.8796, 5e-4);
}

TEST(InitParams, GroupPartition) {
  const auto c = tiny_config(11, 8, 3);
  const auto p = init_params(c);
  std::set<std::string> names;
  std::size_t counted = 0;
  for (const auto& t : p.tensors) {
    EXPECT_TRUE(names.insert(t.name).second);
    counted += t.value.size();
    if (t.name.starts_with("embeddings.")) {
      EXPECT_EQ(t.group, LayerGroup::embeddings);
      EXPECT_EQ(t.layer, 0u);
    } else if (t.name.starts_with("block")) {
      EXPECT_EQ(t.group, LayerGroup::transformer);
      EXPECT_GE(t.layer, 1u);
      EXPECT_LE(t.layer, c.n_layers);
    } else {
      EXPECT_TRUE(t.name.starts_with("head."));
      EXPECT_EQ(t.group, LayerGroup::head);
      EXPECT_EQ(t.layer, c.n_layers + 1);
    }
  }
  EXPECT_EQ(counted, p.parameter_count());
  EXPECT_EQ(p.layer_count(), c.n_layers + 2);
}

TEST(ForwardMlm, ZeroWeightsGiveUniform) {
  const auto p = zero_params(tiny_config());
  const std::vector<TokenId> tokens{4, kMaskId, 7, 5};
  const std::size_t pos[1] = {1};
  for (double v : forward_mlm(p, tokens, pos).values) EXPECT_EQ(v, 0.0);
  for (double v : predictive_distribution(p, tokens, 1)) EXPECT_DOUBLE_EQ(v, 1.0 / 11.0);
}

TEST(ForwardMlm, MatchesHandRolledSingleHead) {
  const auto c = tiny_config(9, 6, 1, 1, 10, 3, 77);
  const auto p = spread_params(c, 0.5, 1);
  const std::vector<TokenId> tokens{5, kMaskId, 8};
  const std::size_t pos[1] = {1};
  const auto logits = forward_mlm(p, tokens, pos);
  const auto want = oracle_logits(p, tokens, 1);
  for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(logits.values[j], want[j], 1e-10) << j;
}

TEST(ForwardMlm, MatchesHandRolledMultiHeadWithPadding) {
  const auto c = tiny_config(13, 8, 2, 4, 12, 6, 78);
  const auto p = spread_params(c, 0.3, 2);
  const std::vector<TokenId> tokens{5, 9, kMaskId, 12, kPadId, kPadId};
  for (std::size_t at : {0u, 2u, 3u}) {
    const std::size_t pos[1] = {at};
    const auto logits = forward_mlm(p, tokens, pos);
    const auto want = oracle_logits(p, tokens, at);
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(logits.values[j], want[j], 1e-10);
  }
}

TEST(ForwardMlm, PadTailDoesNotMatter) {
  const auto c = tiny_config(13, 8, 2, 2, 12, 8, 5);
  const auto p = spread_params(c, 0.3, 3);
  const std::vector<TokenId> base{4, kMaskId, 9, 6};
  const std::size_t pos[1] = {1};
  const auto ref = forward_mlm(p, base, pos);
  Rng rng(5);
  for (std::size_t extra = 1; extra <= 4; ++extra) {
    std::vector<TokenId> padded = base;
    padded.resize(base.size() + extra, kPadId);
    // Permuting the PAD-only tail leaves the sequence, and the logits, unchanged.
    std::vector<std::size_t> perm(extra);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = extra; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    std::vector<TokenId> permuted = padded;
    for (std::size_t i = 0; i < extra; ++i) permuted[base.size() + i] = padded[base.size() + perm[i]];
    const auto out = forward_mlm(p, permuted, pos);
    for (std::size_t j = 0; j < ref.size(); ++j) EXPECT_NEAR(out.values[j], ref.values[j], 1e-13);
  }
}

TEST(ForwardMlm, RejectsBadInput) {
  const auto p = init_params(tiny_config());
  const std::vector<TokenId> tokens{4, kMaskId};
  const std::size_t bad[1] = {2};
  EXPECT_THROW(forward_mlm(p, tokens, bad), std::out_of_range);
  const std::vector<TokenId> too_long(7, 4);
  const std::size_t ok[1] = {0};
  EXPECT_THROW(forward_mlm(p, too_long, ok), std::invalid_argument);
  const std::vector<TokenId> big_id{99};
  EXPECT_THROW(forward_mlm(p, big_id, ok), std::invalid_argument);
  EXPECT_THROW(predictive_distribution(p, tokens, 0), std::invalid_argument);
}

TEST(PredictiveDistribution, SoftmaxContract) {
  const auto c = tiny_config(17, 8, 2, 2, 12, 6, 9);
  const auto p = spread_params(c, 0.4, 4);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TokenId> tokens(6);
    for (auto& t : tokens) t = static_cast<TokenId>(3 + rng.uniform_int(14));
    const std::size_t at = rng.uniform_int(6);
    tokens[at] = kMaskId;
    const auto dist = predictive_distribution(p, tokens, at);
    double s = 0.0;
    for (double v : dist) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    const std::size_t pos[1] = {at};
    const auto logits = forward_mlm(p, tokens, pos);
    EXPECT_EQ(std::max_element(dist.begin(), dist.end()) - dist.begin(),
              std::max_element(logits.values.begin(), logits.values.end()) - logits.values.begin());
  }
}

TEST(LossAndGrads, UniformLogitsGiveLogV) {
  auto c = tiny_config(4096, 4, 1, 1, 4, 4);
  const auto p = zero_params(c);
  MaskedSequence s{{10, kMaskId, 20, 30}, {1}, {77}};
  const std::vector<MaskedSequence> batch{s};
  EXPECT_NEAR(loss_and_grads(p, batch).loss, std::log(4096.0), 1e-12);
  EXPECT_NEAR(std::log(4096.0), 8.3178, 1e-4);
}

TEST(LossAndGrads, SmallStepDescends) {
  const auto c = tiny_config(23, 8, 2, 2, 16, 8, 31);
  ModelParams p = init_params(c);
  Rng rng(7);
  const auto batch = random_batch(c, 4, rng);
  const auto before = loss_and_grads(p, batch);
  for (std::size_t t = 0; t < p.tensors.size(); ++t)
    for (std::size_t e = 0; e < p.tensors[t].value.size(); ++e) p.tensors[t].value.values[e] -= 1e-3 * before.grads[t].values[e];
  EXPECT_LT(loss_and_grads(p, batch).loss, before.loss);
}

TEST(LossAndGrads, MatchesFiniteDifferencesPerComponent) {
  const auto c = tiny_config(13, 8, 2, 2, 12, 6, 41);
  const auto p = spread_params(c, 0.2, 5);
  Rng rng(8);
  const auto batch = random_batch(c, 2, rng);
  const auto grads = loss_and_grads(p, batch).grads;
  ModelParams work = p;
  const double h = 1e-5;
  for (std::size_t t = 0; t < p.tensors.size(); ++t) {
    double worst = 0.0;
    auto& vals = work.tensors[t].value.values;
    for (std::size_t i = 0; i < std::min<std::size_t>(vals.size(), 12); ++i) {
      const std::size_t e = rng.uniform_int(vals.size());
      const double orig = vals[e];
      vals[e] = orig + h;
      const double up = loss_and_grads(work, batch).loss;
      vals[e] = orig - h;
      const double down = loss_and_grads(work, batch).loss;
      vals[e] = orig;
      worst = std::max(worst, relative_error(grads[t].values[e], (up - down) / (2 * h)));
    }
    EXPECT_LT(worst, 1e-4) << p.tensors[t].name;
  }
}

TEST(LossAndGrads, MeanOverMaskedPositions) {
  const auto c = tiny_config(13, 8, 1, 2, 12, 6, 2);
  const auto p = spread_params(c, 0.2, 6);
  Rng rng(9);
  const auto batch = random_batch(c, 3, rng);
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : batch) {
    const auto logits = forward_mlm(p, s.tokens, s.positions);
    for (std::size_t i = 0; i < s.positions.size(); ++i) {
      std::vector<double> row(logits.row(i).begin(), logits.row(i).end());
      const double lse = log_softmax_inplace(row);
      (void)lse;
      total -= row[s.labels[i]];
      ++count;
    }
  }
  EXPECT_NEAR(loss_and_grads(p, batch).loss, total / static_cast<double>(count), 1e-12);
}

TEST(Dropout, OnlyActiveWithRate) {
  auto c = tiny_config(13, 8, 1, 2, 12, 6, 2);
  c.dropout = 0.5;
  const auto p = init_params(c);
  Rng rng(10);
  const auto batch = random_batch(c, 2, rng, false);
  const double plain = loss_and_grads(p, batch).loss;
  Rng d1(1), d2(1);
  const double a = loss_and_grads(p, batch, DropoutContext{0.5, &d1}).loss;
  const double b = loss_and_grads(p, batch, DropoutContext{0.5, &d2}).loss;
  EXPECT_EQ(a, b);
  EXPECT_NE(a, plain);
  EXPECT_EQ(loss_and_grads(p, batch).loss, plain);
}

TEST(LossAndGrads, FiniteDifferencesAcrossRandomConfigs) {
  Rng rng(11);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t heads = 1 + rng.uniform_int(2);
    const auto c = tiny_config(6 + rng.uniform_int(10), 4 * heads, 1 + rng.uniform_int(2), heads, 3 + rng.uniform_int(8),
                               3 + rng.uniform_int(5), rng.next_u64());
    const auto p = spread_params(c, 0.25, rng.next_u64());
    const auto batch = random_batch(c, 2, rng);
    EXPECT_LT(max_fd_relative_error(p, batch, 3, rng), 1e-4) << "trial " << trial;
  }
}
