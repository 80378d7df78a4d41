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
#include <string_view>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ensdiag/numeric/autodiff.hpp"
#include "ensdiag/numeric/rng.hpp"
#include "ensdiag/numeric/stats.hpp"
#include "ensdiag/numeric/tensor.hpp"
#include "ensdiag/tokenize.hpp"

namespace ensdiag {

struct ModelConfig {
  std::size_t vocab_size = 259;
  std::size_t max_seq_len = 64;
  std::size_t model_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  double dropout = 0.0;
  std::uint64_t weight_seed = 0;

  void validate() const {
    if (vocab_size <= kNumSpecials || max_seq_len < 1 || model_dim < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1)
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1 and the vocabulary must exceed the specials");
    if (model_dim % n_heads != 0) throw std::invalid_argument("ModelConfig: model_dim must be divisible by n_heads");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout must be in [0, 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Desk-scale defaults for a given vocabulary.
inline ModelConfig desk_profile(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  return c;
}

/// BERT-base dimensions; representable, not meant to be trained here.
inline ModelConfig paper_profile(std::size_t vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.max_seq_len = 512;
  c.model_dim = 768;
  c.n_layers = 12;
  c.n_heads = 12;
  c.ffn_dim = 3072;
  c.dropout = 0.1;
  return c;
}

enum class LayerGroup { embeddings, transformer, head };
inline constexpr std::array<LayerGroup, 3> kLayerGroups = {LayerGroup::embeddings, LayerGroup::transformer, LayerGroup::head};

inline std::string to_string(LayerGroup g) {
  switch (g) {
    case LayerGroup::embeddings: return "embeddings";
    case LayerGroup::transformer: return "transformer";
    case LayerGroup::head: return "head";
  }
  return "?";
}

inline LayerGroup parse_layer_group(std::string_view s) {
  for (auto g : kLayerGroups)
    if (s == to_string(g)) return g;
  throw std::invalid_argument("unknown layer group '" + std::string(s) + "'");
}

struct NamedTensor {
  std::string name;
  Tensor value;
  LayerGroup group;
  std::size_t layer;  // 0 = embeddings, 1..L = blocks, L+1 = head
};

/// Parameter tensors in a fixed order; indices into `tensors` are stable for
/// a given config and double as gradient-buffer indices.
struct ModelParams {
  ModelConfig config;
  std::vector<NamedTensor> tensors;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
  }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < tensors.size(); ++i)
      if (tensors[i].name == name) return i;
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  }
  Tensor& at(std::string_view name) { return tensors[index_of(name)].value; }
  const Tensor& at(std::string_view name) const { return tensors[index_of(name)].value; }

  /// Zero-filled buffers matching every tensor.
  std::vector<Tensor> zeros_like() const {
    std::vector<Tensor> g;
    g.reserve(tensors.size());
    for (const auto& t : tensors) g.emplace_back(t.value.shape);
    return g;
  }

  std::size_t layer_count() const { return config.n_layers + 2; }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config == b.config) || a.tensors.size() != b.tensors.size()) return false;
    for (std::size_t i = 0; i < a.tensors.size(); ++i)
      if (a.tensors[i].name != b.tensors[i].name || !(a.tensors[i].value == b.tensors[i].value)) return false;
    return true;
  }
};

using ParamGrads = std::vector<Tensor>;

/// Closed-form parameter count of the encoder for a config.
inline std::size_t closed_form_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.model_dim, v = c.vocab_size, f = c.ffn_dim;
  const std::size_t embeddings = v * d + c.max_seq_len * d + 2 * d;
  const std::size_t block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
  const std::size_t head = 2 * d + d * v + v;
  return embeddings + c.n_layers * block + head;
}

namespace detail {

enum class Init { normal, zeros, ones };

struct TensorSpec {
  std::string name;
  std::vector<std::size_t> shape;
  LayerGroup group;
  std::size_t layer;
  Init init;
};

inline std::vector<TensorSpec> layout(const ModelConfig& c) {
  const std::size_t d = c.model_dim, f = c.ffn_dim;
  std::vector<TensorSpec> s;
  auto add = [&](std::string name, std::vector<std::size_t> shape, LayerGroup g, std::size_t layer, Init init) {
    s.push_back({std::move(name), std::move(shape), g, layer, init});
  };
  add("embeddings.token", {c.vocab_size, d}, LayerGroup::embeddings, 0, Init::normal);
  add("embeddings.position", {c.max_seq_len, d}, LayerGroup::embeddings, 0, Init::normal);
  add("embeddings.norm.gain", {d}, LayerGroup::embeddings, 0, Init::ones);
  add("embeddings.norm.offset", {d}, LayerGroup::embeddings, 0, Init::zeros);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    const auto g = LayerGroup::transformer;
    add(p + "attn_norm.gain", {d}, g, l + 1, Init::ones);
    add(p + "attn_norm.offset", {d}, g, l + 1, Init::zeros);
    for (const char* proj : {"query", "key", "value", "output"}) {
      add(p + "attn." + proj + ".weight", {d, d}, g, l + 1, Init::normal);
      add(p + "attn." + proj + ".bias", {d}, g, l + 1, Init::zeros);
    }
    add(p + "ffn_norm.gain", {d}, g, l + 1, Init::ones);
    add(p + "ffn_norm.offset", {d}, g, l + 1, Init::zeros);
    add(p + "ffn.in.weight", {d, f}, g, l + 1, Init::normal);
    add(p + "ffn.in.bias", {f}, g, l + 1, Init::zeros);
    add(p + "ffn.out.weight", {f, d}, g, l + 1, Init::normal);
    add(p + "ffn.out.bias", {d}, g, l + 1, Init::zeros);
  }
  add("head.norm.gain", {d}, LayerGroup::head, c.n_layers + 1, Init::ones);
  add("head.norm.offset", {d}, LayerGroup::head, c.n_layers + 1, Init::zeros);
  add("head.output.weight", {d, c.vocab_size}, LayerGroup::head, c.n_layers + 1, Init::normal);
  add("head.output.bias", {c.vocab_size}, LayerGroup::head, c.n_layers + 1, Init::zeros);
  return s;
}

}  // namespace detail

/// Fresh parameters: weights ~ N(0, 0.02^2) truncated at two standard
/// deviations, biases and norm offsets zero, norm gains one. Each tensor draws
/// from its own stream keyed by (weight_seed, tensor index).
inline ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.config = cfg;
  const auto specs = detail::layout(cfg);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    Tensor t(s.shape);
    if (s.init == detail::Init::ones) {
      t.fill(1.0);
    } else if (s.init == detail::Init::normal) {
      Rng rng = Rng::derive(cfg.weight_seed, 0x696e6974ULL /* "init" */, i);
      for (double& v : t.values) v = rng.truncated_normal(0.02, 2.0);
    }
    p.tensors.push_back({s.name, std::move(t), s.group, s.layer});
  }
  return p;
}

/// Checks the invariants the rest of the toolkit relies on: names and shapes
/// match the layout for the config and every tensor carries exactly one of
/// the three group tags.
inline void validate_params(const ModelParams& p) {
  p.config.validate();
  const auto specs = detail::layout(p.config);
  if (specs.size() != p.tensors.size()) throw std::invalid_argument("ModelParams: tensor count does not match config");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& t = p.tensors[i];
    if (t.name != specs[i].name || t.value.shape != specs[i].shape || t.group != specs[i].group || t.layer != specs[i].layer)
      throw std::invalid_argument("ModelParams: tensor '" + t.name + "' does not match the layout for its config");
  }
}

/// Optional training-time dropout source.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
};

namespace detail {

inline Var dropout(Tape& tape, Var x, const DropoutContext& ctx) {
  if (ctx.rate <= 0.0 || ctx.rng == nullptr) return x;
  const Tensor& xv = tape.value(x);
  Tensor mask(xv.shape);
  const double keep = 1.0 - ctx.rate;
  for (double& m : mask.values) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
  return ops::mul(tape, x, tape.constant(std::move(mask)));
}

inline Var linear(Tape& tape, Var x, Var w, Var b) { return ops::add_bias(tape, ops::matmul(tape, x, w), b); }

}  // namespace detail

/// Records the encoder on `tape` and returns logits [|positions|, V] for the
/// queried positions. When `grads` is given, parameter gradients accumulate
/// into it during `tape.backward`.
inline Var record_mlm_logits(Tape& tape, const ModelParams& params, std::span<const TokenId> tokens,
                             std::span<const std::size_t> positions, ParamGrads* grads = nullptr,
                             const DropoutContext& dropout = {}) {
  const ModelConfig& c = params.config;
  if (tokens.empty() || tokens.size() > c.max_seq_len) throw std::invalid_argument("forward_mlm: sequence length out of range");
  for (TokenId t : tokens)
    if (t >= c.vocab_size) throw std::invalid_argument("forward_mlm: token id out of range");
  for (std::size_t p : positions)
    if (p >= tokens.size()) throw std::out_of_range("forward_mlm: position " + std::to_string(p) + " out of range");

  std::vector<Var> leaf(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    leaf[i] = tape.param(params.tensors[i].value, grads ? &(*grads)[i] : nullptr);
  std::size_t cursor = 0;
  auto next = [&] { return leaf[cursor++]; };

  const std::size_t n = tokens.size();
  std::vector<std::size_t> ids(tokens.begin(), tokens.end());
  std::vector<std::size_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;
  std::vector<bool> key_valid(n);
  for (std::size_t i = 0; i < n; ++i) key_valid[i] = tokens[i] != kPadId;

  const Var tok_table = next();
  const Var pos_table = next();
  const Var emb_gain = next();
  const Var emb_offset = next();
  Var x = ops::add(tape, ops::gather_rows(tape, tok_table, std::move(ids)), ops::gather_rows(tape, pos_table, std::move(pos)));
  x = ops::layer_norm(tape, x, emb_gain, emb_offset);
  x = detail::dropout(tape, x, dropout);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const Var g1 = next(), b1 = next();
    const Var wq = next(), bq = next(), wk = next(), bk = next(), wv = next(), bv = next(), wo = next(), bo = next();
    const Var g2 = next(), b2 = next();
    const Var w_in = next(), b_in = next(), w_out = next(), b_out = next();

    const Var h = ops::layer_norm(tape, x, g1, b1);
    const Var q = detail::linear(tape, h, wq, bq);
    const Var k = detail::linear(tape, h, wk, bk);
    const Var v = detail::linear(tape, h, wv, bv);
    const Var att = ops::attention(tape, q, k, v, c.n_heads, key_valid);
    x = ops::add(tape, x, detail::dropout(tape, detail::linear(tape, att, wo, bo), dropout));

    const Var h2 = ops::layer_norm(tape, x, g2, b2);
    const Var f = ops::gelu(tape, detail::linear(tape, h2, w_in, b_in));
    x = ops::add(tape, x, detail::dropout(tape, detail::linear(tape, f, w_out, b_out), dropout));
  }

  const Var head_gain = next(), head_offset = next(), head_w = next(), head_b = next();
  std::vector<std::size_t> rows(positions.begin(), positions.end());
  const Var picked = ops::gather_rows(tape, x, std::move(rows));
  const Var normed = ops::layer_norm(tape, picked, head_gain, head_offset);
  return detail::linear(tape, normed, head_w, head_b);
}

/// Logits [|positions|, V] at the queried positions (no dropout).
inline Tensor forward_mlm(const ModelParams& params, std::span<const TokenId> tokens, std::span<const std::size_t> positions) {
  Tape tape;
  return tape.value(record_mlm_logits(tape, params, tokens, positions));
}

/// One masked sequence: model input, masked positions, and true ids there.
struct MaskedSequence {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<TokenId> labels;

  friend bool operator==(const MaskedSequence&, const MaskedSequence&) = default;
};

/// Context with exactly one MASK position and the true id there.
struct ProbeSample {
  std::vector<TokenId> tokens;
  std::size_t position = 0;
  TokenId label = 0;

  MaskedSequence as_masked() const { return {tokens, {position}, {label}}; }
  friend bool operator==(const ProbeSample&, const ProbeSample&) = default;
};

struct LossAndGrads {
  double loss = 0.0;  // mean NLL over all masked positions, nats
  std::size_t masked = 0;
  ParamGrads grads;
};

/// Mean masked-token NLL over the batch and its exact gradient.
inline LossAndGrads loss_and_grads(const ModelParams& params, std::span<const MaskedSequence> batch,
                                   const DropoutContext& dropout = {}) {
  LossAndGrads out;
  out.grads = params.zeros_like();
  for (const auto& s : batch) {
    if (s.positions.size() != s.labels.size()) throw std::invalid_argument("loss_and_grads: labels/positions mismatch");
    out.masked += s.positions.size();
  }
  if (out.masked == 0) throw std::invalid_argument("loss_and_grads: batch has no masked positions");
  const double inv = 1.0 / static_cast<double>(out.masked);
  double total = 0.0;
  for (const auto& s : batch) {
    if (s.positions.empty()) continue;
    Tape tape;
    const Var logits = record_mlm_logits(tape, params, s.tokens, s.positions, &out.grads, dropout);
    const Var nll = ops::cross_entropy_sum(tape, logits, {s.labels.begin(), s.labels.end()});
    total += tape.value(nll).values[0];
    tape.backward(nll, inv);
  }
  out.loss = total * inv;
  return out;
}

/// Softmax of the logits at a MASK position.
inline std::vector<double> predictive_distribution(const ModelParams& params, std::span<const TokenId> tokens,
                                                   std::size_t position) {
  if (position >= tokens.size()) throw std::out_of_range("predictive_distribution: position out of range");
  if (tokens[position] != kMaskId) throw std::invalid_argument("predictive_distribution: position does not hold [MASK]");
  const std::size_t positions[1] = {position};
  Tensor logits = forward_mlm(params, tokens, positions);
  softmax_inplace(logits.row(0));
  return std::move(logits.values);
}

}  // namespace ensdiag
