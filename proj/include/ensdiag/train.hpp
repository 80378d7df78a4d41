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
#include <atomic>
#include <optional>
#include <span>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <future>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ensdiag/corpus.hpp"
#include "ensdiag/model.hpp"
#include "ensdiag/numeric/rng.hpp"
#include "ensdiag/tokenize.hpp"

namespace ensdiag {

enum class MaskPolicy { bert_80_10_10, mask_only };

inline std::string to_string(MaskPolicy p) { return p == MaskPolicy::bert_80_10_10 ? "bert-80-10-10" : "mask-only"; }
inline MaskPolicy parse_mask_policy(std::string_view s) {
  if (s == "bert-80-10-10") return MaskPolicy::bert_80_10_10;
  if (s == "mask-only") return MaskPolicy::mask_only;
  throw std::invalid_argument("unknown mask policy '" + std::string(s) + "'");
}

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 0.5;
};

struct TrainConfig {
  ModelConfig model;  // weight_seed is replaced per member
  std::uint64_t data_seed = 0;
  std::vector<std::uint64_t> weight_seeds;
  std::size_t epochs = 5;
  std::size_t sequences_per_epoch = 1000;
  std::size_t batch_size = 32;
  double mask_rate = 0.15;
  MaskPolicy mask_policy = MaskPolicy::bert_80_10_10;
  AdamWHyper optimizer;
  double warmup_fraction = 0.01;
  // When set, mask positions also depend on the member's weight seed, so
  // members no longer see identical (input, label) pairs.
  bool member_specific_masking = false;
  std::size_t threads = 0;  // 0 = hardware concurrency

  std::size_t seq_len() const { return model.max_seq_len; }

  void validate() const {
    model.validate();
    if (weight_seeds.empty()) throw std::invalid_argument("TrainConfig: at least one weight seed is required");
    if (epochs < 1 || sequences_per_epoch < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs, sequences and batch size must be >= 1");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw std::invalid_argument("TrainConfig: mask rate must be in [0, 1]");
    const auto& o = optimizer;
    if (!(o.lr > 0.0) || !(o.beta1 >= 0.0 && o.beta1 < 1.0) || !(o.beta2 >= 0.0 && o.beta2 < 1.0) || !(o.eps > 0.0) ||
        !(o.weight_decay >= 0.0) || !(o.clip_norm > 0.0))
      throw std::invalid_argument("TrainConfig: optimizer hyperparameters out of range");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("TrainConfig: warmup fraction must be in [0, 1)");
  }
};

/// Selects each non-PAD token with probability `rate` (at least one is
/// forced), then applies the replacement policy at selected positions:
/// 80% MASK / 10% random content id / 10% unchanged, or always MASK.
inline MaskedSequence mask_tokens(std::span<const TokenId> ids, double rate, Rng& rng, std::size_t vocab_size,
                                  MaskPolicy policy = MaskPolicy::bert_80_10_10) {
  MaskedSequence out;
  out.tokens.assign(ids.begin(), ids.end());
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != kPadId) candidates.push_back(i);
  if (candidates.empty()) throw std::invalid_argument("mask_tokens: sequence has no non-PAD token");

  for (std::size_t i : candidates)
    if (rng.uniform() < rate) out.positions.push_back(i);
  if (out.positions.empty()) out.positions.push_back(candidates[rng.uniform_int(candidates.size())]);

  for (std::size_t p : out.positions) {
    out.labels.push_back(ids[p]);
    const double u = rng.uniform();
    if (policy == MaskPolicy::mask_only || u < 0.8) {
      out.tokens[p] = kMaskId;
    } else if (u < 0.9) {
      out.tokens[p] = static_cast<TokenId>(kNumSpecials + rng.uniform_int(vocab_size - kNumSpecials));
    }
  }
  return out;
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;

  static AdamState for_params(const ModelParams& p) { return {p.zeros_like(), p.zeros_like(), 0}; }
};

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;     // before clipping
  double clip_scale = 1.0;
};

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values) s += v * v;
  return std::sqrt(s);
}

/// Scales grads in place so their global norm is at most `max_norm`; returns the scale.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double n = global_norm(grads);
  if (!(n > max_norm)) return 1.0;
  const double scale = max_norm / n;
  for (auto& g : grads)
    for (double& v : g.values) v *= scale;
  return scale;
}

/// Global-norm clipping, then AdamW with bias correction and decoupled weight
/// decay. A non-finite gradient leaves params and state untouched.
inline StepReport adamw_step(ModelParams& params, std::vector<Tensor>& grads, AdamState& state, const AdamWHyper& hyper,
                             std::optional<double> lr_override = std::nullopt) {
  StepReport r;
  if (grads.size() != params.tensors.size()) throw std::invalid_argument("adamw_step: gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].same_shape(params.tensors[i].value)) throw std::invalid_argument("adamw_step: gradient shape mismatch for '" + params.tensors[i].name + "'");
  r.grad_norm = global_norm(grads);
  if (!std::isfinite(r.grad_norm)) return r;
  r.clip_scale = clip_global_norm(grads, hyper.clip_norm);

  const double lr = lr_override.value_or(hyper.lr);
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& theta = params.tensors[i].value.values;
    auto& m = state.m[i].values;
    auto& v = state.v[i].values;
    const auto& g = grads[i].values;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      theta[j] -= lr * hyper.weight_decay * theta[j];
      m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      theta[j] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
  r.applied = true;
  return r;
}

// ---------------------------------------------------------------------------
// Data

/// Concatenated token ids of every document/sequence of a source.
inline std::vector<TokenId> token_stream(const std::vector<std::string>& docs, const TokenizerSpec& tok) {
  std::vector<TokenId> out;
  for (const auto& d : docs) {
    auto ids = tok.encode(d);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

inline std::size_t min_fragment_for(const TokenizerSpec& tok) {
  return tok.scheme() == Scheme::kmer ? static_cast<std::size_t>(tok.k()) : 1;
}

inline std::vector<TokenId> token_stream(const CorpusSource& src, const TokenizerSpec& tok) {
  return token_stream(read_corpus(src, min_fragment_for(tok)), tok);
}

using Window = std::vector<TokenId>;

/// Non-overlapping windows of `len` tokens; a short tail is dropped.
inline std::vector<Window> make_windows(std::span<const TokenId> stream, std::size_t len) {
  std::vector<Window> out;
  for (std::size_t p = 0; p + len <= stream.size(); p += len) out.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(p), stream.begin() + static_cast<std::ptrdiff_t>(p + len));
  return out;
}

/// Masked training sequences as a pure function of (data seed, epoch, index).
/// Every ensemble member built from the same config sees the same batches.
class BatchStream {
 public:
  BatchStream(const std::vector<Window>& windows, const TrainConfig& cfg, std::uint64_t member_seed = 0)
      : windows_(&windows), cfg_(cfg), member_seed_(member_seed) {
    if (windows.empty()) throw std::invalid_argument("BatchStream: no training windows");
  }

  std::size_t batches_per_epoch() const { return (cfg_.sequences_per_epoch + cfg_.batch_size - 1) / cfg_.batch_size; }

  /// Window indices visited in an epoch. Passes over the pool use fresh
  /// shuffles when sequences_per_epoch exceeds the pool.
  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    const std::size_t w = windows_->size();
    std::vector<std::size_t> order;
    order.reserve(cfg_.sequences_per_epoch);
    for (std::size_t pass = 0; order.size() < cfg_.sequences_per_epoch; ++pass) {
      std::vector<std::size_t> perm(w);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng = Rng::derive(cfg_.data_seed, 0x7065726dULL /* "perm" */, epoch, pass);
      for (std::size_t i = w; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
      for (std::size_t i = 0; i < w && order.size() < cfg_.sequences_per_epoch; ++i) order.push_back(perm[i]);
    }
    return order;
  }

  MaskedSequence sequence(std::size_t epoch, std::size_t index, std::size_t window) const {
    Rng rng = cfg_.member_specific_masking
                  ? Rng::derive(cfg_.data_seed, 0x6d61736bULL /* "mask" */, epoch, index, member_seed_)
                  : Rng::derive(cfg_.data_seed, 0x6d61736bULL, epoch, index);
    return mask_tokens((*windows_)[window], cfg_.mask_rate, rng, cfg_.model.vocab_size, cfg_.mask_policy);
  }

  std::vector<MaskedSequence> batch(std::size_t epoch, std::size_t b, const std::vector<std::size_t>& order) const {
    std::vector<MaskedSequence> out;
    const std::size_t begin = b * cfg_.batch_size;
    const std::size_t end = std::min(order.size(), begin + cfg_.batch_size);
    for (std::size_t s = begin; s < end; ++s) out.push_back(sequence(epoch, s, order[s]));
    return out;
  }

  std::vector<MaskedSequence> batch(std::size_t epoch, std::size_t b) const { return batch(epoch, b, epoch_order(epoch)); }

 private:
  const std::vector<Window>* windows_;
  TrainConfig cfg_;
  std::uint64_t member_seed_;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochRecord {
  std::size_t member = 0;
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double wall_seconds = 0.0;
};

struct MemberResult {
  ModelParams params;
  std::vector<double> epoch_losses;
  std::size_t rejected_steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline double warmup_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  const auto warm = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (warm == 0 || step >= warm) return cfg.optimizer.lr;
  return cfg.optimizer.lr * static_cast<double>(step) / static_cast<double>(warm);
}

/// Trains one member from its weight seed over the shared batch stream.
inline MemberResult train_member(const TrainConfig& cfg, std::size_t member, const std::vector<Window>& windows,
                                 const EpochCallback& on_epoch = {}) {
  ModelConfig mc = cfg.model;
  mc.weight_seed = cfg.weight_seeds.at(member);
  MemberResult r{init_params(mc), {}, 0};
  AdamState state = AdamState::for_params(r.params);
  const BatchStream stream(windows, cfg, mc.weight_seed);
  const std::size_t per_epoch = stream.batches_per_epoch();
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = stream.epoch_order(e);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      ++step;
      const auto batch = stream.batch(e, b, order);
      Rng drop_rng = Rng::derive(mc.weight_seed, 0x64726f70ULL /* "drop" */, step);
      auto lg = loss_and_grads(r.params, batch, DropoutContext{mc.dropout, &drop_rng});
      if (!std::isfinite(lg.loss))
        throw TrainingDiverged("member " + std::to_string(member) + ": non-finite loss at epoch " + std::to_string(e + 1) +
                               ", step " + std::to_string(step));
      loss_sum += lg.loss;
      const auto rep = adamw_step(r.params, lg.grads, state, cfg.optimizer, warmup_lr(cfg, step, total));
      if (!rep.applied) ++r.rejected_steps;
    }
    const double mean = loss_sum / static_cast<double>(per_epoch);
    r.epoch_losses.push_back(mean);
    if (on_epoch) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      on_epoch({member, e + 1, mean, secs});
    }
  }
  return r;
}

/// N trained members plus what produced them.
struct EnsembleCheckpoint {
  TrainConfig config;
  std::vector<ModelParams> members;
  std::vector<std::vector<double>> epoch_losses;
};

/// Runs `job(i)` for i in [0, n) on up to `threads` workers; rethrows the
/// first failure (lowest index) after all jobs finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  std::vector<std::exception_ptr> errors(n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            job(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline EnsembleCheckpoint train_ensemble(const TrainConfig& cfg, const std::vector<Window>& windows,
                                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const std::size_t n = cfg.weight_seeds.size();
  std::vector<MemberResult> results(n);
  std::mutex log_mutex;
  EpochCallback guarded = on_epoch ? EpochCallback([&](const EpochRecord& r) {
    std::lock_guard lock(log_mutex);
    on_epoch(r);
  })
                                   : EpochCallback{};
  parallel_for(n, cfg.threads, [&](std::size_t i) { results[i] = train_member(cfg, i, windows, guarded); });
  EnsembleCheckpoint out{cfg, {}, {}};
  for (auto& r : results) {
    out.members.push_back(std::move(r.params));
    out.epoch_losses.push_back(std::move(r.epoch_losses));
  }
  return out;
}

/// Tokenizes the whole source and trains on all of its windows.
inline EnsembleCheckpoint train_ensemble(const TrainConfig& cfg, const CorpusSource& source, const TokenizerSpec& tok,
                                         const EpochCallback& on_epoch = {}) {
  const auto stream = token_stream(source, tok);
  return train_ensemble(cfg, make_windows(stream, cfg.seq_len()), on_epoch);
}

}  // namespace ensdiag
