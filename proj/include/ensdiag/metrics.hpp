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
#include <cstddef>
#include <iterator>
#include <span>
#include <utility>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ensdiag/model.hpp"
#include "ensdiag/numeric/stats.hpp"
#include "ensdiag/numeric/svd.hpp"
#include "ensdiag/numeric/tensor.hpp"
#include "ensdiag/train.hpp"

namespace ensdiag {

// ---------------------------------------------------------------------------
// Output distributions

inline double entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log2(x);
  return h;
}

/// Probability vector over a vocabulary. Base-2 entropy is computed on first
/// use and cached.
class Distribution {
 public:
  explicit Distribution(std::vector<double> p, double tol = 1e-9) : p_(std::move(p)) {
    if (p_.empty()) throw std::invalid_argument("Distribution: empty support");
    double s = 0.0;
    for (double x : p_) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw std::invalid_argument("Distribution: entries must be finite and nonnegative");
      s += x;
    }
    if (std::abs(s - 1.0) > tol) throw std::invalid_argument("Distribution: mass " + std::to_string(s) + " is not 1");
  }

  static Distribution uniform(std::size_t v) { return Distribution(std::vector<double>(v, 1.0 / static_cast<double>(v))); }

  std::size_t size() const { return p_.size(); }
  const std::vector<double>& probs() const { return p_; }
  double operator[](std::size_t i) const { return p_[i]; }

  double entropy_bits() const {
    if (!entropy_) entropy_ = ensdiag::entropy_bits(p_);
    return *entropy_;
  }

 private:
  std::vector<double> p_;
  mutable std::optional<double> entropy_;
};

/// D_KL(P || U) in bits, i.e. log2 V - H2(P).
inline double kl_to_uniform(const Distribution& p) {
  return std::log2(static_cast<double>(p.size())) - p.entropy_bits();
}

/// Jensen-Shannon distance with base-2 logs, in [0, 1]. The divergence is
/// summed as per-token KL terms against the mixture, which stays accurate
/// when p and q are close; divergences below 1e-15 are treated as zero.
inline double js_distance(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size()) throw std::invalid_argument("js_distance: support sizes differ");
  double kp = 0.0, kq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p[i], b = q[i];
    const double m = 0.5 * (a + b);
    if (a > 0.0) kp += a * std::log2(a / m);
    if (b > 0.0) kq += b * std::log2(b / m);
  }
  const double jsd = 0.5 * (kp + kq);
  if (jsd < 1e-15) return 0.0;
  return std::min(1.0, std::sqrt(jsd));
}

/// Top-p truncation: keeps the smallest prefix (probability descending, ties
/// by ascending id) whose cumulative mass reaches `mass`, then renormalizes.
inline Distribution nucleus_truncate(const Distribution& p, double mass) {
  if (!(mass > 0.0 && mass <= 1.0)) throw std::invalid_argument("nucleus_truncate: mass must be in (0, 1]");
  if (mass >= 1.0) return p;
  const auto& probs = p.probs();
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return probs[a] != probs[b] ? probs[a] > probs[b] : a < b;
  });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && probs[order[keep]] > 0.0) {
    cum += probs[order[keep]];
    ++keep;
    if (cum >= mass) break;
  }
  std::vector<double> out(probs.size(), 0.0);
  double kept = 0.0;
  for (std::size_t i = 0; i < keep; ++i) kept += probs[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / kept;
  return Distribution(std::move(out));
}

inline double mean_pairwise_js(const std::vector<Distribution>& ds) {
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      s += js_distance(ds[i], ds[j]);
      ++pairs;
    }
  return pairs ? s / static_cast<double>(pairs) : 0.0;
}

struct JsCurvePoint {
  double p = 1.0;
  double mean_js = 0.0;
  double stderr_js = 0.0;
  std::size_t n_probes = 0;

  friend bool operator==(const JsCurvePoint&, const JsCurvePoint&) = default;
};

/// Per-probe statistics accumulated over chunks of probes: KL-to-uniform per
/// member and the pair-averaged JS distance at each grid mass. Values are
/// stored per probe index so the final reduction order never depends on
/// how chunks were scheduled.
class ProbeStatistics {
 public:
  ProbeStatistics(std::size_t members, std::size_t probes, std::vector<double> p_grid)
      : members_(members), grid_(std::move(p_grid)), kl_(members, std::vector<double>(probes, 0.0)),
        js_(grid_.size(), std::vector<double>(probes, 0.0)) {}

  /// Records one probe given each member's predictive distribution.
  void record(std::size_t probe, const std::vector<Distribution>& dists) {
    for (std::size_t m = 0; m < members_; ++m) kl_[m][probe] = kl_to_uniform(dists[m]);
    for (std::size_t g = 0; g < grid_.size(); ++g) {
      std::vector<Distribution> cut;
      cut.reserve(dists.size());
      for (const auto& d : dists) cut.push_back(nucleus_truncate(d, grid_[g]));
      js_[g][probe] = mean_pairwise_js(cut);
    }
  }

  std::vector<JsCurvePoint> js_curve() const {
    std::vector<JsCurvePoint> out;
    for (std::size_t g = 0; g < grid_.size(); ++g) {
      const auto& v = js_[g];
      const double n = static_cast<double>(v.size());
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      const double se = v.size() > 1 ? std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
      out.push_back({grid_[g], mean, se, v.size()});
    }
    return out;
  }

  /// Mean KL-to-uniform (bits) over probes for each member.
  std::vector<double> kl_per_member() const {
    std::vector<double> out;
    for (const auto& v : kl_) out.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    return out;
  }

 private:
  std::size_t members_;
  std::vector<double> grid_;
  std::vector<std::vector<double>> kl_;
  std::vector<std::vector<double>> js_;
};

/// Predictive distributions of every member for every probe, evaluated in
/// probe chunks across `threads` workers, fed to `stats`.
inline void collect_probe_statistics(const std::vector<ModelParams>& members, const std::vector<ProbeSample>& probes,
                                     ProbeStatistics& stats, std::size_t threads = 0) {
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < probes.size(); begin += kChunk) {
    const std::size_t end = std::min(probes.size(), begin + kChunk);
    parallel_for(end - begin, threads, [&](std::size_t off) {
      const auto& probe = probes[begin + off];
      std::vector<Distribution> dists;
      dists.reserve(members.size());
      for (const auto& m : members) dists.emplace_back(predictive_distribution(m, probe.tokens, probe.position));
      stats.record(begin + off, dists);
    });
  }
}

/// Mean pairwise JS distance over probes as a function of the nucleus mass kept.
inline std::vector<JsCurvePoint> ensemble_js_curve(const std::vector<ModelParams>& members, const std::vector<ProbeSample>& probes,
                                                   const std::vector<double>& p_grid, std::size_t threads = 0) {
  if (members.size() < 2) throw std::invalid_argument("ensemble_js_curve: need at least two members");
  if (probes.empty()) throw std::invalid_argument("ensemble_js_curve: no probes");
  ProbeStatistics stats(members.size(), probes.size(), p_grid);
  collect_probe_statistics(members, probes, stats, threads);
  return stats.js_curve();
}

// ---------------------------------------------------------------------------
// Static embeddings

/// Word-embedding table with ids that never take part in neighbor statistics.
struct EmbeddingMatrix {
  Tensor table;                // [V, d]
  std::vector<bool> excluded;  // size V

  EmbeddingMatrix(Tensor t, std::vector<bool> ex) : table(std::move(t)), excluded(std::move(ex)) {
    if (table.rank() != 2 || excluded.size() != table.rows())
      throw std::invalid_argument("EmbeddingMatrix: exclusion set must cover every row");
  }

  /// Token table of a model with the special ids excluded.
  static EmbeddingMatrix from_model(const ModelParams& p) {
    const Tensor& t = p.at("embeddings.token");
    std::vector<bool> ex(t.rows(), false);
    for (std::size_t i = 0; i < std::min(kNumSpecials, t.rows()); ++i) ex[i] = true;
    return {t, std::move(ex)};
  }

  std::size_t vocab() const { return table.rows(); }
};

/// Unit-normalized rows; zero rows and excluded ids are not candidates.
class CosineIndex {
 public:
  explicit CosineIndex(const EmbeddingMatrix& e) : v_(e.vocab()), d_(e.table.cols()), unit_(e.table), candidate_(v_) {
    for (std::size_t i = 0; i < v_; ++i) {
      auto r = unit_.row(i);
      double n = 0.0;
      for (double x : r) n += x * x;
      n = std::sqrt(n);
      candidate_[i] = !e.excluded[i] && n > 0.0;
      if (n > 0.0)
        for (double& x : r) x /= n;
    }
  }

  bool is_candidate(std::size_t i) const { return candidate_[i]; }
  std::size_t vocab() const { return v_; }

  double cosine(std::size_t i, std::size_t j) const {
    const double* a = unit_.data() + i * d_;
    const double* b = unit_.data() + j * d_;
    double s = 0.0;
    for (std::size_t c = 0; c < d_; ++c) s += a[c] * b[c];
    return s;
  }

  /// Top-k candidates other than `token`, by cosine descending, ties by id.
  std::vector<std::size_t> knn(std::size_t token, std::size_t k) const {
    if (token >= v_) throw std::out_of_range("knn: token id out of range");
    if (!candidate_[token]) throw std::invalid_argument("knn: token " + std::to_string(token) + " is excluded or has a zero embedding");
    std::vector<std::pair<double, std::size_t>> sims;
    sims.reserve(v_);
    for (std::size_t j = 0; j < v_; ++j)
      if (j != token && candidate_[j]) sims.emplace_back(cosine(token, j), j);
    k = std::min(k, sims.size());
    auto cmp = [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; };
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), cmp);
    std::vector<std::size_t> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = sims[i].second;
    return out;
  }

 private:
  std::size_t v_, d_;
  Tensor unit_;
  std::vector<bool> candidate_;
};

inline std::vector<std::size_t> knn(const EmbeddingMatrix& e, std::size_t token, std::size_t k) {
  if (k >= e.vocab()) throw std::invalid_argument("knn: k must be smaller than the vocabulary");
  return CosineIndex(e).knn(token, k);
}

namespace detail {
inline void require_compatible(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  if (a.vocab() != b.vocab() || a.excluded != b.excluded)
    throw std::invalid_argument("embedding comparison needs matching vocabularies and exclusion sets");
}
}  // namespace detail

/// Mean over shared candidate tokens of |N_a ∩ N_b| / |N_a ∪ N_b| for top-k lists.
inline double topk_jaccard(const EmbeddingMatrix& a, const EmbeddingMatrix& b, std::size_t k) {
  detail::require_compatible(a, b);
  const CosineIndex ia(a), ib(b);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < a.vocab(); ++t) {
    if (!ia.is_candidate(t) || !ib.is_candidate(t)) continue;
    auto na = ia.knn(t, k), nb = ib.knn(t, k);
    std::sort(na.begin(), na.end());
    std::sort(nb.begin(), nb.end());
    std::vector<std::size_t> inter;
    std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(inter));
    const std::size_t uni = na.size() + nb.size() - inter.size();
    sum += uni ? static_cast<double>(inter.size()) / static_cast<double>(uni) : 1.0;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("topk_jaccard: no candidate tokens");
  return sum / static_cast<double>(n);
}

struct LocalSpearmanResult {
  std::optional<double> value;  // empty when no token was defined in either direction
  std::size_t skipped = 0;      // token-directions with undefined correlation
};

namespace detail {

// Mean over tokens of Spearman(cos-distance in `from`, cos-distance in `to`)
// over from's top-k neighbor set.
inline std::pair<std::optional<double>, std::size_t> directional_spearman(const CosineIndex& from, const CosineIndex& to,
                                                                          std::size_t k) {
  double sum = 0.0;
  std::size_t n = 0, skipped = 0;
  for (std::size_t t = 0; t < from.vocab(); ++t) {
    if (!from.is_candidate(t) || !to.is_candidate(t)) continue;
    const auto nbrs = from.knn(t, k);
    if (nbrs.size() < 2) {
      ++skipped;
      continue;
    }
    std::vector<double> xs, ys;
    for (std::size_t j : nbrs) {
      xs.push_back(1.0 - from.cosine(t, j));
      ys.push_back(1.0 - to.cosine(t, j));
    }
    const auto r = spearman(xs, ys);
    if (!r) {
      ++skipped;
      continue;
    }
    sum += *r;
    ++n;
  }
  if (n == 0) return {std::nullopt, skipped};
  return {sum / static_cast<double>(n), skipped};
}

}  // namespace detail

/// Neighborhood rank agreement: for each token, the k nearest neighbors in
/// one model are ranked by cosine distance in both models and correlated;
/// the two directional means are averaged.
inline LocalSpearmanResult local_spearman(const EmbeddingMatrix& a, const EmbeddingMatrix& b, std::size_t k) {
  detail::require_compatible(a, b);
  const CosineIndex ia(a), ib(b);
  const auto [ab, s1] = detail::directional_spearman(ia, ib, k);
  const auto [ba, s2] = detail::directional_spearman(ib, ia, k);
  LocalSpearmanResult r;
  r.skipped = s1 + s2;
  if (ab && ba) {
    r.value = 0.5 * (*ab + *ba);
  } else if (ab || ba) {
    r.value = ab ? *ab : *ba;
  }
  return r;
}

struct ProcrustesResult {
  double cosine = 0.0;
  double disparity = 0.0;
};

namespace detail {

// Rows of the non-excluded ids, centered per column and scaled to unit
// Frobenius norm.
inline Tensor standardized_rows(const EmbeddingMatrix& e) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < e.vocab(); ++i)
    if (!e.excluded[i]) keep.push_back(i);
  const std::size_t d = e.table.cols();
  Tensor x({keep.size(), d});
  for (std::size_t r = 0; r < keep.size(); ++r)
    for (std::size_t c = 0; c < d; ++c) x(r, c) = e.table(keep[r], c);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) mean += x(r, c);
    mean /= static_cast<double>(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) x(r, c) -= mean;
  }
  const double norm = frobenius_norm(x);
  if (!(norm > 0.0)) throw std::invalid_argument("procrustes: embedding rows are constant");
  for (double& v : x.values) v /= norm;
  return x;
}

// Aligns `moving` onto `fixed` (both standardized): moving * R^T * s with
// R, s from the SVD of fixed^T * moving.
inline ProcrustesResult align_onto(const Tensor& fixed, const Tensor& moving) {
  const Tensor cross = matmul(transpose(moving), fixed);  // moving^T fixed = (fixed^T moving)^T
  const SvdResult svd = svd_small(transpose(cross));      // fixed^T moving = U S V^T
  // R maps fixed -> moving: R = U V^T; moving is aligned by R^T = V U^T.
  const Tensor rt = matmul(transpose(svd.vt), transpose(svd.u));
  double scale = 0.0;
  for (double s : svd.s.values) scale += s;
  Tensor aligned = matmul(moving, rt);
  for (double& v : aligned.values) v *= scale;

  ProcrustesResult r;
  double cos_sum = 0.0;
  std::size_t rows = 0;
  for (std::size_t i = 0; i < fixed.rows(); ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < fixed.cols(); ++c) {
      const double a = fixed(i, c), b = aligned(i, c);
      r.disparity += (a - b) * (a - b);
      dot += a * b;
      na += a * a;
      nb += b * b;
    }
    if (na > 0.0 && nb > 0.0) {
      cos_sum += dot / std::sqrt(na * nb);
      ++rows;
    }
  }
  r.cosine = rows ? cos_sum / static_cast<double>(rows) : 0.0;
  return r;
}

}  // namespace detail

/// Full Procrustes analysis of two embedding tables over their non-excluded
/// rows: translation, unit-norm scaling, optimal orthogonal map (reflections
/// allowed) and optimal scale. Disparity is the residual sum of squares;
/// cosine is the mean row-wise cosine after alignment. Both are averaged over
/// aligning b onto a and a onto b.
inline ProcrustesResult procrustes(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
  detail::require_compatible(a, b);
  if (a.table.cols() != b.table.cols()) throw std::invalid_argument("procrustes: embedding widths differ");
  const std::size_t rows = static_cast<std::size_t>(std::count(a.excluded.begin(), a.excluded.end(), false));
  if (rows < 2) throw std::invalid_argument("procrustes: need at least two non-excluded rows");
  const Tensor sa = detail::standardized_rows(a);
  const Tensor sb = detail::standardized_rows(b);
  const auto ab = detail::align_onto(sa, sb);
  const auto ba = detail::align_onto(sb, sa);
  return {0.5 * (ab.cosine + ba.cosine), 0.5 * (ab.disparity + ba.disparity)};
}

// ---------------------------------------------------------------------------
// Agreement table

struct PairAgreement {
  std::size_t i = 0, j = 0;
  std::vector<double> jaccard;                       // per k in grid
  std::vector<std::optional<double>> spearman;       // per k in grid
  ProcrustesResult procrustes;
};

struct AgreementTable {
  std::vector<std::size_t> k_grid;
  std::vector<PairAgreement> pairs;

  /// Mean over pairs of the per-k Jaccard overlap.
  std::vector<double> mean_jaccard() const {
    std::vector<double> out(k_grid.size(), 0.0);
    for (const auto& p : pairs)
      for (std::size_t k = 0; k < k_grid.size(); ++k) out[k] += p.jaccard[k];
    for (double& v : out) v /= static_cast<double>(pairs.size());
    return out;
  }
  /// Mean over pairs where the statistic is defined.
  std::vector<std::optional<double>> mean_spearman() const {
    std::vector<std::optional<double>> out(k_grid.size());
    for (std::size_t k = 0; k < k_grid.size(); ++k) {
      double s = 0.0;
      std::size_t n = 0;
      for (const auto& p : pairs)
        if (p.spearman[k]) {
          s += *p.spearman[k];
          ++n;
        }
      if (n) out[k] = s / static_cast<double>(n);
    }
    return out;
  }
  ProcrustesResult mean_procrustes() const {
    ProcrustesResult r;
    for (const auto& p : pairs) {
      r.cosine += p.procrustes.cosine;
      r.disparity += p.procrustes.disparity;
    }
    r.cosine /= static_cast<double>(pairs.size());
    r.disparity /= static_cast<double>(pairs.size());
    return r;
  }
};

/// Every metric for every unordered member pair. k values that reach the
/// vocabulary size are clamped to V - 1.
inline AgreementTable agreement_table(const std::vector<EmbeddingMatrix>& members, const std::vector<std::size_t>& k_grid,
                                      std::size_t threads = 0) {
  if (members.size() < 2) throw std::invalid_argument("agreement_table: need at least two members");
  AgreementTable t;
  t.k_grid = k_grid;
  std::vector<std::pair<std::size_t, std::size_t>> idx;
  for (std::size_t i = 0; i < members.size(); ++i)
    for (std::size_t j = i + 1; j < members.size(); ++j) idx.emplace_back(i, j);
  t.pairs.resize(idx.size());
  parallel_for(idx.size(), threads, [&](std::size_t n) {
    const auto [i, j] = idx[n];
    PairAgreement p;
    p.i = i;
    p.j = j;
    for (std::size_t k : k_grid) {
      const std::size_t kk = std::min(k, members[i].vocab() - 1);
      p.jaccard.push_back(topk_jaccard(members[i], members[j], kk));
      p.spearman.push_back(local_spearman(members[i], members[j], kk).value);
    }
    p.procrustes = procrustes(members[i], members[j]);
    t.pairs[n] = std::move(p);
  });
  return t;
}

}  // namespace ensdiag
