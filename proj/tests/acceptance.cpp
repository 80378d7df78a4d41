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

// Acceptance checks. One line per criterion:
//   acceptance [criterion ...]
// With no arguments every criterion runs. Exit status is nonzero if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ensdiag/experiment.hpp"
#include "test_util.hpp"

using namespace ensdiag;
using namespace ensdiag::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes.
constexpr std::size_t kGradConfigs = 24;
constexpr double kGradTol = 1e-4;
constexpr double kFdStep = 1e-5;
constexpr std::size_t kMetricSamples = 10000;
constexpr double kTriangleSlack = 1e-12;
constexpr double kEntropyTol = 1e-9;
constexpr double kRatioTol = 1e-12;
constexpr std::size_t kProcrustesPairs = 1000;
constexpr std::size_t kProcrustesMaps = 1000;
constexpr double kSimilarityDisparity = 1e-10;
constexpr double kOptimalitySlack = 1e-12;
constexpr double kFisherTol = 1e-12;
constexpr double kShareTol = 1e-9;
constexpr double kRunSeconds = 600.0;
constexpr double kKlMarginBits = 1.0;
constexpr double kJsGapMargin = 0.02;
constexpr std::size_t kJaccardK = 10;
constexpr std::size_t kBpeTarget = 4096;
constexpr std::size_t kKmerStrings = 10000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

fs::path work_dir() { return fs::path(ENSDIAG_ACCEPTANCE_DIR); }
fs::path config_dir() { return fs::path(ENSDIAG_SOURCE_DIR) / "configs"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Every entry of every tensor against a central difference.
double full_fd_error(const ModelParams& params, const std::vector<MaskedSequence>& batch) {
  const auto analytic = loss_and_grads(params, batch).grads;
  ModelParams work = params;
  double worst = 0.0;
  for (std::size_t t = 0; t < work.tensors.size(); ++t) {
    auto& vals = work.tensors[t].value.values;
    for (std::size_t e = 0; e < vals.size(); ++e) {
      const double orig = vals[e];
      vals[e] = orig + kFdStep;
      const double up = loss_and_grads(work, batch).loss;
      vals[e] = orig - kFdStep;
      const double down = loss_and_grads(work, batch).loss;
      vals[e] = orig;
      worst = std::max(worst, relative_error(analytic[t].values[e], (up - down) / (2.0 * kFdStep)));
    }
  }
  return worst;
}

Outcome gradients() {
  Rng rng(20240101);
  double worst = 0.0;
  std::size_t entries = 0;
  for (std::size_t i = 0; i < kGradConfigs; ++i) {
    const std::size_t heads = 1 + rng.uniform_int(2);
    const std::size_t d = heads * (2 + 2 * rng.uniform_int(4));  // <= 16
    const auto c = tiny_config(4 + rng.uniform_int(29), d, 1 + rng.uniform_int(2), heads, 2 + rng.uniform_int(15),
                               2 + rng.uniform_int(7), rng.next_u64());
    const auto p = spread_params(c, 0.25, rng.next_u64());
    const auto batch = random_batch(c, 2, rng);
    worst = std::max(worst, full_fd_error(p, batch));
    entries += p.parameter_count();
  }
  return {worst < kGradTol, std::to_string(kGradConfigs) + " configs, " + std::to_string(entries) + " entries, max rel err " + fmt(worst) +
                                " (tol " + fmt(kGradTol) + ")"};
}

std::vector<double> sparse_distribution(Rng& rng, std::size_t v) {
  const double sharpness = 0.1 + 4.0 * rng.uniform();
  auto p = random_distribution(rng, v, sharpness);
  if (v > 2 && rng.uniform() < 0.3) {
    for (double& x : p)
      if (rng.uniform() < 0.5) x = 0.0;
    double s = 0.0;
    for (double x : p) s += x;
    if (s == 0.0) p[0] = s = 1.0;
    for (double& x : p) x /= s;
  }
  return p;
}

Outcome metric_axioms() {
  Rng rng(7);
  const std::size_t sizes[3] = {2, 16, 4096};
  std::size_t asym = 0, out_of_range = 0, triangle = 0, entropy = 0, nucleus = 0;
  double worst_triangle = 0.0, worst_entropy = 0.0, worst_ratio = 0.0;
  for (std::size_t i = 0; i < kMetricSamples; ++i) {
    const std::size_t v = sizes[i % 3];
    const Distribution p(sparse_distribution(rng, v)), q(sparse_distribution(rng, v)), r(sparse_distribution(rng, v));
    const double pq = js_distance(p, q), qp = js_distance(q, p), qr = js_distance(q, r), pr = js_distance(p, r);
    asym += pq != qp;
    out_of_range += !(pq >= 0.0 && pq <= 1.0);
    const double excess = pr - (pq + qr);
    worst_triangle = std::max(worst_triangle, excess);
    triangle += excess > kTriangleSlack;
    // KL to uniform summed directly, independent of the entropy code path.
    long double kl = 0.0L;
    for (std::size_t j = 0; j < v; ++j)
      if (p[j] > 0.0) kl += static_cast<long double>(p[j]) * std::log2(static_cast<long double>(p[j]) * v);
    const double log_v = std::log2(static_cast<double>(v));
    const double e = std::max(std::abs(static_cast<double>(kl) + p.entropy_bits() - log_v), std::abs(kl_to_uniform(p) - static_cast<double>(kl)));
    worst_entropy = std::max(worst_entropy, e);
    entropy += e > kEntropyTol;

    const double mass = 0.01 + 0.99 * rng.uniform();
    try {
      const Distribution t = nucleus_truncate(p, mass);
      std::size_t anchor = v;
      for (std::size_t j = 0; j < v; ++j)
        if (t[j] > 0.0 && (anchor == v || p[j] > p[anchor])) anchor = j;
      bool ok = anchor < v;
      for (std::size_t j = 0; ok && j < v; ++j) {
        if (t[j] > 0.0 && p[j] == 0.0) ok = false;
        if (t[j] > 0.0) {
          const double want = p[j] / p[anchor];
          const double rel = std::abs(t[j] / t[anchor] - want) / want;
          worst_ratio = std::max(worst_ratio, rel);
          if (rel > kRatioTol) ok = false;
        }
      }
      nucleus += !ok;
    } catch (const std::invalid_argument&) {
      ++nucleus;
    }
  }
  const bool pass = asym + out_of_range + triangle + entropy + nucleus == 0;
  return {pass, std::to_string(kMetricSamples) + " triples over V in {2,16,4096}: asymmetric " + std::to_string(asym) + ", out of range " +
                    std::to_string(out_of_range) + ", triangle violations " + std::to_string(triangle) + " (max excess " + fmt(worst_triangle) +
                    "), entropy identity max err " + fmt(worst_entropy) + ", nucleus failures " + std::to_string(nucleus) +
                    " (max ratio err " + fmt(worst_ratio) + ")"};
}

Outcome procrustes_check() {
  Rng rng(11);
  std::size_t beaten = 0, similarity_fail = 0;
  double worst_gap = -1.0, worst_sim = 0.0, worst_cos = 1.0;
  for (std::size_t i = 0; i < kProcrustesPairs; ++i) {
    const Tensor ta = gaussian_matrix(100, 8, rng), tb = gaussian_matrix(100, 8, rng);
    const double disparity = procrustes(plain_embedding(ta), plain_embedding(tb)).disparity;
    const Tensor sa = standardize(ta), sb = standardize(tb);
    for (std::size_t m = 0; m < kProcrustesMaps; ++m) {
      const double gap = disparity - residual_under_map(sa, sb, random_orthogonal(8, rng));
      worst_gap = std::max(worst_gap, gap);
      beaten += gap > kOptimalitySlack;
    }
    Tensor moved = matmul(ta, random_orthogonal(8, rng));
    const double scale = 0.1 + 10.0 * rng.uniform();
    for (std::size_t c = 0; c < 8; ++c) {
      const double shift = 5.0 * rng.normal();
      for (std::size_t r = 0; r < 100; ++r) moved(r, c) = (moved(r, c) + shift) * scale;
    }
    const auto sim = procrustes(plain_embedding(ta), plain_embedding(moved));
    worst_sim = std::max(worst_sim, sim.disparity);
    worst_cos = std::min(worst_cos, sim.cosine);
    similarity_fail += !(sim.disparity < kSimilarityDisparity && sim.cosine > 1.0 - kSimilarityDisparity);
  }
  return {beaten == 0 && similarity_fail == 0,
          std::to_string(kProcrustesPairs) + " pairs x " + std::to_string(kProcrustesMaps) + " random maps: beaten " + std::to_string(beaten) +
              " (max disparity - residual " + fmt(worst_gap) + "); similarity copies: max disparity " + fmt(worst_sim) + ", min cosine 1-" +
              fmt(1.0 - worst_cos)};
}

Outcome fisher_oracle() {
  Rng rng(4);
  const auto c = tiny_config(19, 8, 2, 2, 16, 8, 77);
  const auto p = spread_params(c, 0.2, 3);
  const auto probes = random_probes(c, 10, rng);
  const auto fd = fisher_diag(p, probes, 0);
  const auto want = oracle_fisher(p, probes);
  double worst = 0.0;
  for (std::size_t t = 0; t < want.size(); ++t)
    for (std::size_t e = 0; e < want[t].size(); ++e) worst = std::max(worst, std::abs(fd.mean[t].values[e] - want[t].values[e]));
  const auto shares = group_aggregate(fd, p);
  const double total = shares ? shares->group[0] + shares->group[1] + shares->group[2] : 0.0;
  auto doubled = probes;
  doubled.insert(doubled.end(), probes.begin(), probes.end());
  const auto fd2 = fisher_diag(p, doubled, 0);
  bool dup_exact = fd2.count == 2 * fd.count;
  for (std::size_t t = 0; t < fd.mean.size(); ++t) dup_exact = dup_exact && fd2.mean[t] == fd.mean[t];
  const auto shares2 = group_aggregate(fd2, p);
  dup_exact = dup_exact && shares2 && shares2->group == shares->group;
  const bool pass = fd.count == 10 && worst <= kFisherTol && shares && std::abs(total - 1.0) <= kShareTol && dup_exact;
  return {pass, "10 probes: max |fisher - oracle| " + fmt(worst) + ", share sum - 1 = " + fmt(total - 1.0) + ", duplication " +
                    (dup_exact ? "bitwise identical" : "differs")};
}

ExperimentConfig desk_config(const std::string& name, const fs::path& out) {
  auto cfg = load_config(config_dir() / (name + ".ini"));
  cfg.out_dir = out;
  return cfg;
}

double full_run(const ExperimentConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(cfg.out_dir);
  cmd_tokenizer(cfg, &std::cerr);
  cmd_train(cfg, &std::cerr);
  cmd_analyze(cfg, &std::cerr);
  return seconds_since(t0);
}

Outcome determinism() {
  std::vector<double> times;
  std::vector<ExperimentConfig> runs;
  for (const char* tag : {"c5_a", "c5_b"}) {
    // Desk-profile training budget; the directional configs train longer.
    auto cfg = desk_config("desk_text", work_dir() / tag);
    cfg.members = 2;
    cfg.weight_seeds.clear();
    cfg.train.epochs = ExperimentConfig::defaults(Profile::desk).train.epochs;
    times.push_back(full_run(cfg));
    runs.push_back(cfg);
  }
  const RunLayout a{runs[0].out_dir}, b{runs[1].out_dir};
  std::vector<fs::path> files{a.tokenizer(), a.checkpoint(0), a.checkpoint(1), a.report(), a.js_curve(), a.agreement(), a.fisher_groups(), a.fisher_layers()};
  std::size_t differ = 0;
  for (const auto& f : files) differ += slurp(f) != slurp(b.dir / f.filename()) || slurp(f).empty();
  const bool fast = times[0] < kRunSeconds && times[1] < kRunSeconds;
  return {differ == 0 && fast, "desk text N=2, " + std::to_string(runs[0].train.epochs) + " epochs, twice: " + std::to_string(files.size() - differ) + "/" + std::to_string(files.size()) +
                                   " artifacts bitwise identical; run times " + fmt(times[0]) + " s, " + fmt(times[1]) + " s (limit " +
                                   fmt(kRunSeconds) + " s each)"};
}

double js_at(const nlohmann::ordered_json& r, double p) {
  for (const auto& pt : r["js_curve"])
    if (std::abs(pt["p"].get<double>() - p) < 1e-12) return pt["mean_js"].get<double>();
  throw std::runtime_error("JS curve has no point at p=" + fmt(p));
}

double jaccard_at(const nlohmann::ordered_json& r, std::size_t k) {
  const auto& a = r["agreement"];
  for (std::size_t i = 0; i < a["k_grid"].size(); ++i)
    if (a["k_grid"][i].get<std::size_t>() == k) return a["mean_jaccard"][i].get<double>();
  throw std::runtime_error("agreement table has no k=" + std::to_string(k));
}

Outcome directional() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto text_cfg = desk_config("desk_text", work_dir() / "c6_text");
  const auto dna_cfg = desk_config("desk_dna", work_dir() / "c6_dna");
  full_run(text_cfg);
  full_run(dna_cfg);
  const double elapsed = seconds_since(t0);
  const auto text = nlohmann::ordered_json::parse(slurp(RunLayout{text_cfg.out_dir}.report()));
  const auto dna = nlohmann::ordered_json::parse(slurp(RunLayout{dna_cfg.out_dir}.report()));

  const double kl_a = text["kl_to_uniform"]["ensemble_mean"].get<double>(), kl_b = dna["kl_to_uniform"]["ensemble_mean"].get<double>();
  const double gap_a = js_at(text, 0.3) - js_at(text, 1.0), gap_b = js_at(dna, 0.3) - js_at(dna, 1.0);
  const double jac_a = jaccard_at(text, kJaccardK), jac_b = jaccard_at(dna, kJaccardK);
  const double dis_a = text["agreement"]["mean_procrustes_disparity"].get<double>(), dis_b = dna["agreement"]["mean_procrustes_disparity"].get<double>();
  const auto& fa = text["fisher"]["ensemble"]["groups"];
  const auto& fb = dna["fisher"]["ensemble"]["groups"];
  const double emb_a = fa["embeddings"].get<double>(), emb_b = fb["embeddings"].get<double>();

  const bool kl_ok = kl_a > kl_b + kKlMarginBits;
  const bool js_ok = gap_b > gap_a + kJsGapMargin;
  const bool jac_ok = jac_a > jac_b;
  const bool dis_ok = dis_a < dis_b;
  const bool fisher_ok = fa != fb && emb_b > emb_a;
  auto mark = [](bool ok) { return ok ? std::string("ok") : std::string("MISS"); };
  std::string d = "KL text " + fmt(kl_a) + " vs dna " + fmt(kl_b) + " bits [" + mark(kl_ok) + "]; JS(0.3)-JS(1) text " + fmt(gap_a) + " vs dna " +
                  fmt(gap_b) + " [" + mark(js_ok) + "]; top-10 Jaccard text " + fmt(jac_a) + " vs dna " + fmt(jac_b) + " [" + mark(jac_ok) +
                  "]; disparity text " + fmt(dis_a) + " vs dna " + fmt(dis_b) + " [" + mark(dis_ok) + "]; embeddings Fisher share text " +
                  fmt(emb_a) + " vs dna " + fmt(emb_b) + ", transformer text " + fmt(fa["transformer"].get<double>()) + " vs dna " +
                  fmt(fb["transformer"].get<double>()) + " [" + mark(fisher_ok) + "]; " + fmt(elapsed / 60.0) + " min";
  return {kl_ok && js_ok && jac_ok && dis_ok && fisher_ok, d};
}

Outcome tokenizer_contracts() {
  const auto cfg = desk_config("desk_text", work_dir() / "c7");
  const auto docs = read_corpus(cfg.corpus);
  std::size_t achieved = 0;
  try {
    achieved = train_bpe(docs, kBpeTarget).vocab_size();
  } catch (const VocabExhausted& e) {
    achieved = e.achieved_size;
  }
  Rng rng(99);
  const auto kmer = kmer_tokenizer(6);
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < kKmerStrings; ++i) {
    std::string s(6 * (1 + rng.uniform_int(50)), 'A');
    for (char& ch : s) ch = "ACGT"[rng.uniform_int(4)];
    mismatches += decode(kmer, encode(kmer, s)) != s;
  }
  return {achieved == kBpeTarget && mismatches == 0, "BPE on " + std::to_string(docs.size()) + " grammar documents reached " +
                                                         std::to_string(achieved) + "/" + std::to_string(kBpeTarget) +
                                                         " entries; k=6 round trip failures " + std::to_string(mismatches) + "/" +
                                                         std::to_string(kKmerStrings)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{{1, "gradient correctness", gradients},     {2, "metric axioms", metric_axioms},
                                   {3, "procrustes correctness", procrustes_check}, {4, "fisher oracle equivalence", fisher_oracle},
                                   {5, "determinism", determinism},             {6, "directional desk-scale reproduction", directional},
                                   {7, "tokenizer contracts", tokenizer_contracts}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  fs::create_directories(work_dir());
  int failed = 0;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << " | "
              << fmt(seconds_since(t0)) << " s" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
