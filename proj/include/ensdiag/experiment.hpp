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

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensdiag/checkpoint.hpp"
#include "ensdiag/config.hpp"
#include "ensdiag/fisher.hpp"
#include "ensdiag/metrics.hpp"

namespace ensdiag {

inline constexpr int kReportSchemaVersion = 1;

/// File names inside a run directory.
struct RunLayout {
  std::filesystem::path dir;

  std::filesystem::path tokenizer() const { return dir / "tokenizer.json"; }
  std::filesystem::path checkpoint(std::size_t member) const { return dir / ("member_" + std::to_string(member) + ".ckpt"); }
  std::filesystem::path train_log() const { return dir / "train_log.csv"; }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path js_curve() const { return dir / "js_curve.csv"; }
  std::filesystem::path agreement() const { return dir / "agreement.csv"; }
  std::filesystem::path fisher_groups() const { return dir / "fisher_groups.csv"; }
  std::filesystem::path fisher_layers() const { return dir / "fisher_layers.csv"; }
};

// ---------------------------------------------------------------------------
// Tokenizer

inline TokenizerSpec build_tokenizer(const ExperimentConfig& cfg) {
  if (cfg.tokenizer.scheme == Scheme::kmer) return kmer_tokenizer(cfg.tokenizer.k);
  return train_bpe(read_corpus(cfg.corpus), cfg.tokenizer.vocab_size);
}

inline std::string tokenizer_document(const TokenizerSpec& tok, const ExperimentConfig& cfg) {
  auto j = tok.to_json();
  j["config_hash"] = cfg.hash();
  return j.dump(1) + "\n";
}

/// Builds the tokenizer and writes it to the run directory.
inline TokenizerSpec cmd_tokenizer(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunLayout run{cfg.out_dir};
  std::filesystem::create_directories(run.dir);
  TokenizerSpec tok = [&] {
    try {
      return build_tokenizer(cfg);
    } catch (const VocabExhausted& e) {
      throw TokenizerError(std::string(e.what()) + " (corpus " + to_string(cfg.corpus.kind) + "; lower [tokenizer] vocab_size or enlarge the corpus)");
    }
  }();
  write_file_atomic(run.tokenizer(), tokenizer_document(tok, cfg));
  if (log) *log << "tokenizer: " << tok.vocab_size() << " entries -> " << run.tokenizer().string() << "\n";
  return tok;
}

/// Loads the run's tokenizer and checks that it is the one the config asks for.
inline TokenizerSpec load_run_tokenizer(const ExperimentConfig& cfg) {
  const RunLayout run{cfg.out_dir};
  if (!std::filesystem::is_regular_file(run.tokenizer()))
    throw ConfigError("tokenizer file '" + run.tokenizer().string() + "' not found; run the tokenizer command first");
  TokenizerSpec tok = [&] {
    try {
      return TokenizerSpec::from_json(nlohmann::json::parse(read_file_bytes(run.tokenizer())));
    } catch (const std::exception& e) {
      throw ConfigError("cannot read '" + run.tokenizer().string() + "': " + e.what());
    }
  }();
  const bool scheme_ok = tok.scheme() == cfg.tokenizer.scheme;
  const bool size_ok = cfg.tokenizer.scheme == Scheme::kmer ? tok.k() == cfg.tokenizer.k : tok.vocab_size() == cfg.tokenizer.vocab_size;
  if (!scheme_ok || !size_ok) throw ConfigError("tokenizer '" + run.tokenizer().string() + "' does not match [tokenizer]; rerun the tokenizer command");
  return tok;
}

// ---------------------------------------------------------------------------
// Data split and probes

/// Training windows and held-out windows over one token stream. Held-out
/// windows are the last `probes` windows, so the two sets occupy disjoint
/// token intervals [0, train_end) and [train_end, probe_end).
struct DataSplit {
  std::vector<Window> train;
  std::vector<Window> held_out;
  std::size_t stream_tokens = 0;
  std::size_t train_end = 0;
  std::size_t probe_end = 0;
};

inline DataSplit split_stream(std::span<const TokenId> stream, std::size_t len, std::size_t probes) {
  auto windows = make_windows(stream, len);
  if (windows.size() <= probes)
    throw ConfigError("corpus yields " + std::to_string(windows.size()) + " windows of " + std::to_string(len) + " tokens; need more than " +
                      std::to_string(probes) + " (probes) to keep any for training");
  DataSplit s;
  s.stream_tokens = stream.size();
  const std::size_t n_train = windows.size() - probes;
  s.train.assign(std::make_move_iterator(windows.begin()), std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(n_train)));
  s.held_out.assign(std::make_move_iterator(windows.begin() + static_cast<std::ptrdiff_t>(n_train)), std::make_move_iterator(windows.end()));
  s.train_end = n_train * len;
  s.probe_end = windows.size() * len;
  return s;
}

/// One probe per held-out window: a uniformly chosen position is replaced
/// by [MASK] and its original id becomes the label.
inline std::vector<ProbeSample> make_probes(const std::vector<Window>& held_out, std::uint64_t data_seed) {
  std::vector<ProbeSample> out;
  out.reserve(held_out.size());
  for (std::size_t i = 0; i < held_out.size(); ++i) {
    Rng rng = Rng::derive(data_seed, 0x70726f6265ULL /* "probe" */, i);
    ProbeSample p;
    p.tokens = held_out[i];
    p.position = rng.uniform_int(p.tokens.size());
    p.label = p.tokens[p.position];
    p.tokens[p.position] = kMaskId;
    out.push_back(std::move(p));
  }
  return out;
}

inline DataSplit load_split(const ExperimentConfig& cfg, const TokenizerSpec& tok) {
  const auto stream = token_stream(cfg.corpus, tok);
  return split_stream(stream, cfg.model.max_seq_len, cfg.analysis.probes);
}

// ---------------------------------------------------------------------------
// Training

struct TrainSummary {
  std::size_t trained = 0;
  std::size_t resumed = 0;
  std::size_t train_windows = 0;
};

namespace detail {

inline std::string csv_double(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_opt(const std::optional<double>& v) { return v ? csv_double(*v) : ""; }

inline bool checkpoint_matches(const std::filesystem::path& path, const std::string& train_hash, const std::string& tok_hash) {
  if (!std::filesystem::is_regular_file(path)) return false;
  try {
    const auto ck = load_checkpoint(path);
    return ck.meta.train_hash == train_hash && ck.meta.tokenizer_hash == tok_hash;
  } catch (const CheckpointError&) {
    return false;
  }
}

// (member, epoch) -> wall seconds from an earlier log of the same config.
inline std::map<std::pair<std::size_t, std::size_t>, std::string> read_wall_times(const std::filesystem::path& path, const std::string& hash) {
  std::map<std::pair<std::size_t, std::size_t>, std::string> out;
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line) || line != "member,weight_seed,epoch,mean_loss,wall_seconds,config_hash") return out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 6 || f[5] != hash || f[4].empty()) continue;
    try {
      out[{std::stoul(f[0]), std::stoul(f[2])}] = f[4];
    } catch (const std::exception&) {
    }
  }
  return out;
}

}  // namespace detail

/// Trains every member that does not already have a matching checkpoint,
/// then rewrites the training log from all checkpoints.
inline TrainSummary cmd_train(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunLayout run{cfg.out_dir};
  const TokenizerSpec tok = load_run_tokenizer(cfg);
  const std::string tok_hash = hex64(tok.fingerprint());
  const std::string train_hash = cfg.train_hash();
  const TrainConfig tc = cfg.resolved_train(tok.vocab_size());
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const DataSplit split = load_split(cfg, tok);

  TrainSummary summary;
  summary.train_windows = split.train.size();
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < tc.weight_seeds.size(); ++i) {
    if (detail::checkpoint_matches(run.checkpoint(i), train_hash, tok_hash)) ++summary.resumed;
    else pending.push_back(i);
  }
  if (log) *log << "train: " << split.train.size() << " windows, " << pending.size() << " member(s) to train, " << summary.resumed << " resumed\n";

  std::mutex log_mutex;
  std::map<std::pair<std::size_t, std::size_t>, std::string> wall;
  EpochCallback on_epoch = [&](const EpochRecord& r) {
    std::lock_guard lock(log_mutex);
    wall[{r.member, r.epoch}] = detail::csv_double(r.wall_seconds);
    if (!log) return;
    *log << "  member " << r.member << " epoch " << r.epoch << " loss " << r.mean_loss << " (" << r.wall_seconds << " s)\n" << std::flush;
  };
  parallel_for(pending.size(), tc.threads, [&](std::size_t n) {
    const std::size_t i = pending[n];
    auto r = train_member(tc, i, split.train, on_epoch);
    CheckpointMeta meta{i, tc.data_seed, tok_hash, train_hash, cfg.hash(), r.epoch_losses};
    save_checkpoint(run.checkpoint(i), r.params, meta);
  });
  summary.trained = pending.size();

  // Wall times of resumed members come from the previous log when it has them.
  for (const auto& [key, secs] : detail::read_wall_times(run.train_log(), cfg.hash()))
    if (!wall.count(key)) wall[key] = secs;
  std::ostringstream csv;
  csv << "member,weight_seed,epoch,mean_loss,wall_seconds,config_hash\n";
  for (std::size_t i = 0; i < tc.weight_seeds.size(); ++i) {
    const auto ck = load_checkpoint(run.checkpoint(i));
    for (std::size_t e = 0; e < ck.meta.epoch_losses.size(); ++e) {
      const auto it = wall.find({i, e + 1});
      csv << i << "," << tc.weight_seeds[i] << "," << e + 1 << "," << detail::csv_double(ck.meta.epoch_losses[e]) << ","
          << (it == wall.end() ? "" : it->second) << "," << cfg.hash() << "\n";
    }
  }
  write_file_atomic(run.train_log(), csv.str());
  return summary;
}

/// Member checkpoints of a run, refusing any trained under another
/// configuration or tokenizer.
inline std::vector<LoadedCheckpoint> load_members(const ExperimentConfig& cfg, const TokenizerSpec& tok) {
  const RunLayout run{cfg.out_dir};
  const std::string tok_hash = hex64(tok.fingerprint());
  const std::string train_hash = cfg.train_hash();
  std::vector<LoadedCheckpoint> out;
  for (std::size_t i = 0; i < cfg.resolved_weight_seeds().size(); ++i) {
    const auto path = run.checkpoint(i);
    if (!std::filesystem::is_regular_file(path)) throw ConfigError("checkpoint '" + path.string() + "' not found; run the train command first");
    auto ck = load_checkpoint(path);
    if (ck.meta.tokenizer_hash != tok_hash)
      throw ConfigError("checkpoint '" + path.string() + "' was trained with tokenizer " + ck.meta.tokenizer_hash + ", run has " + tok_hash);
    if (ck.meta.train_hash != train_hash)
      throw ConfigError("checkpoint '" + path.string() + "' was trained under config " + ck.meta.train_hash + ", current config is " + train_hash);
    out.push_back(std::move(ck));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analysis

struct AnalysisResult {
  std::vector<double> kl_per_member;
  std::optional<std::vector<JsCurvePoint>> js_curve;
  std::optional<AgreementTable> agreement;
  EnsembleFisher fisher;
  std::size_t probes = 0;
  double log2_vocab = 0.0;
};

/// Every diagnostic over a set of members and probes.
inline AnalysisResult analyze_members(const std::vector<ModelParams>& members, const std::vector<ProbeSample>& probes,
                                      const AnalysisSettings& settings, std::size_t threads, std::ostream* log = nullptr) {
  if (members.empty()) throw std::invalid_argument("analyze: no members");
  AnalysisResult r;
  r.probes = probes.size();
  r.log2_vocab = std::log2(static_cast<double>(members.front().config.vocab_size));
  if (log) *log << "analyze: predictive distributions over " << probes.size() << " probes\n" << std::flush;
  ProbeStatistics stats(members.size(), probes.size(), settings.p_grid);
  collect_probe_statistics(members, probes, stats, threads);
  r.kl_per_member = stats.kl_per_member();
  if (members.size() >= 2) {
    r.js_curve = stats.js_curve();
    if (log) *log << "analyze: embedding agreement\n" << std::flush;
    std::vector<EmbeddingMatrix> emb;
    for (const auto& m : members) emb.push_back(EmbeddingMatrix::from_model(m));
    r.agreement = agreement_table(emb, settings.k_grid, threads);
  }
  if (log) *log << "analyze: Fisher diagonal\n" << std::flush;
  r.fisher = ensemble_fisher_detail(members, probes, threads);
  return r;
}

namespace detail {

inline nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  if (v && std::isfinite(*v)) return *v;
  return nullptr;
}

inline nlohmann::ordered_json num_json(double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); }

inline nlohmann::ordered_json shares_json(const std::optional<FisherShares>& s) {
  if (!s) return nullptr;
  nlohmann::ordered_json groups;
  for (auto g : kLayerGroups) groups[to_string(g)] = num_json(s->share(g));
  auto layers = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < s->layer.size(); ++l)
    layers.push_back({{"layer", l}, {"group", to_string(s->layer_group[l])}, {"share", num_json(s->layer[l])}});
  return {{"groups", groups}, {"layers", layers}};
}

/// Settings that differ from the full-scale reference setup.
inline nlohmann::ordered_json deviations(const ExperimentConfig& cfg) {
  const auto ref = ExperimentConfig::defaults(Profile::paper);
  auto out = nlohmann::ordered_json::array();
  auto note = [&](const char* key, const nlohmann::ordered_json& value, const nlohmann::ordered_json& reference) {
    if (value != reference) out.push_back({{"setting", key}, {"value", value}, {"reference", reference}});
  };
  note("members", cfg.resolved_weight_seeds().size(), ref.members);
  note("probes", cfg.analysis.probes, ref.analysis.probes);
  note("model_dim", cfg.model.model_dim, ref.model.model_dim);
  note("n_layers", cfg.model.n_layers, ref.model.n_layers);
  note("n_heads", cfg.model.n_heads, ref.model.n_heads);
  note("ffn_dim", cfg.model.ffn_dim, ref.model.ffn_dim);
  note("max_seq_len", cfg.model.max_seq_len, ref.model.max_seq_len);
  note("dropout", cfg.model.dropout, ref.model.dropout);
  if (cfg.tokenizer.scheme == Scheme::bpe) note("bpe_vocab_size", cfg.tokenizer.vocab_size, ref.tokenizer.vocab_size);
  else note("kmer_k", cfg.tokenizer.k, ref.tokenizer.k);
  note("sequences_per_epoch", cfg.train.sequences_per_epoch, ref.train.sequences_per_epoch);
  note("batch_size", cfg.train.batch_size, ref.train.batch_size);
  note("lr", cfg.train.optimizer.lr, ref.train.optimizer.lr);
  note("warmup_fraction", cfg.train.warmup_fraction, 0.0);
  note("encoder_norm", "pre-norm", "post-norm");
  note("probe_masking", "single-position", "unspecified");
  return out;
}

}  // namespace detail

/// The report document. It holds no paths or timestamps, so identical
/// inputs give identical bytes.
inline nlohmann::ordered_json report_json(const ExperimentConfig& cfg, const TokenizerSpec& tok, const DataSplit& split,
                                          const AnalysisResult& r) {
  using detail::num_json;
  nlohmann::ordered_json j;
  j["schema"] = "ensdiag-report";
  j["schema_version"] = kReportSchemaVersion;
  j["run"] = {{"command", "analyze"},
              {"config_hash", cfg.hash()},
              {"train_hash", cfg.train_hash()},
              {"tokenizer_hash", hex64(tok.fingerprint())},
              {"profile", to_string(cfg.profile)},
              {"data_seed", cfg.train.data_seed},
              {"corpus_seed", cfg.corpus.seed},
              {"probe_seed", cfg.train.data_seed},
              {"weight_seeds", cfg.resolved_weight_seeds()},
              {"members", cfg.resolved_weight_seeds().size()},
              {"deviations", detail::deviations(cfg)},
              {"config", cfg.to_json()}};
  nlohmann::ordered_json t{{"scheme", tok.scheme() == Scheme::bpe ? "bpe" : "kmer"},
                           {"vocab_size", tok.vocab_size()},
                           {"k", tok.scheme() == Scheme::kmer ? nlohmann::ordered_json(tok.k()) : nlohmann::ordered_json(nullptr)},
                           {"stream_tokens", split.stream_tokens},
                           {"train_windows", split.train.size()},
                           {"probe_windows", split.held_out.size()}};
  j["tokenizer"] = t;

  auto per = nlohmann::ordered_json::array();
  for (double v : r.kl_per_member) per.push_back(num_json(v));
  double mean = 0.0;
  for (double v : r.kl_per_member) mean += v;
  mean /= static_cast<double>(r.kl_per_member.size());
  j["kl_to_uniform"] = {{"unit", "bits"}, {"log2_vocab", r.log2_vocab}, {"per_member", per}, {"ensemble_mean", num_json(mean)}};

  if (r.js_curve) {
    auto a = nlohmann::ordered_json::array();
    for (const auto& p : *r.js_curve) a.push_back({{"p", p.p}, {"mean_js", num_json(p.mean_js)}, {"stderr_js", num_json(p.stderr_js)}, {"n_probes", p.n_probes}});
    j["js_curve"] = a;
  } else {
    j["js_curve"] = nullptr;
  }

  if (r.agreement) {
    const auto& at = *r.agreement;
    auto mj = nlohmann::ordered_json::array();
    for (double v : at.mean_jaccard()) mj.push_back(num_json(v));
    auto ms = nlohmann::ordered_json::array();
    for (const auto& v : at.mean_spearman()) ms.push_back(detail::opt_json(v));
    auto pairs = nlohmann::ordered_json::array();
    for (const auto& p : at.pairs) {
      auto jac = nlohmann::ordered_json::array();
      for (double v : p.jaccard) jac.push_back(num_json(v));
      auto sp = nlohmann::ordered_json::array();
      for (const auto& v : p.spearman) sp.push_back(detail::opt_json(v));
      pairs.push_back({{"i", p.i},
                       {"j", p.j},
                       {"jaccard", jac},
                       {"local_spearman", sp},
                       {"procrustes_cosine", num_json(p.procrustes.cosine)},
                       {"procrustes_disparity", num_json(p.procrustes.disparity)}});
    }
    const auto mp = at.mean_procrustes();
    j["agreement"] = {{"k_grid", at.k_grid},
                      {"mean_jaccard", mj},
                      {"mean_local_spearman", ms},
                      {"mean_procrustes_cosine", num_json(mp.cosine)},
                      {"mean_procrustes_disparity", num_json(mp.disparity)},
                      {"pairs", pairs}};
  } else {
    j["agreement"] = nullptr;
  }

  auto members = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < r.fisher.members.size(); ++m)
    members.push_back({{"member", m},
                       {"probes_used", r.fisher.diagonals[m].count},
                       {"probes_skipped", r.fisher.diagonals[m].skipped},
                       {"shares", detail::shares_json(r.fisher.members[m])}});
  j["fisher"] = {{"ensemble", detail::shares_json(r.fisher.ensemble)}, {"members", members}};
  return j;
}

namespace detail {

inline std::string js_curve_csv(const AnalysisResult& r, const std::string& hash) {
  std::ostringstream os;
  os << "p,mean_js,stderr_js,n_probes,config_hash\n";
  if (r.js_curve)
    for (const auto& p : *r.js_curve) os << csv_double(p.p) << "," << csv_double(p.mean_js) << "," << csv_double(p.stderr_js) << "," << p.n_probes << "," << hash << "\n";
  return os.str();
}

inline std::string agreement_csv(const AnalysisResult& r, const std::string& hash) {
  std::ostringstream os;
  os << "member_i,member_j,k,jaccard,local_spearman,procrustes_cosine,procrustes_disparity,config_hash\n";
  if (r.agreement)
    for (const auto& p : r.agreement->pairs)
      for (std::size_t k = 0; k < r.agreement->k_grid.size(); ++k)
        os << p.i << "," << p.j << "," << r.agreement->k_grid[k] << "," << csv_double(p.jaccard[k]) << "," << csv_opt(p.spearman[k]) << ","
           << csv_double(p.procrustes.cosine) << "," << csv_double(p.procrustes.disparity) << "," << hash << "\n";
  return os.str();
}

inline void shares_rows(std::ostream& os, const std::string& member, const std::optional<FisherShares>& s, bool layers, const std::string& hash) {
  if (!s) return;
  if (layers) {
    for (std::size_t l = 0; l < s->layer.size(); ++l)
      os << member << "," << l << "," << to_string(s->layer_group[l]) << "," << csv_double(s->layer[l]) << "," << hash << "\n";
  } else {
    for (auto g : kLayerGroups) os << member << "," << to_string(g) << "," << csv_double(s->share(g)) << "," << hash << "\n";
  }
}

inline std::string fisher_csv(const AnalysisResult& r, bool layers, const std::string& hash) {
  std::ostringstream os;
  os << (layers ? "member,layer_index,group,share,config_hash\n" : "member,group,share,config_hash\n");
  for (std::size_t m = 0; m < r.fisher.members.size(); ++m) shares_rows(os, std::to_string(m), r.fisher.members[m], layers, hash);
  shares_rows(os, "ensemble", r.fisher.ensemble, layers, hash);
  return os.str();
}

}  // namespace detail

/// Runs the full diagnostic battery on a trained run and writes the report
/// and CSV tables.
inline nlohmann::ordered_json cmd_analyze(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const RunLayout run{cfg.out_dir};
  const TokenizerSpec tok = load_run_tokenizer(cfg);
  const auto loaded = load_members(cfg, tok);
  std::vector<ModelParams> members;
  for (const auto& ck : loaded) members.push_back(ck.params);
  const DataSplit split = load_split(cfg, tok);
  const auto probes = make_probes(split.held_out, cfg.train.data_seed);
  const AnalysisResult r = analyze_members(members, probes, cfg.analysis, cfg.threads, log);
  auto report = report_json(cfg, tok, split, r);
  const std::string h = cfg.hash();
  write_file_atomic(run.report(), report.dump(2) + "\n");
  write_file_atomic(run.js_curve(), detail::js_curve_csv(r, h));
  write_file_atomic(run.agreement(), detail::agreement_csv(r, h));
  write_file_atomic(run.fisher_groups(), detail::fisher_csv(r, false, h));
  write_file_atomic(run.fisher_layers(), detail::fisher_csv(r, true, h));
  if (log) *log << "analyze: wrote " << run.report().string() << "\n";
  return report;
}

// ---------------------------------------------------------------------------
// Neighbors

/// Query string missing from the vocabulary; carries the closest entries.
class UnknownTokenError : public std::runtime_error {
 public:
  UnknownTokenError(const std::string& token, std::vector<std::string> suggestions)
      : std::runtime_error(message(token, suggestions)), suggestions_(std::move(suggestions)) {}
  const std::vector<std::string>& suggestions() const { return suggestions_; }

 private:
  static std::string message(const std::string& token, const std::vector<std::string>& s) {
    std::string m = "token '" + token + "' is not in the vocabulary";
    if (!s.empty()) {
      m += "; closest:";
      for (const auto& x : s) m += " '" + x + "'";
    }
    return m;
  }
  std::vector<std::string> suggestions_;
};

/// Levenshtein distance over bytes.
inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

/// Closest non-special vocabulary strings by edit distance, ties by id.
inline std::vector<std::string> suggest_tokens(const TokenizerSpec& tok, std::string_view query, std::size_t n = 5) {
  std::vector<std::pair<std::size_t, TokenId>> scored;
  for (TokenId id = kNumSpecials; id < tok.vocab_size(); ++id) scored.emplace_back(edit_distance(query, tok.token(id)), id);
  const std::size_t take = std::min(n, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(take), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(tok.token(scored[i].second));
  return out;
}

struct Neighbor {
  std::string token;
  TokenId id = 0;
  double cosine = 0.0;
};

/// k nearest static-embedding neighbors of a vocabulary string, by cosine.
inline std::vector<Neighbor> nearest_tokens(const ModelParams& params, const TokenizerSpec& tok, const std::string& query, std::size_t k) {
  const auto id = tok.lookup(query);
  if (!id || *id < kNumSpecials) throw UnknownTokenError(query, suggest_tokens(tok, query));
  if (k == 0) return {};
  const EmbeddingMatrix e = EmbeddingMatrix::from_model(params);
  const CosineIndex index(e);
  const std::size_t candidates = e.vocab() - kNumSpecials - 1;
  std::vector<Neighbor> out;
  for (std::size_t n : index.knn(*id, std::min(k, candidates))) out.push_back({tok.token(static_cast<TokenId>(n)), static_cast<TokenId>(n), index.cosine(*id, n)});
  return out;
}

inline std::vector<Neighbor> cmd_neighbors(const ExperimentConfig& cfg, std::size_t member, const std::string& query, std::size_t k) {
  const TokenizerSpec tok = load_run_tokenizer(cfg);
  const auto path = RunLayout{cfg.out_dir}.checkpoint(member);
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("checkpoint '" + path.string() + "' not found");
  const auto ck = load_checkpoint(path);
  if (ck.meta.tokenizer_hash != hex64(tok.fingerprint())) throw ConfigError("checkpoint '" + path.string() + "' does not match the run tokenizer");
  return nearest_tokens(ck.params, tok, query, k);
}

}  // namespace ensdiag
