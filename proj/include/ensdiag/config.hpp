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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "ensdiag/corpus.hpp"
#include "ensdiag/hash.hpp"
#include "ensdiag/model.hpp"
#include "ensdiag/tokenize.hpp"
#include "ensdiag/train.hpp"

namespace ensdiag {

/// Invalid or inconsistent experiment configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Profile { desk, paper };

inline std::string to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }
inline Profile parse_profile(std::string_view s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw ConfigError("unknown profile '" + std::string(s) + "' (expected desk or paper)");
}

struct TokenizerSettings {
  Scheme scheme = Scheme::bpe;
  std::size_t vocab_size = 259;  // bpe target
  int k = 4;                     // kmer length
};

struct AnalysisSettings {
  std::size_t probes = 10000;
  std::vector<double> p_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::size_t> k_grid{1, 3, 5, 10, 20, 50, 100, 1000};
};

/// Everything a run depends on. The model vocabulary always comes from the
/// tokenizer; `model.vocab_size` is filled in by `resolved_train`.
struct ExperimentConfig {
  CorpusSource corpus;
  TokenizerSettings tokenizer;
  Profile profile = Profile::desk;
  ModelConfig model = desk_profile(259);
  TrainConfig train;
  std::size_t members = 3;
  std::uint64_t weight_seed_base = 1;
  std::vector<std::uint64_t> weight_seeds;  // explicit list wins over the base
  AnalysisSettings analysis;
  std::filesystem::path out_dir = "run";
  std::size_t threads = 0;

  ExperimentConfig() {
    corpus.seed = 1;
    corpus.n_docs = 10000;
    corpus.markov = {1, 10.0, 4500000, 1};
    train.data_seed = 7;
    train.sequences_per_epoch = 6400;
  }

  /// Defaults of a profile: desk is the laptop-scale experiment, paper holds
  /// the full-scale dimensions, ensemble size and probe count.
  static ExperimentConfig defaults(Profile p) {
    ExperimentConfig c;
    c.apply_profile(p);
    return c;
  }

  void apply_profile(Profile p) {
    profile = p;
    model = p == Profile::desk ? desk_profile(model.vocab_size) : paper_profile(model.vocab_size);
    members = p == Profile::desk ? 3 : 5;
    analysis.probes = p == Profile::desk ? 10000 : 100000;
    train.batch_size = p == Profile::desk ? 32 : 96;
    train.sequences_per_epoch = p == Profile::desk ? 6400 : 2000000;
    if (p == Profile::paper) {
      tokenizer.vocab_size = 4096;
      tokenizer.k = 6;
    }
  }

  std::vector<std::uint64_t> resolved_weight_seeds() const {
    if (!weight_seeds.empty()) return weight_seeds;
    std::vector<std::uint64_t> s(members);
    for (std::size_t i = 0; i < members; ++i) s[i] = weight_seed_base + i;
    return s;
  }

  TrainConfig resolved_train(std::size_t vocab_size) const {
    TrainConfig t = train;
    t.model = model;
    t.model.vocab_size = vocab_size;
    t.weight_seeds = resolved_weight_seeds();
    t.threads = threads;
    return t;
  }

  void validate() const {
    if (corpus.kind == CorpusKind::text_file || corpus.kind == CorpusKind::fasta_file) {
      if (corpus.path.empty()) throw ConfigError("[corpus] path is required for kind " + to_string(corpus.kind));
      if (!std::filesystem::is_regular_file(corpus.path)) throw ConfigError("[corpus] path '" + corpus.path.string() + "' does not exist");
    }
    if (corpus.kind == CorpusKind::synthetic_grammar_text && corpus.n_docs == 0) throw ConfigError("[corpus] n_docs must be >= 1");
    if (corpus.kind == CorpusKind::synthetic_markov_dna) {
      if (corpus.markov.order < 0 || corpus.markov.order > 10) throw ConfigError("[corpus] order must be in 0..10");
      if (!(corpus.markov.concentration > 0.0)) throw ConfigError("[corpus] concentration must be > 0");
      if (corpus.markov.length <= static_cast<std::size_t>(corpus.markov.order)) throw ConfigError("[corpus] length must exceed the order");
    }
    if (tokenizer.scheme == Scheme::kmer) {
      if (!corpus.is_dna()) throw ConfigError("[tokenizer] kmer needs a DNA corpus");
      if (tokenizer.k < 1 || tokenizer.k > 12) throw ConfigError("[tokenizer] k must be in 1..12");
    } else if (tokenizer.vocab_size <= kNumSpecials) {
      throw ConfigError("[tokenizer] vocab_size must exceed the " + std::to_string(kNumSpecials) + " special tokens");
    }
    if (members == 0 && weight_seeds.empty()) throw ConfigError("[train] members must be >= 1");
    if (!weight_seeds.empty()) {
      if (weight_seeds.size() != members) throw ConfigError("[train] weight_seeds must list exactly `members` seeds");
      if (std::set<std::uint64_t>(weight_seeds.begin(), weight_seeds.end()).size() != weight_seeds.size())
        throw ConfigError("[train] weight_seeds must be distinct");
    }
    try {
      resolved_train(std::max<std::size_t>(model.vocab_size, kNumSpecials + 1)).validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[model]/[train] ") + e.what());
    }
    if (analysis.probes == 0) throw ConfigError("[analysis] probes must be >= 1");
    if (analysis.p_grid.empty()) throw ConfigError("[analysis] p_grid must not be empty");
    for (double p : analysis.p_grid)
      if (!(p > 0.0 && p <= 1.0)) throw ConfigError("[analysis] p_grid values must be in (0, 1]");
    if (analysis.k_grid.empty()) throw ConfigError("[analysis] k_grid must not be empty");
    for (std::size_t k : analysis.k_grid)
      if (k == 0) throw ConfigError("[analysis] k_grid values must be >= 1");
  }

  /// Canonical JSON of the configuration. The output directory and thread
  /// count are left out because they never change results.
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json c;
    c["kind"] = to_string(corpus.kind);
    if (corpus.kind == CorpusKind::text_file || corpus.kind == CorpusKind::fasta_file) c["path"] = corpus.path.generic_string();
    if (corpus.kind == CorpusKind::synthetic_grammar_text) {
      c["seed"] = corpus.seed;
      c["n_docs"] = corpus.n_docs;
    }
    if (corpus.kind == CorpusKind::synthetic_markov_dna) {
      c["seed"] = corpus.seed;
      c["order"] = corpus.markov.order;
      c["concentration"] = corpus.markov.concentration;
      c["length"] = corpus.markov.length;
    }
    nlohmann::ordered_json t;
    t["scheme"] = tokenizer.scheme == Scheme::bpe ? "bpe" : "kmer";
    if (tokenizer.scheme == Scheme::bpe) t["vocab_size"] = tokenizer.vocab_size;
    else t["k"] = tokenizer.k;
    nlohmann::ordered_json m{{"profile", to_string(profile)},   {"max_seq_len", model.max_seq_len}, {"model_dim", model.model_dim},
                             {"n_layers", model.n_layers},      {"n_heads", model.n_heads},         {"ffn_dim", model.ffn_dim},
                             {"dropout", model.dropout}};
    nlohmann::ordered_json tr{{"data_seed", train.data_seed},
                              {"weight_seeds", resolved_weight_seeds()},
                              {"epochs", train.epochs},
                              {"sequences_per_epoch", train.sequences_per_epoch},
                              {"batch_size", train.batch_size},
                              {"mask_rate", train.mask_rate},
                              {"mask_policy", to_string(train.mask_policy)},
                              {"member_specific_masking", train.member_specific_masking},
                              {"lr", train.optimizer.lr},
                              {"beta1", train.optimizer.beta1},
                              {"beta2", train.optimizer.beta2},
                              {"eps", train.optimizer.eps},
                              {"weight_decay", train.optimizer.weight_decay},
                              {"clip_norm", train.optimizer.clip_norm},
                              {"warmup_fraction", train.warmup_fraction}};
    nlohmann::ordered_json a{{"probes", analysis.probes}, {"p_grid", analysis.p_grid}, {"k_grid", analysis.k_grid}};
    return {{"corpus", c}, {"tokenizer", t}, {"model", m}, {"train", tr}, {"analysis", a}};
  }

  std::string hash() const { return hex64(fnv1a(to_json().dump())); }

  /// Hash of what determines trained weights (corpus, tokenizer, model, train).
  /// The probe count is part of it because probe windows are carved out of
  /// the training stream.
  std::string train_hash() const {
    auto j = to_json();
    j.erase("analysis");
    j["probes"] = analysis.probes;
    return hex64(fnv1a(j.dump()));
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& raw) {
  try {
    std::size_t used = 0;
    T v{};
    if constexpr (std::is_same_v<T, double>) {
      v = std::stod(raw, &used);
    } else if constexpr (std::is_same_v<T, bool>) {
      if (raw == "true") return true;
      if (raw == "false") return false;
      throw std::invalid_argument("not a bool");
    } else {
      if (!raw.empty() && raw.front() == '-') throw std::invalid_argument("negative");
      v = static_cast<T>(std::stoull(raw, &used, 0));
    }
    if (used != raw.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("bad value for " + key + ": '" + raw + "'");
  }
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  for (const auto& item : split_list(raw)) out.push_back(parse_value<T>(key, item));
  return out;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  for (int prec = 1; prec < 17; ++prec) {
    std::ostringstream t;
    t.precision(prec);
    t << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  std::ostringstream t;
  t.precision(17);
  t << v;
  return t.str();
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    if constexpr (std::is_same_v<T, double>) s += format_double(xs[i]);
    else s += std::to_string(xs[i]);
  }
  return s;
}

}  // namespace detail

/// Reads an INI experiment file. Unknown sections or keys are rejected so a
/// typo cannot silently fall back to a default. Relative corpus paths are
/// resolved against the file's directory; `profile` sets the base model,
/// member count and probe count before individual keys override them.
inline ExperimentConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {},
                                          std::optional<Profile> profile_override = std::nullopt) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  static const std::map<std::string, std::set<std::string>> allowed{
      {"corpus", {"kind", "path", "seed", "n_docs", "order", "concentration", "length"}},
      {"tokenizer", {"scheme", "vocab_size", "k"}},
      {"model", {"profile", "max_seq_len", "model_dim", "n_layers", "n_heads", "ffn_dim", "dropout"}},
      {"train",
       {"data_seed", "members", "weight_seed_base", "weight_seeds", "epochs", "sequences_per_epoch", "batch_size", "mask_rate",
        "mask_policy", "member_specific_masking", "lr", "beta1", "beta2", "eps", "weight_decay", "clip_norm", "warmup_fraction"}},
      {"analysis", {"probes", "p_grid", "k_grid"}},
      {"run", {"out_dir", "threads"}}};
  for (const auto& [section, body] : tree) {
    auto it = allowed.find(section);
    if (it == allowed.end()) throw ConfigError("unknown section [" + section + "]");
    if (!body.data().empty()) throw ConfigError("key '" + section + "' outside any section");
    for (const auto& [key, _] : body)
      if (!it->second.count(key)) throw ConfigError("unknown key " + section + "." + key);
  }
  auto get = [&](const std::string& path) -> std::optional<std::string> {
    if (auto v = tree.get_optional<std::string>(pt::ptree::path_type(path, '.'))) return *v;
    return std::nullopt;
  };

  Profile profile = Profile::desk;
  if (auto v = get("model.profile")) profile = parse_profile(*v);
  if (profile_override) profile = *profile_override;
  ExperimentConfig c = ExperimentConfig::defaults(profile);

  auto set = [&]<class T>(const std::string& key, T& dst) {
    if (auto v = get(key)) dst = detail::parse_value<T>(key, *v);
  };
  try {
    if (auto v = get("corpus.kind")) c.corpus.kind = parse_corpus_kind(*v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("[corpus] ") + e.what());
  }
  if (auto v = get("corpus.path")) {
    std::filesystem::path p(*v);
    c.corpus.path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  }
  set("corpus.seed", c.corpus.seed);
  set("corpus.n_docs", c.corpus.n_docs);
  set("corpus.order", c.corpus.markov.order);
  set("corpus.concentration", c.corpus.markov.concentration);
  set("corpus.length", c.corpus.markov.length);

  if (auto v = get("tokenizer.scheme")) {
    if (*v == "bpe") c.tokenizer.scheme = Scheme::bpe;
    else if (*v == "kmer") c.tokenizer.scheme = Scheme::kmer;
    else throw ConfigError("[tokenizer] unknown scheme '" + *v + "'");
  }
  set("tokenizer.vocab_size", c.tokenizer.vocab_size);
  if (auto v = get("tokenizer.k")) c.tokenizer.k = static_cast<int>(detail::parse_value<std::size_t>("tokenizer.k", *v));

  set("model.max_seq_len", c.model.max_seq_len);
  set("model.model_dim", c.model.model_dim);
  set("model.n_layers", c.model.n_layers);
  set("model.n_heads", c.model.n_heads);
  set("model.ffn_dim", c.model.ffn_dim);
  set("model.dropout", c.model.dropout);

  set("train.data_seed", c.train.data_seed);
  set("train.members", c.members);
  set("train.weight_seed_base", c.weight_seed_base);
  if (auto v = get("train.weight_seeds")) {
    c.weight_seeds = detail::parse_list<std::uint64_t>("train.weight_seeds", *v);
    if (!get("train.members")) c.members = c.weight_seeds.size();
  }
  set("train.epochs", c.train.epochs);
  set("train.sequences_per_epoch", c.train.sequences_per_epoch);
  set("train.batch_size", c.train.batch_size);
  set("train.mask_rate", c.train.mask_rate);
  if (auto v = get("train.mask_policy")) {
    try {
      c.train.mask_policy = parse_mask_policy(*v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("[train] ") + e.what());
    }
  }
  set("train.member_specific_masking", c.train.member_specific_masking);
  set("train.lr", c.train.optimizer.lr);
  set("train.beta1", c.train.optimizer.beta1);
  set("train.beta2", c.train.optimizer.beta2);
  set("train.eps", c.train.optimizer.eps);
  set("train.weight_decay", c.train.optimizer.weight_decay);
  set("train.clip_norm", c.train.optimizer.clip_norm);
  set("train.warmup_fraction", c.train.warmup_fraction);

  set("analysis.probes", c.analysis.probes);
  if (auto v = get("analysis.p_grid")) c.analysis.p_grid = detail::parse_list<double>("analysis.p_grid", *v);
  if (auto v = get("analysis.k_grid")) c.analysis.k_grid = detail::parse_list<std::size_t>("analysis.k_grid", *v);

  if (auto v = get("run.out_dir")) c.out_dir = *v;
  set("run.threads", c.threads);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, std::optional<Profile> profile_override = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path.parent_path(), profile_override);
}

/// The configuration as an INI document; parsing it back yields an equal
/// configuration.
inline std::string to_ini(const ExperimentConfig& c) {
  using detail::format_double;
  using detail::join;
  std::ostringstream os;
  os << "[corpus]\n"
     << "# text-file | fasta-file | synthetic-grammar-text | synthetic-markov-dna\n"
     << "kind = " << to_string(c.corpus.kind) << "\n";
  if (!c.corpus.path.empty()) os << "path = " << c.corpus.path.generic_string() << "\n";
  os << "seed = " << c.corpus.seed << "\n"
     << "n_docs = " << c.corpus.n_docs << "\n"
     << "order = " << c.corpus.markov.order << "\n"
     << "concentration = " << format_double(c.corpus.markov.concentration) << "\n"
     << "length = " << c.corpus.markov.length << "\n\n"
     << "[tokenizer]\n"
     << "# bpe | kmer\n"
     << "scheme = " << (c.tokenizer.scheme == Scheme::bpe ? "bpe" : "kmer") << "\n"
     << "vocab_size = " << c.tokenizer.vocab_size << "\n"
     << "k = " << c.tokenizer.k << "\n\n"
     << "[model]\n"
     << "# desk | paper\n"
     << "profile = " << to_string(c.profile) << "\n"
     << "max_seq_len = " << c.model.max_seq_len << "\n"
     << "model_dim = " << c.model.model_dim << "\n"
     << "n_layers = " << c.model.n_layers << "\n"
     << "n_heads = " << c.model.n_heads << "\n"
     << "ffn_dim = " << c.model.ffn_dim << "\n"
     << "dropout = " << format_double(c.model.dropout) << "\n\n"
     << "[train]\n"
     << "data_seed = " << c.train.data_seed << "\n"
     << "members = " << c.members << "\n"
     << "weight_seed_base = " << c.weight_seed_base << "\n";
  if (!c.weight_seeds.empty()) os << "weight_seeds = " << join(c.weight_seeds) << "\n";
  os << "epochs = " << c.train.epochs << "\n"
     << "sequences_per_epoch = " << c.train.sequences_per_epoch << "\n"
     << "batch_size = " << c.train.batch_size << "\n"
     << "mask_rate = " << format_double(c.train.mask_rate) << "\n"
     << "# bert-80-10-10 | mask-only\n"
     << "mask_policy = " << to_string(c.train.mask_policy) << "\n"
     << "member_specific_masking = " << (c.train.member_specific_masking ? "true" : "false") << "\n"
     << "lr = " << format_double(c.train.optimizer.lr) << "\n"
     << "beta1 = " << format_double(c.train.optimizer.beta1) << "\n"
     << "beta2 = " << format_double(c.train.optimizer.beta2) << "\n"
     << "eps = " << format_double(c.train.optimizer.eps) << "\n"
     << "weight_decay = " << format_double(c.train.optimizer.weight_decay) << "\n"
     << "clip_norm = " << format_double(c.train.optimizer.clip_norm) << "\n"
     << "warmup_fraction = " << format_double(c.train.warmup_fraction) << "\n\n"
     << "[analysis]\n"
     << "probes = " << c.analysis.probes << "\n"
     << "p_grid = " << join(c.analysis.p_grid) << "\n"
     << "k_grid = " << join(c.analysis.k_grid) << "\n\n"
     << "[run]\n"
     << "out_dir = " << c.out_dir.generic_string() << "\n"
     << "# 0 = all hardware threads\n"
     << "threads = " << c.threads << "\n";
  return os.str();
}

}  // namespace ensdiag
