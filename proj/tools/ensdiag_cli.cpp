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

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ensdiag/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::string out;
  std::size_t members = 0;
  std::string profile;
  std::string token;
  std::size_t k = 5;
  std::size_t member = 0;
};

ensdiag::ExperimentConfig resolve(const Options& o) {
  std::optional<ensdiag::Profile> profile;
  if (!o.profile.empty()) profile = ensdiag::parse_profile(o.profile);
  auto cfg = ensdiag::load_config(o.config, profile);
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.members) {
    if (!cfg.weight_seeds.empty()) {
      if (o.members > cfg.weight_seeds.size())
        throw ensdiag::ConfigError("--members " + std::to_string(o.members) + " exceeds the " + std::to_string(cfg.weight_seeds.size()) +
                                   " listed weight_seeds");
      cfg.weight_seeds.resize(o.members);
    }
    cfg.members = o.members;
  }
  cfg.validate();
  return cfg;
}

void print_summary(const nlohmann::ordered_json& r) {
  std::cout << "config " << r["run"]["config_hash"].get<std::string>() << "\n";
  std::cout << "kl_to_uniform (bits): " << r["kl_to_uniform"]["ensemble_mean"] << "\n";
  if (!r["js_curve"].is_null())
    for (const auto& p : r["js_curve"]) std::cout << "js p=" << p["p"] << ": " << p["mean_js"] << "\n";
  if (!r["agreement"].is_null()) {
    const auto& a = r["agreement"];
    for (std::size_t i = 0; i < a["k_grid"].size(); ++i)
      std::cout << "jaccard k=" << a["k_grid"][i] << ": " << a["mean_jaccard"][i] << "  local_spearman: " << a["mean_local_spearman"][i] << "\n";
    std::cout << "procrustes disparity: " << a["mean_procrustes_disparity"] << "  cosine: " << a["mean_procrustes_cosine"] << "\n";
  }
  if (!r["fisher"]["ensemble"].is_null()) std::cout << "fisher shares: " << r["fisher"]["ensemble"]["groups"].dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ensemble diagnostics for masked language models"};
  app.require_subcommand(1);
  Options o;

  auto* defaults = app.add_subcommand("defaults", "Print every configuration key with its default value");
  defaults->add_option("--profile", o.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment INI file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Run directory (overrides [run] out_dir)");
    sub->add_option("--profile", o.profile, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  };
  auto* tokenizer = app.add_subcommand("tokenizer", "Train or construct the tokenizer");
  common(tokenizer);
  auto* train = app.add_subcommand("train", "Train the ensemble members");
  common(train);
  train->add_option("--members", o.members, "Ensemble size")->check(CLI::PositiveNumber);
  auto* analyze = app.add_subcommand("analyze", "Compute diagnostics and write the report");
  common(analyze);
  analyze->add_option("--members", o.members, "Ensemble size")->check(CLI::PositiveNumber);
  auto* neighbors = app.add_subcommand("neighbors", "Nearest static-embedding neighbors of a token");
  common(neighbors);
  neighbors->add_option("--token", o.token, "Vocabulary string")->required();
  neighbors->add_option("--k", o.k, "Number of neighbors");
  neighbors->add_option("--member", o.member, "Member index");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (defaults->parsed()) {
      std::cout << ensdiag::to_ini(ensdiag::ExperimentConfig::defaults(o.profile.empty() ? ensdiag::Profile::desk : ensdiag::parse_profile(o.profile)));
      return 0;
    }
    const auto cfg = resolve(o);
    if (tokenizer->parsed()) {
      const auto tok = ensdiag::cmd_tokenizer(cfg, &std::cerr);
      std::cout << ensdiag::RunLayout{cfg.out_dir}.tokenizer().string() << " (" << tok.vocab_size() << " entries)\n";
    } else if (train->parsed()) {
      const auto s = ensdiag::cmd_train(cfg, &std::cerr);
      std::cout << "trained " << s.trained << ", resumed " << s.resumed << " member(s) in " << cfg.out_dir.string() << "\n";
    } else if (analyze->parsed()) {
      print_summary(ensdiag::cmd_analyze(cfg, &std::cerr));
    } else if (neighbors->parsed()) {
      for (const auto& n : ensdiag::cmd_neighbors(cfg, o.member, o.token, o.k))
        std::cout << '"' << n.token << "\"\t" << n.id << '\t' << n.cosine << "\n";
    }
  } catch (const ensdiag::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ensdiag::UnknownTokenError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
