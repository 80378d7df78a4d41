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
#include <cstdint>
#include <map>
#include <optional>
#include <tuple>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensdiag/hash.hpp"
#include "ensdiag/utf8.hpp"

namespace ensdiag {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kMaskId = 1;
inline constexpr TokenId kUnkId = 2;
inline constexpr std::size_t kNumSpecials = 3;
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialStrings = {"[PAD]", "[MASK]", "[UNK]"};

enum class Scheme { bpe, kmer };

inline std::string to_string(Scheme s) { return s == Scheme::bpe ? "bpe" : "kmer"; }

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when BPE training runs out of mergeable pairs before the target.
class VocabExhausted : public TokenizerError {
 public:
  VocabExhausted(std::size_t achieved, std::size_t target)
      : TokenizerError("BPE stopped at vocabulary size " + std::to_string(achieved) + " before reaching target " +
                       std::to_string(target) + ": no adjacent symbol pairs left"),
        achieved_size(achieved) {}
  std::size_t achieved_size;
};

/// Immutable tokenizer description shared by the BPE and k-mer schemes.
/// Ids 0..2 are PAD, MASK, UNK; content tokens follow.
class TokenizerSpec {
 public:
  static TokenizerSpec make_bpe(std::vector<std::string> vocab, std::vector<std::pair<std::string, std::string>> merges) {
    TokenizerSpec t;
    t.scheme_ = Scheme::bpe;
    t.vocab_ = std::move(vocab);
    t.merges_ = std::move(merges);
    t.index_bpe();
    return t;
  }

  static TokenizerSpec make_kmer(int k) {
    if (k < 1 || k > 12) throw TokenizerError("k-mer length must be in [1, 12], got " + std::to_string(k));
    TokenizerSpec t;
    t.scheme_ = Scheme::kmer;
    t.k_ = k;
    return t;
  }

  Scheme scheme() const { return scheme_; }
  int k() const { return k_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  std::size_t vocab_size() const {
    return scheme_ == Scheme::kmer ? kNumSpecials + (std::size_t{1} << (2 * k_)) : vocab_.size();
  }

  /// Token string for an id. k-mer content strings are computed from the id.
  std::string token(TokenId id) const {
    if (id >= vocab_size()) throw TokenizerError("token id " + std::to_string(id) + " out of range");
    if (id < kNumSpecials) return std::string(kSpecialStrings[id]);
    if (scheme_ == Scheme::bpe) return vocab_[id];
    std::string s(static_cast<std::size_t>(k_), 'A');
    std::size_t idx = id - kNumSpecials;
    for (int i = k_ - 1; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = "ACGT"[idx & 3];
      idx >>= 2;
    }
    return s;
  }

  /// Id of an exact token string, if present.
  std::optional<TokenId> lookup(std::string_view s) const {
    for (std::size_t i = 0; i < kNumSpecials; ++i)
      if (s == kSpecialStrings[i]) return static_cast<TokenId>(i);
    if (scheme_ == Scheme::kmer) {
      if (s.size() != static_cast<std::size_t>(k_)) return std::nullopt;
      return kmer_id(s);
    }
    auto it = index_.find(std::string(s));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    if (scheme_ == Scheme::kmer) {
      const auto k = static_cast<std::size_t>(k_);
      for (std::size_t pos = 0; pos + k <= text.size(); pos += k) out.push_back(kmer_id(text.substr(pos, k)).value_or(kUnkId));
      return out;
    }
    std::unordered_map<std::string, std::vector<TokenId>> cache;
    for (const auto& word : pretokenize(text)) {
      auto [it, inserted] = cache.try_emplace(word);
      if (inserted) it->second = encode_word(word);
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) out += token(id);
    return out;
  }

  /// Whitespace split; every word after the first carries one leading space,
  /// so merges can absorb the separator but never span two words.
  static std::vector<std::string> pretokenize(std::string_view text) {
    std::vector<std::string> words;
    std::size_t pos = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (pos < text.size()) {
      while (pos < text.size() && is_space(text[pos])) ++pos;
      const std::size_t start = pos;
      while (pos < text.size() && !is_space(text[pos])) ++pos;
      if (pos > start) words.push_back((words.empty() ? "" : " ") + std::string(text.substr(start, pos - start)));
    }
    return words;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["format"] = "ensdiag-tokenizer";
    j["version"] = 1;
    j["scheme"] = to_string(scheme_);
    j["k"] = k_;
    j["specials"] = {{"PAD", kPadId}, {"MASK", kMaskId}, {"UNK", kUnkId}};
    j["vocab_size"] = vocab_size();
    auto vocab = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < vocab_size(); ++i) vocab.push_back(token(static_cast<TokenId>(i)));
    j["vocab"] = std::move(vocab);
    auto merges = nlohmann::ordered_json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    j["merges"] = std::move(merges);
    return j;
  }

  std::string serialize() const { return to_json().dump(1) + "\n"; }

  static TokenizerSpec from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ensdiag-tokenizer") throw TokenizerError("not a tokenizer document");
    if (j.value("version", 0) != 1) throw TokenizerError("unsupported tokenizer version");
    const std::string scheme = j.at("scheme").get<std::string>();
    if (scheme == "kmer") return make_kmer(j.at("k").get<int>());
    if (scheme != "bpe") throw TokenizerError("unknown tokenizer scheme '" + scheme + "'");
    auto vocab = j.at("vocab").get<std::vector<std::string>>();
    if (vocab.size() < kNumSpecials) throw TokenizerError("vocabulary shorter than the special tokens");
    for (std::size_t i = 0; i < kNumSpecials; ++i)
      if (vocab[i] != kSpecialStrings[i]) throw TokenizerError("special tokens must occupy ids 0..2");
    std::vector<std::pair<std::string, std::string>> merges;
    for (const auto& m : j.at("merges")) merges.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    return make_bpe(std::move(vocab), std::move(merges));
  }

  /// Fingerprint of the serialized form.
  std::uint64_t fingerprint() const { return fnv1a(serialize()); }

 private:
  std::optional<TokenId> kmer_id(std::string_view chunk) const {
    std::size_t idx = 0;
    for (char c : chunk) {
      std::size_t digit = 0;
      switch (c) {
        case 'A': digit = 0; break;
        case 'C': digit = 1; break;
        case 'G': digit = 2; break;
        case 'T': digit = 3; break;
        default: return std::nullopt;
      }
      idx = (idx << 2) | digit;
    }
    return static_cast<TokenId>(idx + kNumSpecials);
  }

  void index_bpe() {
    index_.clear();
    for (std::size_t i = kNumSpecials; i < vocab_.size(); ++i) {
      if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second)
        throw TokenizerError("duplicate vocabulary entry '" + vocab_[i] + "'");
    }
    merge_rank_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto& [a, b] = merges_[r];
      auto ia = index_.find(a), ib = index_.find(b), ic = index_.find(a + b);
      if (ia == index_.end() || ib == index_.end() || ic == index_.end())
        throw TokenizerError("merge (" + a + ", " + b + ") references tokens missing from the vocabulary");
      merge_rank_.try_emplace(pair_key(ia->second, ib->second), MergeRule{r, ic->second});
    }
  }

  static std::uint64_t pair_key(TokenId a, TokenId b) { return (static_cast<std::uint64_t>(a) << 32) | b; }

  std::vector<TokenId> encode_word(const std::string& word) const {
    std::vector<TokenId> syms;
    for (const auto& cp : utf8::code_points(word)) {
      auto it = index_.find(cp);
      syms.push_back(it == index_.end() ? kUnkId : it->second);
    }
    for (;;) {
      std::size_t best_rank = SIZE_MAX;
      TokenId best_out = 0;
      std::uint64_t best_key = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = merge_rank_.find(pair_key(syms[i], syms[i + 1]));
        if (it != merge_rank_.end() && it->second.rank < best_rank) {
          best_rank = it->second.rank;
          best_out = it->second.result;
          best_key = it->first;
        }
      }
      if (best_rank == SIZE_MAX) break;
      std::vector<TokenId> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && pair_key(syms[i], syms[i + 1]) == best_key) {
          next.push_back(best_out);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
    return syms;
  }

  struct MergeRule {
    std::size_t rank;
    TokenId result;
  };

  Scheme scheme_ = Scheme::bpe;
  int k_ = 0;
  std::vector<std::string> vocab_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, TokenId> index_;
  std::unordered_map<std::uint64_t, MergeRule> merge_rank_;
};

inline TokenizerSpec kmer_tokenizer(int k) { return TokenizerSpec::make_kmer(k); }

inline std::vector<TokenId> encode(const TokenizerSpec& spec, std::string_view text) { return spec.encode(text); }
inline std::string decode(const TokenizerSpec& spec, const std::vector<TokenId>& ids) { return spec.decode(ids); }

/// Byte-pair encoding trainer. Starts from the specials plus every code point
/// seen, then repeatedly merges the most frequent adjacent pair (ties go to the
/// lexicographically smallest pair) until the vocabulary holds `target_vocab`
/// entries. Throws VocabExhausted when no pair is left to merge.
inline TokenizerSpec train_bpe(const std::vector<std::string>& corpus, std::size_t target_vocab) {
  if (corpus.empty()) throw TokenizerError("train_bpe: empty corpus");

  std::map<std::string, std::uint64_t> word_counts;
  for (const auto& doc : corpus)
    for (auto& w : TokenizerSpec::pretokenize(doc)) ++word_counts[std::move(w)];
  if (word_counts.empty()) throw TokenizerError("train_bpe: corpus contains no words");

  std::map<std::string, int> base;
  for (const auto& [w, c] : word_counts)
    for (auto& cp : utf8::code_points(w)) base.emplace(std::move(cp), 0);

  std::vector<std::string> vocab(kSpecialStrings.begin(), kSpecialStrings.end());
  std::unordered_map<std::string, int> id_of;
  for (auto& [sym, id] : base) {
    id = static_cast<int>(vocab.size());
    id_of.emplace(sym, id);
    vocab.push_back(sym);
  }
  if (target_vocab <= vocab.size())
    throw TokenizerError("train_bpe: target " + std::to_string(target_vocab) + " must exceed " +
                         std::to_string(vocab.size()) + " (specials + distinct base symbols)");

  struct Word {
    std::vector<int> syms;
    std::uint64_t count;
  };
  std::vector<Word> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    Word word{{}, c};
    for (const auto& cp : utf8::code_points(w)) word.syms.push_back(id_of.at(cp));
    words.push_back(std::move(word));
  }

  std::vector<std::pair<std::string, std::string>> merges;
  auto key = [](int a, int b) { return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b); };
  while (vocab.size() < target_vocab) {
    std::unordered_map<std::uint64_t, std::uint64_t> freq;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) freq[key(w.syms[i], w.syms[i + 1])] += w.count;
    if (freq.empty()) throw VocabExhausted(vocab.size(), target_vocab);

    int best_a = -1, best_b = -1;
    std::uint64_t best_f = 0;
    for (const auto& [k, f] : freq) {
      const int a = static_cast<int>(k >> 32);
      const int b = static_cast<int>(k & 0xffffffffULL);
      bool better = f > best_f;
      if (!better && f == best_f) {
        better = std::tie(vocab[a], vocab[b]) < std::tie(vocab[best_a], vocab[best_b]);
      }
      if (better) {
        best_f = f;
        best_a = a;
        best_b = b;
      }
    }

    const std::string merged = vocab[best_a] + vocab[best_b];
    int merged_id;
    if (auto it = id_of.find(merged); it != id_of.end()) {
      merged_id = it->second;
    } else {
      merged_id = static_cast<int>(vocab.size());
      vocab.push_back(merged);
      id_of.emplace(merged, merged_id);
    }
    merges.emplace_back(vocab[best_a], vocab[best_b]);

    for (auto& w : words) {
      if (w.syms.size() < 2) continue;
      std::vector<int> next;
      next.reserve(w.syms.size());
      for (std::size_t i = 0; i < w.syms.size(); ++i) {
        if (i + 1 < w.syms.size() && w.syms[i] == best_a && w.syms[i + 1] == best_b) {
          next.push_back(merged_id);
          ++i;
        } else {
          next.push_back(w.syms[i]);
        }
      }
      w.syms = std::move(next);
    }
  }
  return TokenizerSpec::make_bpe(std::move(vocab), std::move(merges));
}

}  // namespace ensdiag
