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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ensdiag/numeric/rng.hpp"
#include "ensdiag/utf8.hpp"

namespace ensdiag {

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; });
}

inline std::vector<std::string_view> split_lines(std::string_view s) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t nl = s.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < s.size()) lines.push_back(s.substr(start));
      break;
    }
    lines.push_back(s.substr(start, nl - start));
    start = nl + 1;
  }
  return lines;
}

}  // namespace detail

/// Collapses every whitespace run to one space and trims both ends.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : s) {
    const bool space = c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
    if (space) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

/// Plain-text documents separated by blank lines, in file order.
inline std::vector<std::string> load_text_corpus(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  if (auto bad = utf8::first_invalid(bytes))
    throw CorpusError("'" + path.string() + "': malformed UTF-8 at byte offset " + std::to_string(*bad));
  std::vector<std::string> docs;
  std::string current;
  auto flush = [&] {
    auto doc = normalize_whitespace(current);
    if (!doc.empty()) docs.push_back(std::move(doc));
    current.clear();
  };
  for (auto line : detail::split_lines(bytes)) {
    if (detail::is_blank(line)) {
      flush();
    } else {
      current.append(line);
      current.push_back(' ');
    }
  }
  flush();
  return docs;
}

struct FastaContents {
  std::vector<std::string> sequences;
  std::size_t empty_records = 0;
};

/// Splits an upper-cased sequence at every non-ACGT character, keeping
/// fragments of at least `min_fragment` bases.
inline void split_acgt(std::string_view seq, std::size_t min_fragment, std::vector<std::string>& out) {
  std::size_t start = 0;
  for (std::size_t i = 0; i <= seq.size(); ++i) {
    const bool ok = i < seq.size() && (seq[i] == 'A' || seq[i] == 'C' || seq[i] == 'G' || seq[i] == 'T');
    if (ok) continue;
    if (i - start >= std::max<std::size_t>(min_fragment, 1)) out.emplace_back(seq.substr(start, i - start));
    start = i + 1;
  }
}

/// FASTA records -> ACGT fragments. Headers are dropped, record lines are
/// joined and upper-cased, and ambiguity codes split the record. Records with
/// no sequence lines are counted in `empty_records`.
inline FastaContents load_fasta(const std::filesystem::path& path, std::size_t min_fragment = 1) {
  const std::string bytes = detail::read_file(path);
  FastaContents out;
  std::string seq;
  bool in_record = false;
  bool has_lines = false;
  auto finish = [&] {
    if (!in_record) return;
    if (!has_lines) {
      ++out.empty_records;
    } else {
      split_acgt(seq, min_fragment, out.sequences);
    }
    seq.clear();
    has_lines = false;
  };
  std::size_t line_no = 0;
  for (auto line : detail::split_lines(bytes)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty() && line.front() == '>') {
      finish();
      in_record = true;
      continue;
    }
    if (detail::is_blank(line)) continue;
    if (!in_record) throw CorpusError("'" + path.string() + "': sequence data before the first header (line " + std::to_string(line_no) + ")");
    has_lines = true;
    for (char c : line) {
      if (c == ' ' || c == '\t') continue;
      seq.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
  }
  finish();
  return out;
}

inline void write_fasta(const std::filesystem::path& path, const std::vector<std::string>& sequences, std::size_t width = 60) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CorpusError("cannot write '" + path.string() + "'");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    os << ">seq" << i << '\n';
    for (std::size_t p = 0; p < sequences[i].size(); p += width) os << sequences[i].substr(p, width) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic DNA

struct MarkovDnaParams {
  int order = 1;
  double concentration = 1.0;
  std::size_t length = 0;
  std::uint64_t seed = 0;
};

/// Transition table of an order-m chain over {A,C,G,T}: 4^m context rows of
/// four probabilities, context encoded base-4 with the oldest symbol first.
struct MarkovChain {
  int order = 0;
  std::vector<std::array<double, 4>> rows;

  std::size_t contexts() const { return rows.size(); }

  /// Stationary context distribution reached from a uniform start, via the
  /// lazy chain (P + I) / 2 so periodic tables still converge.
  std::vector<double> stationary(std::size_t max_iters = 200000, double tol = 1e-15) const {
    const std::size_t n = contexts();
    std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
    for (std::size_t it = 0; it < max_iters; ++it) {
      std::fill(next.begin(), next.end(), 0.0);
      for (std::size_t c = 0; c < n; ++c) {
        next[c] += 0.5 * pi[c];
        for (std::size_t s = 0; s < 4; ++s) next[successor(c, s)] += 0.5 * pi[c] * rows[c][s];
      }
      double diff = 0.0;
      for (std::size_t c = 0; c < n; ++c) diff += std::abs(next[c] - pi[c]);
      pi.swap(next);
      if (diff < tol) break;
    }
    return pi;
  }

  /// H(X_t | previous `order` symbols) in bits under the stationary weights.
  double conditional_entropy_bits() const {
    const auto pi = stationary();
    double h = 0.0;
    for (std::size_t c = 0; c < contexts(); ++c) h += pi[c] * row_entropy_bits(c);
    return h;
  }

  double row_entropy_bits(std::size_t c) const {
    double h = 0.0;
    for (double p : rows[c])
      if (p > 0.0) h -= p * std::log2(p);
    return h;
  }

  std::size_t successor(std::size_t context, std::size_t symbol) const {
    if (order == 0) return 0;
    return ((context << 2) | symbol) % contexts();
  }
};

/// Draws every context row from a symmetric Dirichlet(concentration).
inline MarkovChain markov_table(const MarkovDnaParams& p) {
  if (p.order < 0 || p.order > 10) throw std::invalid_argument("markov order must be in [0, 10]");
  if (!(p.concentration > 0.0)) throw std::invalid_argument("concentration must be positive");
  MarkovChain chain;
  chain.order = p.order;
  chain.rows.resize(std::size_t{1} << (2 * p.order));
  Rng rng = Rng::derive(p.seed, 0x7461626c65ULL /* "table" */);
  for (auto& row : chain.rows) {
    std::array<double, 4> lg{};
    for (auto& v : lg) v = rng.log_gamma_variate(p.concentration);
    const double mx = *std::max_element(lg.begin(), lg.end());
    double z = 0.0;
    for (std::size_t s = 0; s < 4; ++s) {
      row[s] = std::exp(lg[s] - mx);
      z += row[s];
    }
    for (auto& v : row) v /= z;
  }
  return chain;
}

inline std::string gen_markov_dna(const MarkovDnaParams& p) {
  if (p.length < 1) throw std::invalid_argument("gen_markov_dna: length must be >= 1");
  const MarkovChain chain = markov_table(p);
  Rng rng = Rng::derive(p.seed, 0x73616d706c65ULL /* "sample" */);
  std::string out;
  out.reserve(p.length);
  std::size_t context = 0;
  for (std::size_t i = 0; i < p.length; ++i) {
    std::size_t sym = 0;
    if (i < static_cast<std::size_t>(p.order)) {
      sym = rng.uniform_int(4);
    } else {
      const auto& row = chain.rows[context];
      const double u = rng.uniform();
      double acc = 0.0;
      sym = 3;
      for (std::size_t s = 0; s < 4; ++s) {
        acc += row[s];
        if (u < acc) {
          sym = s;
          break;
        }
      }
    }
    out.push_back("ACGT"[sym]);
    context = chain.successor(context, sym);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic text

/// Fixed template grammar over a procedurally built pseudo-word lexicon.
/// Words live in topics; each noun licenses two verbs and two adjectives of
/// its topic, each verb licenses five objects from the partner topic, and a
/// document stays with one topic and a three-noun focus set. Topics and
/// focus nouns are drawn with Zipf weights.
class TemplateGrammar {
 public:
  static constexpr std::size_t kTopics = 40;
  static constexpr std::size_t kNounsPerTopic = 40;
  static constexpr std::size_t kVerbsPerTopic = 6;
  static constexpr std::size_t kAdjsPerTopic = 6;
  static constexpr std::size_t kPlacesPerTopic = 4;
  static constexpr double kZipfExponent = 1.3;

  static const TemplateGrammar& instance() {
    static const TemplateGrammar g;
    return g;
  }

  const std::vector<std::string>& templates() const { return templates_; }
  const std::vector<std::string>& lexicon() const { return lexicon_; }

  std::vector<std::string> generate(std::uint64_t seed, std::size_t n_docs) const {
    if (n_docs < 1) throw std::invalid_argument("gen_grammar_text: n_docs must be >= 1");
    std::vector<std::string> docs;
    docs.reserve(n_docs);
    for (std::size_t d = 0; d < n_docs; ++d) {
      Rng rng = Rng::derive(seed, 0x646f63ULL /* "doc" */, d);
      const auto& topic = topics_[zipf(topic_cdf_, rng)];
      std::array<std::size_t, 3> focus{};
      for (auto& f : focus) f = zipf(noun_cdf_, rng);
      const std::size_t sentences = 3 + rng.uniform_int(4);
      std::string doc;
      for (std::size_t s = 0; s < sentences; ++s) {
        if (!doc.empty()) doc.push_back(' ');
        doc += realize(templates_[rng.uniform_int(templates_.size())], topic, focus, rng);
      }
      docs.push_back(std::move(doc));
    }
    return docs;
  }

 private:
  struct Noun {
    std::string word;
    std::array<std::size_t, 2> verbs;
    std::array<std::size_t, 2> adjs;
    std::array<std::size_t, 3> friends;
  };
  struct Verb {
    std::string word;
    std::array<std::size_t, 5> objects;  // nouns of the partner topic
  };
  struct Topic {
    std::vector<Noun> nouns;
    std::vector<Verb> verbs;
    std::vector<std::string> adjs;
    std::vector<std::string> places;
    std::size_t partner = 0;
  };

  TemplateGrammar() {
    Rng rng(0x6772616d6d6172ULL);
    std::vector<std::string> used;
    auto fresh = [&](std::size_t min_syl, std::size_t max_syl, std::string_view suffix = {}) {
      static constexpr std::array<std::string_view, 20> onsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                                  "s", "t", "v", "z", "br", "tr", "st", "pl", "gr", "sh"};
      static constexpr std::array<std::string_view, 7> vowels = {"a", "e", "i", "o", "u", "ai", "ou"};
      static constexpr std::array<std::string_view, 7> codas = {"", "", "n", "r", "s", "l", "m"};
      for (;;) {
        const std::size_t syl = min_syl + rng.uniform_int(max_syl - min_syl + 1);
        std::string w;
        for (std::size_t i = 0; i < syl; ++i) {
          w += onsets[rng.uniform_int(onsets.size())];
          w += vowels[rng.uniform_int(vowels.size())];
          w += codas[rng.uniform_int(codas.size())];
        }
        w += suffix;
        if (std::find(used.begin(), used.end(), w) == used.end() && !is_function_word(w)) {
          used.push_back(w);
          return w;
        }
      }
    };
    topics_.resize(kTopics);
    for (std::size_t t = 0; t < kTopics; ++t) {
      Topic& topic = topics_[t];
      topic.partner = (t + 1) % kTopics;
      for (std::size_t i = 0; i < kVerbsPerTopic; ++i) topic.verbs.push_back({fresh(2, 3, "s"), {}});
      for (std::size_t i = 0; i < kAdjsPerTopic; ++i) topic.adjs.push_back(fresh(2, 3, "y"));
      for (std::size_t i = 0; i < kPlacesPerTopic; ++i) topic.places.push_back(fresh(2, 3, "ton"));
      for (std::size_t i = 0; i < kNounsPerTopic; ++i) {
        Noun n;
        n.word = fresh(2, 4);
        n.verbs = {rng.uniform_int(kVerbsPerTopic), rng.uniform_int(kVerbsPerTopic)};
        n.adjs = {rng.uniform_int(kAdjsPerTopic), rng.uniform_int(kAdjsPerTopic)};
        n.friends = {rng.uniform_int(kNounsPerTopic), rng.uniform_int(kNounsPerTopic), rng.uniform_int(kNounsPerTopic)};
        topic.nouns.push_back(std::move(n));
      }
      for (auto& v : topic.verbs)
        for (auto& o : v.objects) o = rng.uniform_int(kNounsPerTopic);
    }
    lexicon_ = used;
    for (auto fw : kFunctionWords) lexicon_.emplace_back(fw);
    std::sort(lexicon_.begin(), lexicon_.end());
    build_templates();
  }

  static constexpr std::array<std::string_view, 30> kFunctionWords = {
      "the", "a", "in", "with", "near", "of", "and", "was", "every", "some", "no", "ever", "when", "it",
      "together", "then", "often", "later", "once", "held", "found", "beside", "from", "to", "by", "is",
      "very", "not", "there", "."};

  static bool is_function_word(std::string_view w) {
    return std::find(kFunctionWords.begin(), kFunctionWords.end(), w) != kFunctionWords.end();
  }

  void build_templates() {
    static constexpr std::array<std::string_view, 12> frames = {
        "the {A} {N} {V} the {M} .",
        "a {N} {V} a {F} in the {P} .",
        "every {N} {V} near the {P} .",
        "the {N} of the {P} was {A} .",
        "some {N} {V} the {A} {M} with a {F} .",
        "in the {P} the {N} {V} the {F} .",
        "the {N} and the {F} {V} together .",
        "no {N} ever {V} the {M} .",
        "the {A} {P} held a {N} and a {F} .",
        "when the {N} {V} the {M} it was {A} .",
        "the {N} found a {M} beside the {P} .",
        "there was a very {A} {N} from the {P} .",
    };
    static constexpr std::array<std::string_view, 5> openers = {"", "then ", "often ", "later ", "once "};
    for (auto o : openers)
      for (auto f : frames) templates_.push_back(std::string(o) + std::string(f));
  }

  // Fills slots in order; {N} picks a focus noun and the following slots are
  // constrained by it.
  std::string realize(const std::string& tmpl, const Topic& topic, const std::array<std::size_t, 3>& focus, Rng& rng) const {
    const Noun& head = topic.nouns[focus[rng.uniform_int(focus.size())]];
    const Verb& verb = topic.verbs[head.verbs[rng.uniform_int(2)]];
    const Topic& partner = topics_[topic.partner];
    std::string out;
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
      if (tmpl[pos] == '{') {
        const char slot = tmpl[pos + 1];
        pos += 3;
        switch (slot) {
          case 'N': out += head.word; break;
          case 'V': out += verb.word; break;
          case 'A': out += topic.adjs[head.adjs[rng.uniform_int(2)]]; break;
          case 'M': out += partner.nouns[verb.objects[rng.uniform_int(5)]].word; break;
          case 'F': out += topic.nouns[head.friends[rng.uniform_int(3)]].word; break;
          case 'P': out += topic.places[rng.uniform_int(kPlacesPerTopic)]; break;
          default: throw std::logic_error("bad template slot");
        }
      } else {
        out.push_back(tmpl[pos++]);
      }
    }
    return out;
  }

  std::vector<Topic> topics_;
  std::vector<double> topic_cdf_ = zipf_cdf(kTopics);
  std::vector<double> noun_cdf_ = zipf_cdf(kNounsPerTopic);

  static std::vector<double> zipf_cdf(std::size_t n) {
    std::vector<double> c(n);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) c[i] = acc += std::pow(double(i + 1), -kZipfExponent);
    for (auto& x : c) x /= acc;
    return c;
  }
  static std::size_t zipf(const std::vector<double>& cdf, Rng& rng) {
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), rng.uniform());
    return std::min<std::size_t>(it - cdf.begin(), cdf.size() - 1);
  }
  std::vector<std::string> lexicon_;
  std::vector<std::string> templates_;
};

inline std::vector<std::string> gen_grammar_text(std::uint64_t seed, std::size_t n_docs) {
  return TemplateGrammar::instance().generate(seed, n_docs);
}

// ---------------------------------------------------------------------------
// Sources

enum class CorpusKind { text_file, fasta_file, synthetic_markov_dna, synthetic_grammar_text };

inline std::string to_string(CorpusKind k) {
  switch (k) {
    case CorpusKind::text_file: return "text-file";
    case CorpusKind::fasta_file: return "fasta-file";
    case CorpusKind::synthetic_markov_dna: return "synthetic-markov-dna";
    case CorpusKind::synthetic_grammar_text: return "synthetic-grammar-text";
  }
  return "?";
}

inline CorpusKind parse_corpus_kind(std::string_view s) {
  for (auto k : {CorpusKind::text_file, CorpusKind::fasta_file, CorpusKind::synthetic_markov_dna, CorpusKind::synthetic_grammar_text})
    if (s == to_string(k)) return k;
  throw std::invalid_argument("unknown corpus kind '" + std::string(s) + "'");
}

struct CorpusSource {
  CorpusKind kind = CorpusKind::synthetic_grammar_text;
  std::filesystem::path path;
  MarkovDnaParams markov;     // synthetic-markov-dna
  std::size_t n_docs = 1000;  // synthetic-grammar-text
  std::uint64_t seed = 0;     // generator seed for synthetic kinds

  bool is_dna() const { return kind == CorpusKind::fasta_file || kind == CorpusKind::synthetic_markov_dna; }
};

/// Documents (text) or sequences (DNA) of a source, in deterministic order.
inline std::vector<std::string> read_corpus(const CorpusSource& src, std::size_t min_fragment = 1) {
  switch (src.kind) {
    case CorpusKind::text_file: return load_text_corpus(src.path);
    case CorpusKind::fasta_file: return load_fasta(src.path, min_fragment).sequences;
    case CorpusKind::synthetic_markov_dna: {
      MarkovDnaParams p = src.markov;
      p.seed = src.seed;
      return {gen_markov_dna(p)};
    }
    case CorpusKind::synthetic_grammar_text: return gen_grammar_text(src.seed, src.n_docs);
  }
  return {};
}

}  // namespace ensdiag
