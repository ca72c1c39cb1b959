#pragma once

// Sentence-level corpora of word-aligned feature vectors: ingestion,
// validation, unique-sentence splitting, and noise/synthetic corpora.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "noisegate/error.hpp"
#include "noisegate/matrix.hpp"

namespace noisegate {

// Eight frequency bands, in file order. Each band occupies feature_dim / 8
// consecutive values of a word vector.
inline constexpr std::size_t kBandCount = 8;
inline constexpr std::string_view kBandNames[kBandCount] = {
    "theta1", "theta2", "alpha1", "alpha2", "beta1", "beta2", "gamma1", "gamma2"};
inline constexpr std::size_t kDefaultFeatureDim = 840;

enum class SourceTask { SR1, NR1, NR2, TSR1, Synthetic };

inline std::string to_string(SourceTask t) {
  switch (t) {
    case SourceTask::SR1: return "SR1";
    case SourceTask::NR1: return "NR1";
    case SourceTask::NR2: return "NR2";
    case SourceTask::TSR1: return "TSR1";
    case SourceTask::Synthetic: return "SYNTHETIC";
  }
  return "?";
}

inline SourceTask parse_source_task(std::string_view s) {
  if (s == "SR1") return SourceTask::SR1;
  if (s == "NR1") return SourceTask::NR1;
  if (s == "NR2") return SourceTask::NR2;
  if (s == "TSR1") return SourceTask::TSR1;
  if (s == "SYNTHETIC") return SourceTask::Synthetic;
  throw DataError("unknown task label '" + std::string(s) + "'");
}

enum class InputKind { Signal, Noise };

inline std::string to_string(InputKind k) { return k == InputKind::Signal ? "signal" : "noise"; }

// One <features, sentence> example. Row i of `features` is the vector of word i.
struct SentencePair {
  Matrix features;
  std::string text;
  SourceTask source_task = SourceTask::Synthetic;

  std::size_t word_count() const noexcept { return features.rows(); }
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

struct Corpus {
  std::vector<SentencePair> pairs;
  std::size_t feature_dim = kDefaultFeatureDim;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct SplitDataset {
  Corpus train;
  Corpus dev;
  Corpus test;
};

struct SplitRatios {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline SentencePair parse_record(const nlohmann::json& rec, std::size_t line_no,
                                 std::size_t& feature_dim, bool first) {
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError("line " + std::to_string(line_no) + ": " + msg);
  };
  if (!rec.is_object()) throw fail("record is not a JSON object");
  if (!rec.contains("text") || !rec["text"].is_string()) throw fail("missing string field 'text'");
  if (!rec.contains("words") || !rec["words"].is_array()) throw fail("missing array field 'words'");

  SentencePair p;
  p.text = rec["text"].get<std::string>();
  if (trim(p.text).empty()) throw fail("empty sentence text");
  if (rec.contains("task")) {
    if (!rec["task"].is_string()) throw fail("field 'task' is not a string");
    try {
      p.source_task = parse_source_task(rec["task"].get<std::string>());
    } catch (const DataError& e) {
      throw fail(e.what());
    }
  }
  const auto& words = rec["words"];
  if (words.empty()) throw fail("sentence has no words");

  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& word = words[w];
    if (!word.is_object() || !word.contains("features") || !word["features"].is_array())
      throw fail("word " + std::to_string(w) + " lacks a 'features' array");
    const auto& f = word["features"];
    if (first && w == 0) {
      if (f.empty()) throw fail("word 0 has no features");
      feature_dim = f.size();
    }
    if (f.size() != feature_dim)
      throw fail("word " + std::to_string(w) + " has " + std::to_string(f.size()) +
                 " features, expected " + std::to_string(feature_dim));
    if (w == 0) p.features = Matrix(words.size(), feature_dim);
    for (std::size_t j = 0; j < feature_dim; ++j) {
      const auto& v = f[j];
      if (v.is_null())
        p.features(w, j) = std::numeric_limits<double>::quiet_NaN();
      else if (v.is_number())
        p.features(w, j) = v.get<double>();
      else
        throw fail("word " + std::to_string(w) + " feature " + std::to_string(j) + " is not a number");
    }
  }
  return p;
}

}  // namespace detail

// Parses a JSON-Lines corpus. feature_dim is taken from the first record.
// Blank lines are ignored; `null` feature values load as NaN.
inline Corpus parse_corpus(std::istream& in, const std::string& source_name = "<stream>") {
  Corpus c;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(source_name + ": line " + std::to_string(line_no) + ": malformed JSON (" +
                      e.what() + ")");
    }
    try {
      c.pairs.push_back(detail::parse_record(rec, line_no, c.feature_dim, first));
    } catch (const DataError& e) {
      throw DataError(source_name + ": " + e.what());
    }
    first = false;
  }
  if (c.pairs.empty()) throw DataError(source_name + ": corpus file is empty");
  return c;
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file '" + path.string() + "'");
  return parse_corpus(in, path.string());
}

inline nlohmann::json pair_to_json(const SentencePair& p) {
  nlohmann::json words = nlohmann::json::array();
  for (std::size_t w = 0; w < p.features.rows(); ++w) {
    nlohmann::json f = nlohmann::json::array();
    for (double v : p.features.row(w)) {
      if (std::isfinite(v))
        f.push_back(v);
      else
        f.push_back(nullptr);
    }
    words.push_back({{"features", std::move(f)}});
  }
  return {{"text", p.text}, {"task", to_string(p.source_task)}, {"words", std::move(words)}};
}

// Writes the JSON-Lines format read by load_corpus. Non-finite values are
// written as null, so +/-inf does not survive a round trip (it becomes NaN).
inline void write_corpus(std::ostream& out, const Corpus& c) {
  for (const auto& p : c.pairs) out << pair_to_json(p).dump() << '\n';
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& c) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file '" + path.string() + "'");
  write_corpus(out, c);
}

inline bool is_valid_pair(const SentencePair& p) { return p.features.all_finite(); }

// Drops every pair containing a non-finite feature value. Order is preserved.
inline Corpus filter_invalid(const Corpus& c) {
  Corpus out;
  out.feature_dim = c.feature_dim;
  for (const auto& p : c.pairs)
    if (is_valid_pair(p)) out.pairs.push_back(p);
  return out;
}

namespace detail {

// Distinct texts in first-appearance order.
inline std::vector<std::string> distinct_texts(const Corpus& c) {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& p : c.pairs)
    if (seen.insert(p.text).second) out.push_back(p.text);
  return out;
}

inline void check_ratios(const SplitRatios& r) {
  if (r.train < 0 || r.dev < 0 || r.test < 0)
    throw ConfigError("split ratios must be non-negative");
  if (std::abs(r.train + r.dev + r.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");
}

enum class Bucket { Train, Dev, Test };

// Shuffles `texts` with `seed` and slices floor-sized dev/test blocks; the
// remainder goes to train.
inline void assign_buckets(std::vector<std::string> texts, const SplitRatios& r,
                           std::uint64_t seed,
                           std::unordered_map<std::string, Bucket>& assignment) {
  std::mt19937_64 rng(seed);
  std::shuffle(texts.begin(), texts.end(), rng);
  const auto n = texts.size();
  const auto n_dev = static_cast<std::size_t>(std::floor(r.dev * static_cast<double>(n) + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(r.test * static_cast<double>(n) + 1e-9));
  const std::size_t n_train = n - n_dev - n_test;
  for (std::size_t i = 0; i < n; ++i) {
    const Bucket b = i < n_train ? Bucket::Train : (i < n_train + n_dev ? Bucket::Dev : Bucket::Test);
    assignment.emplace(texts[i], b);
  }
}

inline SplitDataset materialize(const Corpus& c,
                                const std::unordered_map<std::string, Bucket>& assignment) {
  SplitDataset s;
  s.train.feature_dim = s.dev.feature_dim = s.test.feature_dim = c.feature_dim;
  for (const auto& p : c.pairs) {
    switch (assignment.at(p.text)) {
      case Bucket::Train: s.train.pairs.push_back(p); break;
      case Bucket::Dev: s.dev.pairs.push_back(p); break;
      case Bucket::Test: s.test.pairs.push_back(p); break;
    }
  }
  return s;
}

}  // namespace detail

// Partitions the corpus over distinct sentence texts, so every pair sharing a
// text lands in the same split. Deterministic for a fixed seed.
inline SplitDataset split_corpus(const Corpus& c, const SplitRatios& ratios, std::uint64_t seed) {
  detail::check_ratios(ratios);
  auto texts = detail::distinct_texts(c);
  if (texts.size() < 3)
    throw DataError("split needs at least 3 distinct sentences, corpus has " +
                    std::to_string(texts.size()));
  std::unordered_map<std::string, detail::Bucket> assignment;
  detail::assign_buckets(std::move(texts), ratios, seed, assignment);
  return detail::materialize(c, assignment);
}

// Splits each source task separately, then merges. A text already placed by an
// earlier task keeps that placement, so splits stay disjoint across tasks.
inline SplitDataset split_per_task(const Corpus& c, const SplitRatios& ratios, std::uint64_t seed) {
  detail::check_ratios(ratios);
  const auto all_texts = detail::distinct_texts(c);
  if (all_texts.size() < 3)
    throw DataError("split needs at least 3 distinct sentences, corpus has " +
                    std::to_string(all_texts.size()));

  std::vector<SourceTask> task_order;
  for (const auto& p : c.pairs)
    if (std::find(task_order.begin(), task_order.end(), p.source_task) == task_order.end())
      task_order.push_back(p.source_task);

  std::unordered_map<std::string, detail::Bucket> assignment;
  for (std::size_t ti = 0; ti < task_order.size(); ++ti) {
    std::vector<std::string> fresh;
    std::unordered_set<std::string> seen;
    for (const auto& p : c.pairs)
      if (p.source_task == task_order[ti] && !assignment.contains(p.text) && seen.insert(p.text).second)
        fresh.push_back(p.text);
    detail::assign_buckets(std::move(fresh), ratios, seed + ti, assignment);
  }
  return detail::materialize(c, assignment);
}

// Concatenates corpora, keeping each pair's task label.
inline Corpus merge_tasks(const std::vector<Corpus>& corpora) {
  if (corpora.empty()) throw DataError("merge_tasks needs at least one corpus");
  Corpus out;
  out.feature_dim = corpora.front().feature_dim;
  for (const auto& c : corpora) {
    if (c.feature_dim != out.feature_dim)
      throw DataError("cannot merge corpora with feature_dim " + std::to_string(out.feature_dim) +
                      " and " + std::to_string(c.feature_dim));
    out.pairs.insert(out.pairs.end(), c.pairs.begin(), c.pairs.end());
  }
  return out;
}

// Same texts and word counts, every feature replaced by an i.i.d. N(0, 1) draw.
inline Corpus make_noise_like(const Corpus& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Corpus out = c;
  for (auto& p : out.pairs)
    for (double& v : p.features.data()) v = normal(rng);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic control corpora
// ---------------------------------------------------------------------------

enum class ControlKind { Informative, Uninformative };

inline std::string to_string(ControlKind k) {
  return k == ControlKind::Informative ? "informative" : "uninformative";
}

inline ControlKind parse_control_kind(std::string_view s) {
  if (s == "informative") return ControlKind::Informative;
  if (s == "uninformative") return ControlKind::Uninformative;
  throw ConfigError("unknown control kind '" + std::string(s) + "'");
}

// Phrase grammar used by the controls. A sentence is `phrases` phrases; phrase p
// starts with one of `choices` head words and continues with the fixed
// dependents of that head. Every word belongs to exactly one (phrase, head)
// chain, so a sentence is determined by its head choices and the grammar is a
// bigram chain: given the previous word, only head positions are uncertain.
struct ControlGrammar {
  std::size_t phrases = 1;
  std::size_t choices = 2;
  std::size_t phrase_len = 1;
  std::vector<std::string> words;  // vocab index -> word

  static ControlGrammar for_vocab(std::size_t vocab_size);

  std::size_t words_used() const noexcept { return phrases * choices * phrase_len; }
  std::size_t sentence_len() const noexcept { return phrases * phrase_len; }
  // Vocabulary index of the k-th word of the chain selected by `head` in `phrase`.
  std::size_t word_index(std::size_t phrase, std::size_t head, std::size_t k) const noexcept {
    return (phrase * choices + head) * phrase_len + k;
  }
};

namespace detail {

inline std::vector<std::string> control_words(std::size_t n) {
  static constexpr std::string_view base[] = {
      "he",     "she",   "was",    "is",     "the",    "a",      "film",   "story",  "actor",
      "movie",  "plot",  "very",   "quite",  "good",   "bad",    "long",   "funny",  "dull",
      "born",   "in",    "city",   "river",  "town",   "known",  "for",    "his",    "her",
      "music",  "work",  "career", "early",  "later",  "became", "member", "of",     "party",
      "wrote",  "book",  "poems",  "lived",  "near",   "coast",  "died",   "at",     "home",
      "played", "role",  "lead",   "team",   "won",    "award",  "prize",  "best",   "score",
      "named",  "after", "old",    "king",   "built",  "church", "tower",  "bridge", "castle",
      "school"};
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(i < std::size(base) ? std::string(base[i]) : "w" + std::to_string(i));
  return out;
}

}  // namespace detail

inline ControlGrammar ControlGrammar::for_vocab(std::size_t vocab_size) {
  ControlGrammar g;
  if (vocab_size >= 54) {
    g.choices = 6;
    g.phrase_len = 3;
  } else if (vocab_size >= 36) {
    g.choices = 4;
    g.phrase_len = 3;
  } else if (vocab_size >= 16) {
    g.choices = 4;
    g.phrase_len = 2;
  } else if (vocab_size >= 8) {
    g.choices = 4;
    g.phrase_len = 1;
  } else {
    g.choices = 2;
    g.phrase_len = 1;
  }
  g.phrases = std::max<std::size_t>(1, vocab_size / (g.choices * g.phrase_len));
  g.words = detail::control_words(vocab_size);
  return g;
}

struct ControlSpec {
  ControlKind kind = ControlKind::Uninformative;
  std::size_t n_sentences = 50;
  std::size_t vocab_size = 36;
  std::size_t feature_dim = 48;
  std::uint64_t seed = 0;
};

// Standard deviation of the fixed per-word perturbation added to the one-hot
// template of informative controls.
inline constexpr double kTemplateNoiseStd = 0.1;

// Synthetic corpus of grammar sentences. Uninformative: features are N(0,1) and
// independent of the text. Informative: every occurrence of a word carries that
// word's fixed template, one-hot at its vocabulary index plus a per-word N(0, 0.1^2)
// perturbation drawn once, so the features determine the sentence.
inline Corpus gen_synthetic_control(const ControlSpec& spec) {
  if (spec.vocab_size < 4) throw ConfigError("control vocab_size must be >= 4");
  if (spec.feature_dim == 0) throw ConfigError("control feature_dim must be positive");
  if (spec.kind == ControlKind::Informative && spec.feature_dim < spec.vocab_size)
    throw ConfigError("informative control needs feature_dim >= vocab_size");

  const auto g = ControlGrammar::for_vocab(spec.vocab_size);
  Corpus c;
  c.feature_dim = spec.feature_dim;
  if (spec.n_sentences == 0) return c;

  std::mt19937_64 text_rng(spec.seed);
  std::mt19937_64 feat_rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, g.choices - 1);

  std::vector<Matrix> templates;
  if (spec.kind == ControlKind::Informative) {
    for (std::size_t w = 0; w < spec.vocab_size; ++w) {
      Matrix t(1, spec.feature_dim);
      for (std::size_t j = 0; j < spec.feature_dim; ++j)
        t(0, j) = (j == w ? 1.0 : 0.0) + kTemplateNoiseStd * normal(feat_rng);
      templates.push_back(std::move(t));
    }
  }

  // Prefer distinct sentences while the grammar has room for them.
  double space = 1.0;
  for (std::size_t p = 0; p < g.phrases; ++p) space *= static_cast<double>(g.choices);
  const bool want_distinct = space >= static_cast<double>(spec.n_sentences);
  std::set<std::vector<std::size_t>> seen;

  while (c.pairs.size() < spec.n_sentences) {
    std::vector<std::size_t> idx;
    for (std::size_t p = 0; p < g.phrases; ++p) {
      const std::size_t head = pick(text_rng);
      for (std::size_t k = 0; k < g.phrase_len; ++k) idx.push_back(g.word_index(p, head, k));
    }
    if (want_distinct && !seen.insert(idx).second) continue;

    SentencePair pair;
    pair.source_task = SourceTask::Synthetic;
    pair.features = Matrix(idx.size(), spec.feature_dim);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (!pair.text.empty()) pair.text += ' ';
      pair.text += g.words[idx[i]];
      for (std::size_t j = 0; j < spec.feature_dim; ++j)
        pair.features(i, j) =
            spec.kind == ControlKind::Informative ? templates[idx[i]](0, j) : normal(feat_rng);
    }
    c.pairs.push_back(std::move(pair));
  }
  return c;
}

}  // namespace noisegate
