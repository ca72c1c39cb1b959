#pragma once

// Corpus-level BLEU-1..4, ROUGE-1 and WER over whitespace-tokenized,
// lowercased text with a single reference per hypothesis.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisegate/error.hpp"
#include "noisegate/tokenizer.hpp"

namespace noisegate {

using Words = std::vector<std::string>;

struct ScoredPair {
  Words hypothesis;
  Words reference;
};

// All values in percent.
struct MetricsReport {
  std::array<double, 4> bleu{};  // cumulative BLEU-1..4
  double rouge1_p = 0.0;
  double rouge1_r = 0.0;
  double rouge1_f = 0.0;
  double wer = 0.0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"bleu1", m.bleu[0]},    {"bleu2", m.bleu[1]},    {"bleu3", m.bleu[2]},
          {"bleu4", m.bleu[3]},    {"rouge1_p", m.rouge1_p}, {"rouge1_r", m.rouge1_r},
          {"rouge1_f", m.rouge1_f}, {"wer", m.wer}};
}

namespace detail {

inline void require_pairs(const std::vector<ScoredPair>& pairs, const char* metric) {
  if (pairs.empty()) throw DataError(std::string(metric) + ": no pairs to score");
}

inline std::map<Words, long> ngram_counts(const Words& w, std::size_t n) {
  std::map<Words, long> out;
  if (w.size() < n) return out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[Words(w.begin() + i, w.begin() + i + n)];
  return out;
}

}  // namespace detail

// Clipped n-gram matches and total hypothesis n-grams, pooled over the corpus.
struct NgramStats {
  long matches = 0;
  long total = 0;
};

inline NgramStats pooled_ngram_stats(const std::vector<ScoredPair>& pairs, std::size_t n) {
  NgramStats s;
  for (const auto& p : pairs) {
    const auto hyp = detail::ngram_counts(p.hypothesis, n);
    const auto ref = detail::ngram_counts(p.reference, n);
    for (const auto& [g, c] : hyp) {
      s.total += c;
      auto it = ref.find(g);
      if (it != ref.end()) s.matches += std::min(c, it->second);
    }
  }
  return s;
}

// Cumulative corpus BLEU-n (uniform weights, brevity penalty, no smoothing).
inline double bleu_corpus(const std::vector<ScoredPair>& pairs, std::size_t n) {
  detail::require_pairs(pairs, "bleu");
  if (n < 1 || n > 4) throw DataError("bleu order must be in 1..4");
  double hyp_len = 0.0, ref_len = 0.0;
  for (const auto& p : pairs) {
    hyp_len += static_cast<double>(p.hypothesis.size());
    ref_len += static_cast<double>(p.reference.size());
  }
  if (hyp_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    const auto s = pooled_ngram_stats(pairs, k);
    if (s.matches == 0) return 0.0;
    log_sum += std::log(static_cast<double>(s.matches) / static_cast<double>(s.total));
  }
  const double bp = std::exp(std::min(0.0, 1.0 - ref_len / hyp_len));
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(n));
}

struct Rouge1 {
  double p = 0.0, r = 0.0, f = 0.0;
};

// ROUGE-1 for one pair, as fractions.
inline Rouge1 rouge1_pair(const Words& hyp, const Words& ref) {
  if (hyp.empty() || ref.empty()) return {};
  const auto h = detail::ngram_counts(hyp, 1);
  const auto r = detail::ngram_counts(ref, 1);
  long overlap = 0;
  for (const auto& [g, c] : h) {
    auto it = r.find(g);
    if (it != r.end()) overlap += std::min(c, it->second);
  }
  Rouge1 out;
  out.p = static_cast<double>(overlap) / static_cast<double>(hyp.size());
  out.r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  out.f = out.p + out.r > 0.0 ? 2.0 * out.p * out.r / (out.p + out.r) : 0.0;
  return out;
}

// Sentence-averaged ROUGE-1 precision, recall and F1, in percent.
inline Rouge1 rouge1_corpus(const std::vector<ScoredPair>& pairs) {
  detail::require_pairs(pairs, "rouge");
  Rouge1 acc;
  for (const auto& p : pairs) {
    const auto s = rouge1_pair(p.hypothesis, p.reference);
    acc.p += s.p;
    acc.r += s.r;
    acc.f += s.f;
  }
  const double n = static_cast<double>(pairs.size());
  return {100.0 * acc.p / n, 100.0 * acc.r / n, 100.0 * acc.f / n};
}

// Unit-cost edit distance (insertions, deletions, substitutions).
template <class T>
std::size_t levenshtein(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// 100 * total edits / total reference words, pooled over the corpus.
inline double wer_corpus(const std::vector<ScoredPair>& pairs) {
  detail::require_pairs(pairs, "wer");
  double edits = 0.0, ref_words = 0.0;
  for (const auto& p : pairs) {
    if (p.reference.empty()) throw DataError("wer: empty reference");
    edits += static_cast<double>(levenshtein(p.hypothesis, p.reference));
    ref_words += static_cast<double>(p.reference.size());
  }
  return 100.0 * edits / ref_words;
}

inline std::vector<ScoredPair> make_scored_pairs(const std::vector<std::string>& hyps,
                                                 const std::vector<std::string>& refs) {
  if (hyps.size() != refs.size())
    throw DataError("score: " + std::to_string(hyps.size()) + " hypotheses but " +
                    std::to_string(refs.size()) + " references");
  if (hyps.empty()) throw DataError("score: no sentences");
  std::vector<ScoredPair> pairs;
  pairs.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) pairs.push_back({words_of(hyps[i]), words_of(refs[i])});
  return pairs;
}

// Every metric for one evaluated cell.
inline MetricsReport score_cell(const std::vector<std::string>& hyps,
                                const std::vector<std::string>& refs) {
  const auto pairs = make_scored_pairs(hyps, refs);
  MetricsReport m;
  for (std::size_t n = 1; n <= 4; ++n) m.bleu[n - 1] = bleu_corpus(pairs, n);
  const auto r = rouge1_corpus(pairs);
  m.rouge1_p = r.p;
  m.rouge1_r = r.r;
  m.rouge1_f = r.f;
  m.wer = wer_corpus(pairs);
  return m;
}

}  // namespace noisegate
