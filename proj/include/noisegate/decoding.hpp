#pragma once

// Evaluation-time generation: teacher-forced argmax and free-running beam
// search with a repetition penalty and no-repeat n-gram blocking.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

#include <json.hpp>

#include "noisegate/error.hpp"
#include "noisegate/matrix.hpp"
#include "noisegate/model.hpp"
#include "noisegate/tokenizer.hpp"

namespace noisegate {

enum class DecodingMode { TeacherForced, FreeRunning };

inline std::string to_string(DecodingMode m) {
  return m == DecodingMode::TeacherForced ? "tf" : "free";
}

struct DecodeConfig {
  std::size_t beam_size = 5;
  double repetition_penalty = 5.0;
  std::size_t no_repeat_ngram = 2;  // 0 disables blocking
  // Maximum generated tokens per hypothesis, EOS included.
  std::size_t max_len = 32;

  void validate() const {
    if (beam_size == 0) throw ConfigError("beam_size must be >= 1");
    if (!(repetition_penalty >= 1.0)) throw ConfigError("repetition_penalty must be >= 1");
    if (max_len == 0) throw ConfigError("decode max_len must be >= 1");
  }

  // Greedy rollout settings: one beam, no penalties.
  static DecodeConfig greedy(std::size_t max_len) { return {1, 1.0, 0, max_len}; }
};

inline nlohmann::json to_json(const DecodeConfig& c) {
  return {{"beam_size", c.beam_size}, {"repetition_penalty", c.repetition_penalty},
          {"no_repeat_ngram", c.no_repeat_ngram}, {"max_len", c.max_len}};
}

// Lowest index among the maxima.
inline TokenId argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<TokenId>(best);
}

// Argmax prediction at every position of the gold sequence, each conditioned on
// the gold prefix up to that position. Output length is gold.size() - 1.
inline TokenSeq teacher_forced_generate(const Params& params, const Matrix& features,
                                        const TokenSeq& gold) {
  if (gold.size() < 2 || gold.front() != kBos || gold.back() != kEos)
    throw DataError("teacher forcing needs a gold sequence starting with BOS and ending with EOS");
  const Matrix logits = forward(params, features, TokenSeq(gold.begin(), gold.end() - 1));
  TokenSeq out(logits.rows());
  for (std::size_t t = 0; t < logits.rows(); ++t) out[t] = argmax(logits.row(t));
  return out;
}

// CTRL-style penalty: for each distinct token already generated, positive
// logits are divided by `penalty` and non-positive ones multiplied by it.
inline std::vector<double> apply_repetition_penalty(std::span<const double> logits,
                                                    std::span<const TokenId> history,
                                                    double penalty) {
  std::vector<double> out(logits.begin(), logits.end());
  if (penalty == 1.0) return out;
  std::vector<bool> seen(out.size(), false);
  for (TokenId id : history) {
    const auto i = static_cast<std::size_t>(id);
    if (id < 0 || i >= out.size() || seen[i]) continue;
    seen[i] = true;
    out[i] = out[i] > 0 ? out[i] / penalty : out[i] * penalty;
  }
  return out;
}

// Sets to -inf every token that would complete an n-gram already present in
// `history`. n == 0 disables blocking.
inline std::vector<double> ban_repeated_ngrams(std::span<const double> logits,
                                               std::span<const TokenId> history, std::size_t n) {
  std::vector<double> out(logits.begin(), logits.end());
  if (n == 0 || history.size() + 1 < n) return out;
  const std::size_t ctx = n - 1;
  const auto tail = history.subspan(history.size() - ctx);
  for (std::size_t start = 0; start + n <= history.size(); ++start) {
    if (!std::equal(tail.begin(), tail.end(), history.begin() + static_cast<std::ptrdiff_t>(start)))
      continue;
    const auto next = static_cast<std::size_t>(history[start + ctx]);
    if (next < out.size()) out[next] = -INFINITY;
  }
  return out;
}

// Anything that yields next-token logits for a generated prefix. The prefix
// passed in always starts with BOS.
template <class F>
concept NextTokenScorer = requires(F f, const TokenSeq& prefix) {
  { f(prefix) } -> std::convertible_to<std::vector<double>>;
};

struct Hypothesis {
  TokenSeq tokens;  // generated tokens, BOS excluded
  double log_prob = 0.0;

  double normalized() const {
    return tokens.empty() ? log_prob : log_prob / static_cast<double>(tokens.size());
  }
};

namespace detail {

inline bool better_raw(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

inline bool better_normalized(const Hypothesis& a, const Hypothesis& b) {
  const double na = a.normalized(), nb = b.normalized();
  if (na != nb) return na > nb;
  return a.tokens < b.tokens;
}

}  // namespace detail

// Beam search from BOS. Each step expands every live hypothesis with
// log-softmax scores of the penalized, n-gram-filtered logits, then keeps the
// beam_size best candidates by cumulative log-probability; candidates ending
// in EOS (or reaching max_len) are finalized and leave the beam. The result is
// the finalized hypothesis with the best log-probability per generated token,
// ties going to the lexicographically smaller token sequence. PAD and BOS are
// never generated.
template <NextTokenScorer Scorer>
Hypothesis beam_search(Scorer&& next_logits, const DecodeConfig& dc) {
  dc.validate();
  std::vector<Hypothesis> live{{}};
  std::vector<Hypothesis> finished;
  std::vector<Hypothesis> candidates;
  TokenSeq prefix;

  for (std::size_t step = 1; step <= dc.max_len && !live.empty(); ++step) {
    candidates.clear();
    for (const auto& h : live) {
      prefix.assign(1, kBos);
      prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
      const std::vector<double> raw = next_logits(prefix);
      auto adjusted = apply_repetition_penalty(raw, h.tokens, dc.repetition_penalty);
      adjusted = ban_repeated_ngrams(adjusted, h.tokens, dc.no_repeat_ngram);
      if (adjusted.size() > static_cast<std::size_t>(kBos)) {
        adjusted[kPad] = -INFINITY;
        adjusted[kBos] = -INFINITY;
      }
      const auto lp = log_softmax(adjusted);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (!std::isfinite(lp[v])) continue;
        Hypothesis c{h.tokens, h.log_prob + lp[v]};
        c.tokens.push_back(static_cast<TokenId>(v));
        candidates.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(dc.beam_size, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), detail::better_raw);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = candidates[i];
      if (c.tokens.back() == kEos || step == dc.max_len)
        finished.push_back(std::move(c));
      else
        live.push_back(std::move(c));
    }
  }
  if (finished.empty()) return {};
  return *std::min_element(finished.begin(), finished.end(), detail::better_normalized);
}

// Free-running generation for one feature sequence. The encoder runs once.
inline TokenSeq beam_search_generate(const Params& params, const Matrix& features,
                                     const DecodeConfig& dc) {
  const Matrix memory = encode(params, features);
  auto scorer = [&](const TokenSeq& prefix) {
    const Matrix logits = decode_logits(params, memory, prefix);
    const auto last = logits.row(logits.rows() - 1);
    return std::vector<double>(last.begin(), last.end());
  };
  DecodeConfig bounded = dc;
  // Decoder prefix (BOS + generated tokens) must fit the positional table.
  bounded.max_len = std::min(dc.max_len, params.config.max_len);
  return beam_search(scorer, bounded).tokens;
}

// Argmax rollout from BOS until EOS or max_len tokens.
template <NextTokenScorer Scorer>
TokenSeq greedy_rollout(Scorer&& next_logits, std::size_t max_len) {
  TokenSeq out;
  TokenSeq prefix{kBos};
  while (out.size() < max_len) {
    auto logits = next_logits(prefix);
    if (logits.size() > static_cast<std::size_t>(kBos)) {
      logits[kPad] = -INFINITY;
      logits[kBos] = -INFINITY;
    }
    const TokenId t = argmax(logits);
    out.push_back(t);
    prefix.push_back(t);
    if (t == kEos) break;
  }
  return out;
}

}  // namespace noisegate
