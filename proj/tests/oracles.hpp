#pragma once

// Independent reference computations used only by tests. None of these call
// into the library routines they are used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "noisegate/model.hpp"
#include "noisegate/tokenizer.hpp"

namespace oracle {

using Words = std::vector<std::string>;

// Occurrences of hyp[i..i+n) inside `seq`, by direct scanning.
inline long count_occurrences(const Words& seq, const Words& gram) {
  long c = 0;
  if (seq.size() < gram.size()) return 0;
  for (std::size_t s = 0; s + gram.size() <= seq.size(); ++s) {
    bool eq = true;
    for (std::size_t k = 0; k < gram.size() && eq; ++k) eq = seq[s + k] == gram[k];
    c += eq;
  }
  return c;
}

// Clipped matches and hypothesis n-gram total for one sentence pair.
// Each distinct n-gram is counted once at its first position.
inline std::pair<long, long> clipped(const Words& hyp, const Words& ref, std::size_t n) {
  long matches = 0, total = 0;
  if (hyp.size() < n) return {0, 0};
  for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
    ++total;
    const Words gram(hyp.begin() + i, hyp.begin() + i + n);
    bool first = true;
    for (std::size_t j = 0; j < i && first; ++j)
      first = !std::equal(gram.begin(), gram.end(), hyp.begin() + j);
    if (!first) continue;
    matches += std::min(count_occurrences(hyp, gram), count_occurrences(ref, gram));
  }
  return {matches, total};
}

// Corpus BLEU-n as a product of precisions raised to 1/n, times brevity penalty.
inline double bleu(const std::vector<std::pair<Words, Words>>& pairs, std::size_t n) {
  double c = 0, r = 0;
  for (const auto& [h, ref] : pairs) {
    c += static_cast<double>(h.size());
    r += static_cast<double>(ref.size());
  }
  if (c == 0) return 0.0;
  double prod = 1.0;
  for (std::size_t k = 1; k <= n; ++k) {
    long m = 0, t = 0;
    for (const auto& [h, ref] : pairs) {
      auto [mm, tt] = clipped(h, ref, k);
      m += mm;
      t += tt;
    }
    if (m == 0) return 0.0;
    prod *= static_cast<double>(m) / static_cast<double>(t);
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::pow(prod, 1.0 / static_cast<double>(n));
}

// Unigram overlap by greedy matching against unused reference tokens.
inline long unigram_overlap(const Words& hyp, const Words& ref) {
  std::vector<bool> used(ref.size(), false);
  long o = 0;
  for (const auto& w : hyp)
    for (std::size_t j = 0; j < ref.size(); ++j)
      if (!used[j] && ref[j] == w) {
        used[j] = true;
        ++o;
        break;
      }
  return o;
}

struct Rouge {
  double p, r, f;
};

inline Rouge rouge1(const std::vector<std::pair<Words, Words>>& pairs) {
  double sp = 0, sr = 0, sf = 0;
  for (const auto& [h, ref] : pairs) {
    if (h.empty()) continue;
    const double o = static_cast<double>(unigram_overlap(h, ref));
    const double p = o / static_cast<double>(h.size()), r = o / static_cast<double>(ref.size());
    sp += p;
    sr += r;
    sf += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  const double n = static_cast<double>(pairs.size());
  return {100 * sp / n, 100 * sr / n, 100 * sf / n};
}

// Minimum edit-script cost by exhaustive recursion over every script
// (no memoization). Exponential; meant for lengths <= 4.
template <class T>
std::size_t edit_distance_exhaustive(const std::vector<T>& a, std::size_t i, const std::vector<T>& b,
                                     std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t del = 1 + edit_distance_exhaustive(a, i + 1, b, j);
  const std::size_t ins = 1 + edit_distance_exhaustive(a, i, b, j + 1);
  const std::size_t sub = (a[i] == b[j] ? 0 : 1) + edit_distance_exhaustive(a, i + 1, b, j + 1);
  return std::min({del, ins, sub});
}

template <class T>
std::size_t edit_distance_exhaustive(const std::vector<T>& a, const std::vector<T>& b) {
  return edit_distance_exhaustive(a, 0, b, 0);
}

// Random short token lists over a small alphabet so overlaps are common.
inline Words random_words(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                          std::size_t alphabet) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len), tok(0, alphabet - 1);
  Words w(len(rng));
  for (auto& x : w) x = "t" + std::to_string(tok(rng));
  return w;
}

// Repetition penalty and repeated n-gram ban, written out per candidate token.
inline std::vector<double> adjust(std::vector<double> logits, const noisegate::TokenSeq& hist,
                                  double penalty, std::size_t n) {
  for (std::size_t v = 0; v < logits.size(); ++v)
    if (std::find(hist.begin(), hist.end(), static_cast<noisegate::TokenId>(v)) != hist.end())
      logits[v] = logits[v] > 0 ? logits[v] / penalty : logits[v] * penalty;
  if (n == 0 || hist.size() + 1 < n) return logits;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    noisegate::TokenSeq cand = hist;
    cand.push_back(static_cast<noisegate::TokenId>(v));
    for (std::size_t s = 0; s + n <= hist.size(); ++s)
      if (std::equal(cand.end() - static_cast<std::ptrdiff_t>(n), cand.end(),
                     hist.begin() + static_cast<std::ptrdiff_t>(s)))
        logits[v] = -INFINITY;
  }
  return logits;
}

// Best finished sequence under length-normalized log-probability, by enumerating
// every token sequence up to max_len. `adjust` maps (raw logits, generated
// history) to the logits actually normalized at that step.
struct Best {
  noisegate::TokenSeq tokens;
  double score = -INFINITY;
};

inline void enumerate(const std::function<std::vector<double>(const noisegate::TokenSeq&)>& next,
                      const std::function<std::vector<double>(std::vector<double>,
                                                              const noisegate::TokenSeq&)>& adjust,
                      std::size_t max_len, noisegate::TokenSeq& gen, double lp, Best& best) {
  noisegate::TokenSeq prefix{noisegate::kBos};
  prefix.insert(prefix.end(), gen.begin(), gen.end());
  auto logits = adjust(next(prefix), gen);
  logits[noisegate::kPad] = -INFINITY;
  logits[noisegate::kBos] = -INFINITY;
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0;
  for (double v : logits) z += std::isfinite(v) ? std::exp(v - mx) : 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    if (!std::isfinite(logits[v])) continue;
    const double step = logits[v] - mx - std::log(z);
    gen.push_back(static_cast<noisegate::TokenId>(v));
    const double total = lp + step;
    if (v == static_cast<std::size_t>(noisegate::kEos) || gen.size() == max_len) {
      const double s = total / static_cast<double>(gen.size());
      if (s > best.score || (s == best.score && gen < best.tokens)) best = {gen, s};
    } else {
      enumerate(next, adjust, max_len, gen, total, best);
    }
    gen.pop_back();
  }
}

inline Best exhaustive_best(
    const std::function<std::vector<double>(const noisegate::TokenSeq&)>& next,
    const std::function<std::vector<double>(std::vector<double>, const noisegate::TokenSeq&)>& adjust,
    std::size_t max_len) {
  Best best;
  noisegate::TokenSeq gen;
  enumerate(next, adjust, max_len, gen, 0.0, best);
  return best;
}

// Argmax rollout from BOS over logits with PAD and BOS removed; ties go to
// the lowest id.
inline noisegate::TokenSeq greedy(const std::function<std::vector<double>(const noisegate::TokenSeq&)>& next,
                                  std::size_t max_len) {
  noisegate::TokenSeq gen;
  while (gen.size() < max_len) {
    noisegate::TokenSeq prefix{noisegate::kBos};
    prefix.insert(prefix.end(), gen.begin(), gen.end());
    const auto logits = next(prefix);
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t v = 0; v < logits.size(); ++v) {
      if (v == static_cast<std::size_t>(noisegate::kPad) || v == static_cast<std::size_t>(noisegate::kBos))
        continue;
      if (logits[v] > best_v) {
        best_v = logits[v];
        best = v;
      }
    }
    gen.push_back(static_cast<noisegate::TokenId>(best));
    if (gen.back() == noisegate::kEos) break;
  }
  return gen;
}

// Central finite difference of f at coordinate `index` of tensor `name`.
inline double central_difference(const noisegate::Params& p, const std::string& name,
                                 std::size_t index, double eps,
                                 const std::function<double(const noisegate::Params&)>& f) {
  noisegate::Params plus = p, minus = p;
  plus.tensors.at(name).data()[index] += eps;
  minus.tensors.at(name).data()[index] -= eps;
  return (f(plus) - f(minus)) / (2 * eps);
}

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace oracle
