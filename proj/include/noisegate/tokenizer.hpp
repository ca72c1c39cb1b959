#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "noisegate/corpus.hpp"
#include "noisegate/error.hpp"

namespace noisegate {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kFirstWordId = 4;

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

// Whitespace tokenization, lowercased, punctuation left attached.
inline std::vector<std::string> words_of(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(to_lower(w));
  return out;
}

// Word-level vocabulary. Ids 0..3 are PAD, BOS, EOS, UNK; word ids follow.
class Vocabulary {
 public:
  Vocabulary() : id_to_token_{"<pad>", "<s>", "</s>", "<unk>"} {}

  // `words` in id order starting at kFirstWordId.
  Vocabulary(const std::vector<std::string>& words, int min_freq) : Vocabulary() {
    min_freq_ = min_freq;
    for (const auto& w : words) {
      if (token_to_id_.contains(w)) throw DataError("duplicate vocabulary token '" + w + "'");
      token_to_id_.emplace(w, static_cast<TokenId>(id_to_token_.size()));
      id_to_token_.push_back(w);
    }
  }

  std::size_t size() const noexcept { return id_to_token_.size(); }
  int min_freq() const noexcept { return min_freq_; }

  TokenId id(std::string_view word) const {
    auto it = token_to_id_.find(std::string(word));
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                      std::to_string(id_to_token_.size()));
    return id_to_token_[static_cast<std::size_t>(id)];
  }
  bool contains(std::string_view word) const { return token_to_id_.contains(std::string(word)); }

  // Non-special tokens in id order.
  std::vector<std::string> words() const {
    return {id_to_token_.begin() + kFirstWordId, id_to_token_.end()};
  }

  // FNV-1a over the token list; checkpoints use it to refuse a mismatched vocabulary.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : id_to_token_) {
      for (unsigned char ch : t) {
        h ^= ch;
        h *= 0x100000001b3ULL;
      }
      h ^= 0xff;
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.id_to_token_ == b.id_to_token_ && a.min_freq_ == b.min_freq_;
  }

 private:
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::vector<std::string> id_to_token_;
  int min_freq_ = 1;
};

// Tokens with frequency >= min_freq, ordered by descending frequency, ties
// broken lexicographically.
inline Vocabulary build_vocab(const Corpus& corpus, int min_freq) {
  if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, long> freq;
  for (const auto& p : corpus.pairs)
    for (auto& w : words_of(p.text)) ++freq[w];
  std::vector<std::pair<std::string, long>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  for (auto& [w, n] : items)
    if (n >= min_freq) kept.push_back(w);
  return Vocabulary(kept, min_freq);
}

// BOS, word ids (UNK when unknown), EOS.
inline TokenSeq encode(const Vocabulary& vocab, std::string_view text) {
  TokenSeq ids{kBos};
  for (const auto& w : words_of(text)) ids.push_back(vocab.id(w));
  ids.push_back(kEos);
  return ids;
}

// Joins words with single spaces; PAD, BOS and EOS are dropped, UNK prints as <unk>.
inline std::string decode(const Vocabulary& vocab, const TokenSeq& ids) {
  std::string out;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

inline nlohmann::json vocab_to_json(const Vocabulary& v) {
  return {{"min_freq", v.min_freq()}, {"tokens", v.words()}};
}

inline Vocabulary vocab_from_json(const nlohmann::json& j) {
  try {
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("min_freq").get<int>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary JSON: ") + e.what());
  }
}

inline void save_vocab(const std::filesystem::path& path, const Vocabulary& v) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary file '" + path.string() + "'");
  out << vocab_to_json(v).dump(2) << '\n';
}

inline Vocabulary load_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return vocab_from_json(j);
}

}  // namespace noisegate
