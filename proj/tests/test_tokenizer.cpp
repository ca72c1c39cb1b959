#include <gtest/gtest.h>

#include "noisegate/tokenizer.hpp"
#include "test_util.hpp"

using namespace noisegate;

namespace {

Corpus text_corpus(std::initializer_list<const char*> lines) {
  Corpus c;
  c.feature_dim = 1;
  for (const char* t : lines) c.pairs.push_back(testutil::make_pair(t, words_of(t).size(), 1));
  return c;
}

}  // namespace

TEST(Vocab, FrequencyOrder) {
  const auto v = build_vocab(text_corpus({"a b", "a c"}), 1);
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.id("a"), 4);
  EXPECT_EQ(v.id("b"), 5);
  EXPECT_EQ(v.id("c"), 6);
  EXPECT_EQ(v.words(), (std::vector<std::string>{"a", "b", "c"}));
}

TEST(Vocab, MinFreqThreshold) {
  const auto v = build_vocab(text_corpus({"a b", "a c"}), 2);
  EXPECT_EQ(v.words(), (std::vector<std::string>{"a"}));
  EXPECT_EQ(encode(v, "a b c"), (TokenSeq{kBos, 4, kUnk, kUnk, kEos}));
}

TEST(Vocab, DeterministicAndCaseFolded) {
  const auto c = text_corpus({"The cat", "the DOG", "a cat"});
  const auto a = build_vocab(c, 1), b = build_vocab(c, 1);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.id("the"), 5);  // "cat" and "the" tie at 2; "cat" sorts first
  EXPECT_FALSE(a.contains("The"));
  EXPECT_THROW(build_vocab(Corpus{}, 1), DataError);
  EXPECT_THROW(build_vocab(c, 0), ConfigError);
}

TEST(Vocab, SpecialTokens) {
  const Vocabulary v;
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.token(kPad), "<pad>");
  EXPECT_EQ(v.token(kBos), "<s>");
  EXPECT_EQ(v.token(kEos), "</s>");
  EXPECT_EQ(v.token(kUnk), "<unk>");
  EXPECT_THROW(v.token(4), DataError);
  EXPECT_THROW(v.token(-1), DataError);
}

TEST(Encode, Examples) {
  const auto v = build_vocab(text_corpus({"a b", "a c"}), 1);
  EXPECT_EQ(encode(v, "a b"), (TokenSeq{1, 4, 5, 2}));
  EXPECT_EQ(encode(v, ""), (TokenSeq{1, 2}));
  EXPECT_EQ(encode(v, "a zzz"), (TokenSeq{1, 4, 3, 2}));
  EXPECT_EQ(encode(v, "  A\tB  "), (TokenSeq{1, 4, 5, 2}));
}

TEST(Decode, Examples) {
  const auto v = build_vocab(text_corpus({"a b", "a c"}), 1);
  EXPECT_EQ(decode(v, {1, 4, 5, 2}), "a b");
  EXPECT_EQ(decode(v, {1, 2}), "");
  EXPECT_EQ(decode(v, {4, 0, 3, 6}), "a <unk> c");
  EXPECT_THROW(decode(v, {1, 99}), DataError);
}

TEST(Decode, RoundTripInVocabularyText) {
  const auto v = build_vocab(text_corpus({"the cat sat on the mat", "a dog ran"}), 1);
  for (const char* t : {"the cat sat on the mat", "a dog ran", "mat on cat"})
    EXPECT_EQ(decode(v, encode(v, t)), t);
}

TEST(Vocab, JsonRoundTrip) {
  testutil::TempDir dir("vocab");
  const auto v = build_vocab(text_corpus({"x y z", "y z", "z"}), 1);
  save_vocab(dir / "vocab.json", v);
  const auto back = load_vocab(dir / "vocab.json");
  EXPECT_EQ(back, v);
  EXPECT_EQ(back.fingerprint(), v.fingerprint());
  EXPECT_THROW(vocab_from_json(nlohmann::json{{"tokens", {"a", "a"}}, {"min_freq", 1}}), DataError);
  EXPECT_THROW(vocab_from_json(nlohmann::json::object()), DataError);
}
