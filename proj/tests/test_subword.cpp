#include <bisync/subword.hpp>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace bisync;

namespace {

BpeModel one_merge() { return BpeModel::learn({"ab", "ab", "ac"}, 1, LanguagePair{}); }

}  // namespace

TEST(Bpe, MostFrequentPairMergedFirst) {
  const auto bpe = one_merge();
  ASSERT_EQ(bpe.merges().size(), 1u);
  // The end-of-word marker rides on the last character.
  EXPECT_EQ(bpe.merges()[0], (BpeModel::Merge{"a", "b</w>"}));
}

TEST(Bpe, EncodeAppliesMerges) {
  const auto bpe = one_merge();
  EXPECT_EQ(bpe.tokenize("ab ac"), (std::vector<std::string>{"ab</w>", "a", "c</w>"}));
  const auto ids = bpe.encode("ab ac");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_EQ(ids[0], bpe.piece_id("ab</w>"));
  EXPECT_EQ(ids[1], bpe.piece_id("a"));
  EXPECT_EQ(ids[2], bpe.piece_id("c</w>"));
  EXPECT_TRUE(bpe.encode("").empty());
  EXPECT_EQ(bpe.decode(TokenIds{}), "");
}

TEST(Bpe, ZeroMergesIsCharacterLevel) {
  const auto bpe = BpeModel::learn({"abc", "cab"}, 0, LanguagePair{});
  EXPECT_TRUE(bpe.merges().empty());
  EXPECT_EQ(bpe.tokenize("abc"), (std::vector<std::string>{"a", "b", "c</w>"}));
}

TEST(Bpe, TiesBrokenLexicographically) {
  // (a,b</w>) and (c,d</w>) both occur twice; the smaller pair wins.
  const auto bpe = BpeModel::learn({"cd", "ab", "cd", "ab"}, 1, LanguagePair{});
  EXPECT_EQ(bpe.merges()[0], (BpeModel::Merge{"a", "b</w>"}));
}

TEST(Bpe, Deterministic) {
  std::vector<std::string> text;
  for (const auto& p : generate_toy_corpus(300, 2)) text.push_back(p.source + " " + p.target);
  EXPECT_EQ(BpeModel::learn(text, 150, LanguagePair{}).merges(), BpeModel::learn(text, 150, LanguagePair{}).merges());
}

TEST(Bpe, EmptyCorpusRejected) {
  EXPECT_THROW(BpeModel::learn({}, 10, LanguagePair{}), Error);
  EXPECT_THROW(BpeModel::learn({"", "  "}, 10, LanguagePair{}), Error);
}

TEST(Bpe, RoundTripOnToyCorpus) {
  const auto& bpe = test_util::small_bpe();
  for (const auto& p : generate_toy_corpus(500, 77)) {
    EXPECT_EQ(bpe.decode(bpe.encode(p.source)), p.source);
    EXPECT_EQ(bpe.decode(bpe.encode(p.target)), p.target);
  }
}

TEST(Bpe, JointVocabularyCoversBothSides) {
  const auto& bpe = test_util::small_bpe();
  for (const auto& p : generate_toy_corpus(200, 78))
    for (const auto* text : {&p.source, &p.target})
      for (auto id : bpe.encode(*text)) EXPECT_NE(id, kUnk);
}

TEST(Bpe, EncodeNeverEmitsSpecials) {
  const auto& bpe = test_util::small_bpe();
  for (const char* text : {"the <gap> cat", "<ins> <del> <sub> <srcish> <pad>", "<s> </s> <unk> <sep>"}) {
    const auto ids = bpe.encode(text);
    for (auto id : ids)
      if (id != kUnk) EXPECT_FALSE(bpe.is_special(id)) << text;
  }
}

TEST(Bpe, LiteralControlStringsSurviveRoundTrip) {
  const auto bpe = BpeModel::learn({"<gap> x", "<ins>"}, 20, LanguagePair{});
  EXPECT_EQ(bpe.decode(bpe.encode("<gap> x <ins>")), "<gap> x <ins>");
}

TEST(Bpe, UnknownCharactersMapToUnk) {
  const auto bpe = one_merge();
  const auto ids = bpe.encode("az");
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(ids[1], kUnk);
}

TEST(Bpe, DecodeStripsStructuralTokens) {
  const auto bpe = one_merge();
  TokenIds ids{kBos, kPad, bpe.piece_id("ab</w>"), kPad, kEos};
  EXPECT_EQ(bpe.decode(ids), "ab");
  EXPECT_THROW(bpe.decode(TokenIds{static_cast<TokenId>(bpe.vocab_size())}), Error);
  EXPECT_THROW(bpe.decode(TokenIds{-1}), Error);
}

TEST(Bpe, SpecialIdsAreFixed) {
  const auto& bpe = test_util::small_bpe();
  EXPECT_EQ(bpe.language_tag("srcish"), kFirstLanguageTag);
  EXPECT_EQ(bpe.language_tag("tgtish"), kFirstLanguageTag + 1);
  EXPECT_THROW(bpe.language_tag("fr"), Error);
  EXPECT_TRUE(bpe.is_language_tag(kFirstLanguageTag + 1));
  EXPECT_FALSE(bpe.is_language_tag(kGapSep));
  EXPECT_EQ(static_cast<int>(kNumSpecialTokens), kFirstLanguageTag + 2);
}

TEST(Bpe, SerializationRoundTrip) {
  const auto& bpe = test_util::small_bpe();
  const auto copy = BpeModel::deserialize(bpe.serialize());
  EXPECT_EQ(copy.merges(), bpe.merges());
  EXPECT_EQ(copy.vocab_size(), bpe.vocab_size());
  for (const auto& p : generate_toy_corpus(50, 5)) EXPECT_EQ(copy.encode(p.source), bpe.encode(p.source));
  test_util::TempDir dir("bpe");
  bpe.save(dir / "v.bpe");
  EXPECT_EQ(BpeModel::load(dir / "v.bpe").merges(), bpe.merges());
  EXPECT_THROW(BpeModel::deserialize("garbage"), Error);
}

TEST(Bpe, Utf8CharactersAreAtomic) {
  EXPECT_EQ(utf8_chars("\xC3\xA9t\xC3\xA9"), (std::vector<std::string>{"\xC3\xA9", "t", "\xC3\xA9"}));
  const auto bpe = BpeModel::learn({"\xC3\xA9t\xC3\xA9"}, 5, LanguagePair{});
  EXPECT_EQ(bpe.decode(bpe.encode("\xC3\xA9t\xC3\xA9")), "\xC3\xA9t\xC3\xA9");
}
