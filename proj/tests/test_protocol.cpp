#include <bisync/protocol.hpp>
#include <bisync/synthgen.hpp>

#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace bisync;

namespace {

const BpeModel& en_fr() {
  static const BpeModel bpe = BpeModel::learn(
      {"The white cat", "Le chat blanc", "Le chat est blanc", "Le chat noir", "( Le chat blanc )"}, 30,
      LanguagePair{"en", "fr"});
  return bpe;
}

TokenIds concat(std::initializer_list<TokenIds> parts) {
  TokenIds out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

TEST(Encode, Translation) {
  const auto& bpe = en_fr();
  const auto ex = encode_trn(bpe, "The white cat", "fr", "Le chat blanc");
  EXPECT_EQ(ex.source_ids, concat({bpe.encode("The white cat"), {bpe.language_tag("fr")}}));
  EXPECT_EQ(bpe.decode(ex.target_ids), "Le chat blanc");
  EXPECT_EQ(ex.task, TaskKind::kTrn);
  EXPECT_NO_THROW(validate_example(bpe, ex));
  EXPECT_THROW(encode_trn(bpe, "", "fr"), Error);
  EXPECT_THROW(encode_trn(bpe, "The cat", "de"), Error);
  EXPECT_TRUE(encode_trn(bpe, "The white cat", "fr").target_ids.empty());
}

TEST(Encode, Updates) {
  const auto& bpe = en_fr();
  const TokenId fr = bpe.language_tag("fr");
  const struct {
    const char* y;
    TaskKind kind;
    TokenId tag;
  } cases[] = {{"Le chat", TaskKind::kIns, kIns},
               {"Le chat est blanc", TaskKind::kDel, kDel},
               {"Le chat noir", TaskKind::kSub, kSub}};
  for (const auto& c : cases) {
    const auto ex = encode_update(bpe, "The white cat", c.y, c.kind, "fr", "Le chat blanc");
    EXPECT_EQ(ex.source_ids, concat({bpe.encode("The white cat"), {fr}, bpe.encode(c.y), {c.tag}}));
    EXPECT_EQ(bpe.decode(ex.target_ids), "Le chat blanc");
    EXPECT_NO_THROW(validate_example(bpe, ex));
  }
  EXPECT_THROW(encode_update(bpe, "The white cat", "Le chat", TaskKind::kTrn, "fr"), Error);
  EXPECT_THROW(encode_update(bpe, "The white cat", "Le chat", TaskKind::kBti, "fr"), Error);
  EXPECT_THROW(encode_update(bpe, "The white cat", "", TaskKind::kIns, "fr"), Error);
}

TEST(Encode, GapInfilling) {
  const auto& bpe = en_fr();
  const TokenId fr = bpe.language_tag("fr");
  auto ex = encode_bti(bpe, "The white cat", "Le <gap> blanc", "fr", {"chat"});
  EXPECT_EQ(ex.source_ids, concat({bpe.encode("The white cat"), {fr}, bpe.encode("Le"), {kGap}, bpe.encode("blanc")}));
  EXPECT_EQ(bpe.decode(ex.target_ids), "chat");
  EXPECT_NO_THROW(validate_example(bpe, ex));

  ex = encode_bti(bpe, "The white cat", "( <gap> chat blanc )", "fr", {"Le"});
  EXPECT_EQ(bpe.decode(ex.target_ids), "Le");
  EXPECT_NO_THROW(validate_example(bpe, ex));

  ex = encode_bti(bpe, "The white cat", "<gap> chat <gap>", "fr", {"Le", "blanc"});
  EXPECT_EQ(ex.target_ids, concat({bpe.encode("Le"), {kGapSep}, bpe.encode("blanc")}));
  EXPECT_NO_THROW(validate_example(bpe, ex));

  EXPECT_THROW(encode_bti(bpe, "The white cat", "Le chat blanc", "fr"), Error);
  EXPECT_THROW(encode_bti(bpe, "The white cat", "<gap> chat <gap>", "fr", {"Le"}), Error);
}

TEST(Encode, TripletDispatch) {
  const auto& bpe = en_fr();
  Triplet t{TaskKind::kSub, "The white cat", "Le chat noir", "Le chat blanc", std::nullopt, "en", "fr"};
  EXPECT_EQ(encode_triplet(bpe, t).source_ids, encode_update(bpe, t.x_prime, *t.y, TaskKind::kSub, "fr").source_ids);
  EXPECT_TRUE(encode_triplet(bpe, t, false).target_ids.empty());
  t.y.reset();
  EXPECT_THROW(encode_triplet(bpe, t), Error);
}

TEST(Validator, RejectsMalformedSources) {
  const auto& bpe = en_fr();
  const TokenId fr = bpe.language_tag("fr"), en = bpe.language_tag("en");
  const auto words = bpe.encode("The cat");
  auto bad = [&](TokenIds src, TaskKind task, TokenIds tgt = {}) {
    return !is_valid_example(bpe, EncodedExample{std::move(src), std::move(tgt), task});
  };
  EXPECT_TRUE(bad(words, TaskKind::kTrn));                                 // no tag
  EXPECT_TRUE(bad(concat({words, {fr, en}}), TaskKind::kTrn));             // two tags
  EXPECT_TRUE(bad(concat({{fr}, words}), TaskKind::kTrn));                 // empty source text
  EXPECT_TRUE(bad(concat({words, {fr}, words}), TaskKind::kIns));          // no update tag
  EXPECT_TRUE(bad(concat({words, {fr}, words, {kDel}}), TaskKind::kIns));  // wrong update tag
  EXPECT_TRUE(bad(concat({words, {fr, kIns}}), TaskKind::kIns));           // empty y
  EXPECT_TRUE(bad(concat({words, {fr}, words}), TaskKind::kBti));          // no gap
  EXPECT_TRUE(bad(concat({words, {kGap, fr}, words}), TaskKind::kBti));    // gap before tag
  EXPECT_TRUE(bad(concat({words, {fr, kBos}}), TaskKind::kTrn));           // structural token
  EXPECT_TRUE(bad(concat({words, {fr}}), TaskKind::kTrn, {kEos}));         // control in target
  EXPECT_TRUE(bad(concat({words, {fr}, words, {kGap}}), TaskKind::kBti, concat({words, {kGapSep}, words})));
  EXPECT_TRUE(bad(concat({words, {fr}}), TaskKind::kTrn, {static_cast<TokenId>(bpe.vocab_size())}));
  EXPECT_FALSE(bad(concat({words, {fr}}), TaskKind::kTrn, words));
}

TEST(Validator, UnknownCharactersAreText) {
  const auto& bpe = en_fr();
  const auto ex = encode_update(bpe, "The white cat", "Le zorro blanc", TaskKind::kSub, "fr", "Le chat xyz");
  ASSERT_NE(std::count(ex.source_ids.begin(), ex.source_ids.end(), kUnk), 0);
  ASSERT_NE(std::count(ex.target_ids.begin(), ex.target_ids.end(), kUnk), 0);
  EXPECT_NO_THROW(validate_example(bpe, ex));
}

TEST(Classify, Diffs) {
  EXPECT_EQ(classify_update("The cat", "The white cat"), TaskKind::kIns);
  EXPECT_EQ(classify_update("The white cat", "The cat"), TaskKind::kDel);
  EXPECT_EQ(classify_update("The cat is white", "The white cat"), TaskKind::kSub);
  EXPECT_EQ(classify_update("The black cat", "The white cat"), TaskKind::kSub);
  EXPECT_EQ(classify_update("", "The cat"), TaskKind::kTrn);
  EXPECT_EQ(classify_update("The cat", "The cat"), std::nullopt);
  EXPECT_EQ(classify_update("The  cat ", " The cat"), std::nullopt);
}

TEST(Classify, PureDiffsAreDual) {
  const auto pairs = generate_toy_corpus(300, 12);
  Rng rng(4);
  for (const auto& p : pairs) {
    auto words = split_words(p.source);
    if (words.size() < 3) continue;
    const auto i = uniform_int(rng, 0, words.size() - 1);
    std::vector<std::string> shorter = words;
    shorter.erase(shorter.begin() + static_cast<long>(i));
    const auto a = join_words(shorter), b = join_words(words);
    EXPECT_EQ(classify_update(a, b), TaskKind::kIns);
    EXPECT_EQ(classify_update(b, a), TaskKind::kDel);
  }
}

TEST(Encode, InjectiveOverTasks) {
  const auto& bpe = test_util::small_bpe();
  const auto pairs = generate_toy_corpus(60, 31);
  std::set<TokenIds> seen;
  std::size_t made = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& x = pairs[i].source;
    const auto& y = pairs[(i + 1) % pairs.size()].target;
    for (auto kind : {TaskKind::kIns, TaskKind::kDel, TaskKind::kSub}) {
      seen.insert(encode_update(bpe, x, y, kind, "tgtish").source_ids);
      ++made;
    }
    seen.insert(encode_trn(bpe, x, "tgtish").source_ids);
    ++made;
  }
  EXPECT_EQ(seen.size(), made);
}

TEST(Fillers, Split) {
  EXPECT_EQ(split_fillers("a b <sep> c"), (std::vector<std::string>{"a b", "c"}));
  EXPECT_EQ(split_fillers("a"), (std::vector<std::string>{"a"}));
  EXPECT_EQ(split_fillers(""), (std::vector<std::string>{""}));
}

TEST(Triplets, JsonRoundTrip) {
  test_util::TempDir dir("triplets");
  const std::vector<Triplet> ts{
      {TaskKind::kTrn, "a b", std::nullopt, "c d", std::nullopt, "srcish", "tgtish"},
      {TaskKind::kIns, "a b", std::string("c"), "c d", std::nullopt, "srcish", "tgtish"},
      {TaskKind::kBti, "a b", std::nullopt, "d", std::string("c <gap>"), "tgtish", "srcish"},
  };
  write_triplets(dir / "t.jsonl", ts);
  EXPECT_EQ(read_triplets(dir / "t.jsonl"), ts);
  EXPECT_THROW(triplet_from_json(R"({"task":"INS","x_prime":"a","y_prime":"b","src_lang":"s","tgt_lang":"t"})"), Error);
  EXPECT_THROW(triplet_from_json(R"({"task":"XYZ","x_prime":"a","y_prime":"b","src_lang":"s","tgt_lang":"t"})"), Error);
  EXPECT_EQ(parse_task("BTI"), TaskKind::kBti);
}
