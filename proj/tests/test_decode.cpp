#include <bisync/decode.hpp>

#include <gtest/gtest.h>

#include <thread>

#include "test_util.hpp"

using namespace bisync;

namespace {

struct Fixture {
  BpeModel bpe = test_util::small_bpe();
  TransformerParams<float> params = test_util::random_params(test_util::tiny_config(static_cast<int>(bpe.vocab_size())), 7);
  InferenceModel model{params};
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

TokenIds random_source(Rng& rng, const BpeModel& bpe) {
  const auto pairs = generate_toy_corpus(1, rng());
  auto ids = bpe.encode(pairs[0].source);
  ids.push_back(bpe.language_tag("tgtish"));
  return ids;
}

}  // namespace

TEST(Inference, MatchesTrainingForward) {
  const auto& f = fx();
  Rng rng(1);
  for (int i = 0; i < 5; ++i) {
    const auto src = random_source(rng, f.bpe);
    TokenIds tgt{kBos};
    for (int j = 0; j < 6; ++j) tgt.push_back(static_cast<TokenId>(uniform_int(rng, kNumSpecialTokens, f.bpe.vocab_size() - 1)));
    EXPECT_LT((forward<float>(f.params, src, tgt) - f.model.forward(src, tgt)).cwiseAbs().maxCoeff(), 1e-4f);
  }
}

TEST(Beam, WidthOneEqualsGreedy) {
  const auto& f = fx();
  Rng rng(2);
  DecodeOptions opts;
  opts.beam_size = 1;
  for (int i = 0; i < 100; ++i) {
    const auto src = random_source(rng, f.bpe);
    const auto hyps = beam_search(f.model, src, opts);
    ASSERT_EQ(hyps.size(), 1u);
    EXPECT_EQ(hyps[0].token_ids, greedy_decode(f.model, src, opts));
  }
}

TEST(Beam, HypothesesAreRankedAndScored) {
  const auto& f = fx();
  Rng rng(3);
  DecodeOptions opts;
  opts.beam_size = 4;
  const auto src = random_source(rng, f.bpe);
  const auto hyps = beam_search(f.model, src, opts, {}, 4);
  ASSERT_FALSE(hyps.empty());
  for (std::size_t i = 1; i < hyps.size(); ++i) {
    if (hyps[i - 1].finished == hyps[i].finished)
      EXPECT_GE(hyps[i - 1].normalized_score(0.6), hyps[i].normalized_score(0.6));
    else
      EXPECT_TRUE(hyps[i - 1].finished);
  }
  // The reported score is the teacher-forced log-probability of the hypothesis.
  const auto& best = hyps[0];
  TokenIds prefix{kBos};
  prefix.insert(prefix.end(), best.token_ids.begin(), best.token_ids.end());
  const auto lp = f.model.forward(src, prefix);
  double total = 0;
  for (std::size_t t = 0; t < best.token_ids.size(); ++t) total += lp(static_cast<Eigen::Index>(t), best.token_ids[t]);
  if (best.finished) total += lp(static_cast<Eigen::Index>(best.token_ids.size()), kEos);
  EXPECT_NEAR(best.score, total, 1e-3);
  for (auto id : best.token_ids) EXPECT_FALSE(f.bpe.is_special(id));
}

TEST(Beam, LengthLimits) {
  const auto& f = fx();
  Rng rng(4);
  const auto src = random_source(rng, f.bpe);
  DecodeOptions opts;
  opts.max_len = 5;
  for (const auto& h : beam_search(f.model, src, opts)) EXPECT_LE(h.token_ids.size(), 5u);
  opts.max_len = 12;
  opts.min_length = 8;
  for (const auto& h : beam_search(f.model, src, opts))
    if (h.finished) EXPECT_GE(h.token_ids.size(), 8u);
  opts = {};
  opts.beam_size = 0;
  EXPECT_THROW(beam_search(f.model, src, opts), Error);
}

TEST(Beam, BatchEqualsSingle) {
  const auto& f = fx();
  Rng rng(5);
  std::vector<TokenIds> sources;
  for (int i = 0; i < 6; ++i) sources.push_back(random_source(rng, f.bpe));
  const auto batched = beam_search_batch(f.model, sources);
  ASSERT_EQ(batched.size(), sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto single = beam_search(f.model, sources[i]);
    ASSERT_EQ(batched[i].size(), single.size());
    for (std::size_t k = 0; k < single.size(); ++k) {
      EXPECT_EQ(batched[i][k].token_ids, single[k].token_ids);
      EXPECT_NEAR(batched[i][k].score, single[k].score, 1e-4);
    }
  }
}

TEST(Beam, ForcedPrefixAlwaysKept) {
  const auto& f = fx();
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto src = random_source(rng, f.bpe);
    const auto target = f.bpe.encode(generate_toy_corpus(1, rng())[0].target);
    const auto cut = uniform_int(rng, 0, target.size());
    const TokenIds prefix(target.begin(), target.begin() + static_cast<long>(cut));
    const auto hyps = prefix_constrained_decode(f.model, f.bpe, src, prefix, 3);
    ASSERT_FALSE(hyps.empty());
    std::set<std::string> texts;
    for (const auto& h : hyps) {
      ASSERT_GE(h.token_ids.size(), prefix.size());
      EXPECT_TRUE(std::equal(prefix.begin(), prefix.end(), h.token_ids.begin()));
      texts.insert(f.bpe.decode(h.token_ids));
    }
    EXPECT_EQ(texts.size(), hyps.size());
  }
}

TEST(Beam, PrefixLongerThanLimitRejected) {
  const auto& f = fx();
  DecodeOptions opts;
  opts.max_len = 3;
  const TokenIds src{20, kFirstLanguageTag}, prefix{20, 21, 22};
  EXPECT_THROW(prefix_constrained_decode(f.model, f.bpe, src, prefix, 2, opts), Error);
}

TEST(Infill, FillersRespectGapCount) {
  const auto& f = fx();
  const auto one = encode_bti(f.bpe, "the red cat sleeps", "da <gap> dormu", "tgtish");
  const auto fills = infill_gaps(f.model, one.source_ids, 3);
  ASSERT_FALSE(fills.empty());
  for (const auto& h : fills) {
    EXPECT_FALSE(h.token_ids.empty());
    EXPECT_EQ(std::count(h.token_ids.begin(), h.token_ids.end(), kGapSep), 0);
  }
  const auto no_gap = encode_trn(f.bpe, "the red cat", "tgtish");
  EXPECT_THROW(infill_gaps(f.model, no_gap.source_ids, 3), Error);
}

TEST(TextDecoder, Wrappers) {
  const auto& f = fx();
  DecodeOptions opts;
  opts.max_len = 20;
  const TextDecoder dec(f.bpe, f.model, opts);
  EXPECT_NO_THROW(dec.translate("the red cat sleeps", "tgtish"));
  EXPECT_NO_THROW(dec.synchronize("the red cat sleeps", "da kato", TaskKind::kIns, "tgtish"));
  const auto fills = dec.fill("the red cat sleeps", "da <gap> dormu", "tgtish", 3);
  EXPECT_LE(fills.size(), 3u);
  for (const auto& c : dec.complete("the red cat sleeps", "tgtish", "da kato", 3)) EXPECT_EQ(c.rfind("da kato", 0), 0u);
  const std::vector<Triplet> ts{{TaskKind::kTrn, "the red cat", std::nullopt, "", std::nullopt, "srcish", "tgtish"},
                                {TaskKind::kBti, "the red cat", std::nullopt, "", std::string("da <gap>"), "srcish", "tgtish"}};
  const auto outs = dec.run_batch(ts);
  ASSERT_EQ(outs.size(), 2u);
  EXPECT_EQ(outs[0], dec.run(ts[0]));
  EXPECT_EQ(outs[1], dec.run(ts[1]));
}

TEST(Inference, ConcurrentDecodesAgree) {
  const auto& f = fx();
  Rng rng(9);
  const auto src = random_source(rng, f.bpe);
  const auto expected = beam_search(f.model, src)[0].token_ids;
  std::vector<TokenIds> got(4);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < got.size(); ++i) threads.emplace_back([&, i] { got[i] = beam_search(f.model, src)[0].token_ids; });
  for (auto& t : threads) t.join();
  for (const auto& g : got) EXPECT_EQ(g, expected);
}
