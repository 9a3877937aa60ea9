#include <bisync/synthgen.hpp>

#include <gtest/gtest.h>

#include <functional>

#include "test_util.hpp"

using namespace bisync;

namespace {

// Returns a fixed candidate list regardless of the input.
class ListOracle : public FillOracle {
 public:
  explicit ListOracle(std::vector<std::string> fillers) : fillers_(std::move(fillers)) {}
  std::vector<std::string> fill(const std::string&, const std::string&, const std::string&, int n) const override {
    ++calls;
    std::vector<std::string> out(fillers_.begin(), fillers_.begin() + std::min<long>(n, static_cast<long>(fillers_.size())));
    return out;
  }
  mutable int calls = 0;

 private:
  std::vector<std::string> fillers_;
};

// Input-dependent fillers drawn from the toy target vocabulary.
class HashOracle : public FillOracle {
 public:
  std::vector<std::string> fill(const std::string& x, const std::string& y_gapped, const std::string&,
                                int n) const override {
    static const std::vector<std::string> words{"da", "kato", "peti", "dormu", "reda", "sam", "zop"};
    const auto h = std::hash<std::string>{}(x + "|" + y_gapped);
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) {
      const auto a = words[(h + static_cast<std::size_t>(i)) % words.size()];
      out.push_back(i % 2 ? a + " " + words[(h / 7 + static_cast<std::size_t>(i)) % words.size()] : a);
    }
    return out;
  }
};

const ParallelPair kCat{"The white cat", "Le chat blanc", "en", "fr"};

}  // namespace

TEST(SynthConfig, Validation) {
  SynthConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.max_segment_len = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.max_removed_ratio = 0.0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.nbest_for_sub = 1;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.task_mix = {0, 0, 0, 0, 0};
  EXPECT_THROW(cfg.validate(), Error);
  cfg.task_mix = {1, -1, 0, 0, 0};
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(SynthConfig, SegmentBound) {
  const SynthConfig cfg;
  EXPECT_EQ(max_update_segment(cfg, 1), 0);
  EXPECT_EQ(max_update_segment(cfg, 2), 1);
  EXPECT_EQ(max_update_segment(cfg, 3), 1);
  EXPECT_EQ(max_update_segment(cfg, 9), 4);
  EXPECT_EQ(max_update_segment(cfg, 10), 5);
  EXPECT_EQ(max_update_segment(cfg, 40), 5);
}

TEST(Insertion, DropsOneBoundedSegment) {
  const SynthConfig cfg;
  bool saw_worked_example = false;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto out = make_insertion(kCat, cfg, rng);
    ASSERT_TRUE(out.triplet);
    const auto& t = *out.triplet;
    EXPECT_EQ(t.task, TaskKind::kIns);
    EXPECT_EQ(t.x_prime, kCat.source);
    EXPECT_EQ(t.y_prime, kCat.target);
    EXPECT_EQ(check_span_property(t, cfg), std::nullopt);
    EXPECT_EQ(split_words(*t.y).size(), 2u);
    saw_worked_example |= *t.y == "Le chat";
  }
  EXPECT_TRUE(saw_worked_example);
}

TEST(Insertion, ShortTargetsSkip) {
  Rng rng(1);
  const auto out = make_insertion({"cat", "chat", "en", "fr"}, SynthConfig{}, rng);
  EXPECT_FALSE(out.triplet);
  EXPECT_EQ(out.skip, SkipReason::kTooShort);
}

TEST(Insertion, LengthBoundOnLongTargets) {
  const SynthConfig cfg;
  for (const auto& p : generate_toy_corpus(2000, 21)) {
    Rng rng(derive_seed(5, p.source.size()));
    const auto out = make_insertion(p, cfg, rng);
    if (!out.triplet) continue;
    const auto full = split_words(out.triplet->y_prime).size();
    const auto kept = split_words(*out.triplet->y).size();
    EXPECT_GE(full - kept, 1u);
    EXPECT_LE(static_cast<int>(full - kept), std::min(5, static_cast<int>(full / 2)));
  }
}

TEST(Deletion, SplicesOracleFiller) {
  const ListOracle oracle({"est"});
  bool saw_worked_example = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto out = make_deletion(kCat, oracle, SynthConfig{}, rng);
    ASSERT_TRUE(out.triplet);
    const auto& t = *out.triplet;
    EXPECT_EQ(t.task, TaskKind::kDel);
    EXPECT_EQ(split_words(*t.y).size(), 4u);
    EXPECT_EQ(check_span_property(t), std::nullopt);
    saw_worked_example |= *t.y == "Le chat est blanc";
  }
  EXPECT_TRUE(saw_worked_example);
}

TEST(Deletion, EmptyFillerSkips) {
  const ListOracle oracle({"  "});
  Rng rng(3);
  const auto out = make_deletion(kCat, oracle, SynthConfig{}, rng);
  EXPECT_FALSE(out.triplet);
  EXPECT_EQ(out.skip, SkipReason::kEmptyFiller);
}

TEST(Substitution, PicksBestNonIdentical) {
  const ListOracle oracle({"blanc", "bleu", "clair", "blanche"});
  bool saw_worked_example = false;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const auto out = make_substitution(kCat, oracle, SynthConfig{}, rng);
    ASSERT_TRUE(out.triplet);
    const auto& t = *out.triplet;
    EXPECT_EQ(t.task, TaskKind::kSub);
    EXPECT_NE(*t.y, t.y_prime);
    EXPECT_EQ(check_span_property(t), std::nullopt);
    saw_worked_example |= *t.y == "Le chat bleu";
  }
  EXPECT_TRUE(saw_worked_example);
}

TEST(Substitution, AllIdenticalSkips) {
  // One-word masks only (3-word target); an oracle that always proposes the
  // masked word can never yield a substitution.
  const ParallelPair p{"x y z", "w w w", "en", "fr"};
  const ListOracle oracle({"w", "w", "w"});
  Rng rng(9);
  const auto out = make_substitution(p, oracle, SynthConfig{}, rng);
  EXPECT_FALSE(out.triplet);
  EXPECT_EQ(out.skip, SkipReason::kNoDistinctFiller);
}

TEST(Bti, MasksOneSegment) {
  const SynthConfig cfg;
  bool saw_worked_example = false, saw_whole = false;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(seed);
    const auto t = make_bti(kCat, cfg, rng);
    EXPECT_EQ(t.task, TaskKind::kBti);
    ASSERT_TRUE(t.y_gapped);
    const auto gapped = split_words(*t.y_gapped);
    EXPECT_EQ(std::count(gapped.begin(), gapped.end(), std::string(kGapMarker)), 1);
    const auto filler = split_words(t.y_prime);
    EXPECT_GE(filler.size(), 1u);
    EXPECT_LE(filler.size(), 5u);
    EXPECT_EQ(gapped.size() - 1 + filler.size(), 3u);
    saw_worked_example |= *t.y_gapped == "Le <gap> blanc" && t.y_prime == "chat";
    saw_whole |= *t.y_gapped == "<gap>" && t.y_prime == "Le chat blanc";
  }
  EXPECT_TRUE(saw_worked_example);
  EXPECT_TRUE(saw_whole);
}

TEST(Bti, NeverMasksMoreThanFive) {
  const auto pairs = generate_toy_corpus(1000, 8);
  Rng rng(2);
  for (const auto& p : pairs) EXPECT_LE(split_words(make_bti(p, SynthConfig{}, rng).y_prime).size(), 5u);
}

TEST(SpanProperty, DetectsViolations) {
  Triplet t{TaskKind::kIns, "x", std::string("a c"), "a b c", std::nullopt, "en", "fr"};
  EXPECT_EQ(check_span_property(t), std::nullopt);
  t.y = "a c b";
  EXPECT_NE(check_span_property(t), std::nullopt);  // not a single contiguous drop
  t.y = "c";
  EXPECT_NE(check_span_property(t), std::nullopt);  // more than half removed
  t = {TaskKind::kDel, "x", std::string("a b c"), "a c", std::nullopt, "en", "fr"};
  EXPECT_EQ(check_span_property(t), std::nullopt);
  t.y = "a c";
  EXPECT_NE(check_span_property(t), std::nullopt);
  t = {TaskKind::kSub, "x", std::string("a q c"), "a b c", std::nullopt, "en", "fr"};
  EXPECT_EQ(check_span_property(t), std::nullopt);
  t.y = "q b r";
  EXPECT_NE(check_span_property(t), std::nullopt);  // enclosing span of 3 exceeds half of 3 words
}

TEST(Generate, MixAndPropertiesAtScale) {
  SynthConfig cfg;
  cfg.rng_seed = 99;
  const auto pairs = generate_toy_corpus(100000, 123);
  const HashOracle oracle;
  SynthStats stats;
  const auto ts = generate_triplets(pairs, &oracle, cfg, &stats);
  ASSERT_GE(ts.size(), 99000u);
  std::map<TaskKind, std::size_t> counts;
  const auto& bpe = test_util::small_bpe();
  std::size_t violations = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    ++counts[ts[i].task];
    if (check_span_property(ts[i], cfg)) ++violations;
    if (i % 50 == 0) {
      EXPECT_TRUE(is_valid_example(bpe, encode_triplet(bpe, ts[i])));
    }
  }
  EXPECT_EQ(violations, 0u);
  for (auto task : kAllTasks) {
    const double frac = static_cast<double>(counts[task]) / static_cast<double>(ts.size());
    EXPECT_NEAR(frac, 0.2, 0.01) << to_string(task);
  }
  EXPECT_EQ(stats.dropped_pairs + ts.size(), pairs.size());
  std::size_t emitted = 0;
  for (const auto& [task, n] : stats.emitted) emitted += n;
  EXPECT_EQ(emitted, ts.size());
  EXPECT_TRUE(stats.to_json().contains("skips"));
}

TEST(Generate, Reproducible) {
  SynthConfig cfg;
  cfg.rng_seed = 5;
  const auto pairs = generate_toy_corpus(500, 6);
  const HashOracle oracle;
  EXPECT_EQ(generate_triplets(pairs, &oracle, cfg), generate_triplets(pairs, &oracle, cfg));
  cfg.rng_seed = 6;
  EXPECT_NE(generate_triplets(pairs, &oracle, cfg), generate_triplets(pairs, &oracle, SynthConfig{}));
}

TEST(Generate, OracleRequiredForDeletionAndSubstitution) {
  SynthConfig cfg;
  const auto pairs = generate_toy_corpus(10, 6);
  EXPECT_THROW(generate_triplets(pairs, nullptr, cfg), Error);
  cfg.task_mix = {1, 1, 0, 0, 1};
  const auto ts = generate_triplets(pairs, nullptr, cfg);
  EXPECT_EQ(ts.size(), pairs.size());
}
