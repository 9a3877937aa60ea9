#include <bisync/eval.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "test_util.hpp"

using namespace bisync;

namespace {

// Textbook corpus BLEU over whitespace tokens, written independently of the
// library: clipped n-gram precisions, zero counts replaced by 1/(2^k * total)
// for the k-th zero, geometric mean, brevity penalty.
double oracle_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  double matches[4] = {}, totals[4] = {}, c = 0, r = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split_words(hyps[s]), g = split_words(refs[s]);
    c += static_cast<double>(h.size());
    r += static_cast<double>(g.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, int> ref_counts, hyp_counts;
      for (std::size_t i = 0; i + n <= g.size(); ++i) ++ref_counts[{g.begin() + static_cast<long>(i), g.begin() + static_cast<long>(i + n)}];
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + static_cast<long>(i), h.begin() + static_cast<long>(i + n)}];
      for (const auto& [gram, k] : hyp_counts) {
        matches[n - 1] += std::min(k, ref_counts[gram]);
        totals[n - 1] += k;
      }
    }
  }
  if (c == 0) return 0.0;
  double log_sum = 0, smooth = 1;
  for (int n = 0; n < 4; ++n) {
    if (totals[n] == 0) return 0.0;
    double p;
    if (matches[n] == 0) {
      smooth *= 2;
      p = 1.0 / (smooth * totals[n]);
    } else {
      p = matches[n] / totals[n];
    }
    log_sum += std::log(p);
  }
  const double bp = c < r ? std::exp(1 - r / c) : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4);
}

// Minimum over every sequence of at most two block moves of (moves + word
// Levenshtein distance). Exhaustive, so an upper bound on what a greedy
// shift search can find is never missed on these small cases.
double lev(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<double>> d(a.size() + 1, std::vector<double>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<double>(i);
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<double>(j);
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return d[a.size()][b.size()];
}

double oracle_ter_edits(const std::vector<std::string>& hyp, const std::vector<std::string>& ref, int depth) {
  double best = lev(hyp, ref);
  if (depth == 0) return best;
  for (std::size_t i = 0; i < hyp.size(); ++i)
    for (std::size_t len = 1; i + len <= hyp.size(); ++len) {
      std::vector<std::string> rest(hyp.begin(), hyp.begin() + static_cast<long>(i));
      rest.insert(rest.end(), hyp.begin() + static_cast<long>(i + len), hyp.end());
      for (std::size_t pos = 0; pos <= rest.size(); ++pos) {
        if (pos == i) continue;
        auto moved = rest;
        moved.insert(moved.begin() + static_cast<long>(pos), hyp.begin() + static_cast<long>(i),
                     hyp.begin() + static_cast<long>(i + len));
        best = std::min(best, 1 + oracle_ter_edits(moved, ref, depth - 1));
      }
    }
  return best;
}

double oracle_ter(const std::string& hyp, const std::string& ref) {
  const auto r = split_words(ref);
  return 100.0 * oracle_ter_edits(split_words(hyp), r, 2) / static_cast<double>(r.size());
}

struct BleuCase {
  std::vector<std::string> hyps, refs;
  double frozen;
};

struct TerCase {
  std::string hyp, ref;
  double frozen;
};

}  // namespace

TEST(Bleu, FrozenFixtures) {
  const std::vector<BleuCase> cases{
      {{"the cat sat on the mat"}, {"the cat sat on the mat"}, 100.0},
      // Clipping: only one "the" is creditable; orders 2-4 are smoothed.
      {{"the the the the"}, {"the cat"}, 15.9736},
      {{"the cat sat on"}, {"the cat sat on the mat"}, 60.6531},
      {{"the cat sat on a mat"}, {"the cat sat on the mat"}, 53.7285},
      {{"the cat sat on a mat", "a dog runs"}, {"the cat sat on the mat", "a dog runs fast"}, 53.4174},
      {{""}, {"the cat"}, 0.0},
  };
  for (const auto& c : cases) {
    EXPECT_NEAR(bleu(c.hyps, c.refs), c.frozen, 0.01) << c.hyps[0];
    EXPECT_NEAR(oracle_bleu(c.hyps, c.refs), c.frozen, 0.01) << c.hyps[0];
  }
}

TEST(Bleu, Tokenization13a) {
  EXPECT_EQ(tokenize_13a("Hello, world!"), (std::vector<std::string>{"Hello", ",", "world", "!"}));
  EXPECT_EQ(tokenize_13a("It costs $5.00."), (std::vector<std::string>{"It", "costs", "$", "5.00", "."}));
  EXPECT_EQ(tokenize_13a("a&amp;b"), (std::vector<std::string>{"a", "&", "b"}));
  EXPECT_NEAR(bleu({"Hello , world !"}, {"Hello, world!"}), 100.0, 1e-9);
}

TEST(Bleu, CorpusLevelAndShuffleInvariant) {
  std::vector<std::string> hyps{"a b c d e", "x y z", "the cat sat", "one two three four"};
  std::vector<std::string> refs{"a b c d f", "x y w", "the cat sat down", "one two three four"};
  const double base = bleu(hyps, refs);
  EXPECT_NEAR(base, oracle_bleu(hyps, refs), 1e-9);
  std::swap(hyps[0], hyps[3]);
  std::swap(refs[0], refs[3]);
  std::swap(hyps[1], hyps[2]);
  std::swap(refs[1], refs[2]);
  EXPECT_NEAR(bleu(hyps, refs), base, 1e-9);
}

TEST(Bleu, Errors) {
  EXPECT_THROW(bleu({"a"}, {"a", "b"}), Error);
  EXPECT_THROW(bleu({}, {}), Error);
  EXPECT_THROW(bleu({"a"}, {""}), Error);
  const auto s = bleu_stats({"a b"}, {"a b c"});
  EXPECT_EQ(s.hyp_len, 2u);
  EXPECT_EQ(s.ref_len, 3u);
  EXPECT_EQ(s.matches[0], 2u);
}

TEST(Ter, FrozenFixtures) {
  const std::vector<TerCase> cases{
      {"a b c d", "a b c d", 0.0},
      {"a b x d", "a b c d", 25.0},
      {"c d a b", "a b c d", 25.0},  // one block shift
      {"a b c d e", "a b c d", 25.0},
      {"a c", "a b c d", 50.0},
      {"d a b c", "a b c d", 25.0},
      {"x y", "a b", 100.0},
  };
  for (const auto& c : cases) {
    EXPECT_NEAR(ter(c.hyp, c.ref), c.frozen, 0.01) << c.hyp;
    EXPECT_NEAR(oracle_ter(c.hyp, c.ref), c.frozen, 0.01) << c.hyp;
  }
  const auto stats = ter_stats("c d a b", "a b c d");
  EXPECT_EQ(stats.shifts, 1);
  EXPECT_EQ(stats.ref_words, 4u);
}

TEST(Ter, AgreesWithExhaustiveSearchOnSmallCases) {
  Rng rng(11);
  const std::vector<std::string> vocab{"a", "b", "c", "d", "e"};
  int agree = 0, total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> h, r;
    for (std::size_t i = uniform_int(rng, 1, 6); i > 0; --i) h.push_back(vocab[uniform_int(rng, 0, 4)]);
    for (std::size_t i = uniform_int(rng, 1, 6); i > 0; --i) r.push_back(vocab[uniform_int(rng, 0, 4)]);
    const double got = ter(join_words(h), join_words(r)), best = oracle_ter(join_words(h), join_words(r));
    // Greedy never beats the exhaustive optimum and never loses to no shifts.
    EXPECT_GE(got + 1e-9, best);
    EXPECT_LE(got, 100.0 * lev(h, r) / static_cast<double>(r.size()) + 1e-9);
    agree += std::abs(got - best) < 1e-9;
    ++total;
  }
  EXPECT_GE(agree, total * 9 / 10);
}

TEST(Ter, DirectionAndCase) {
  // Normalized by the reference length: swapping arguments changes the score.
  EXPECT_NEAR(ter("a b c d", "a b"), 100.0, 1e-9);
  EXPECT_NEAR(ter("a b", "a b c d"), 50.0, 1e-9);
  EXPECT_NEAR(ter("The Cat", "the cat"), 0.0, 1e-9);
  TerOptions exact;
  exact.lowercase = false;
  EXPECT_NEAR(ter("The Cat", "the cat", exact), 100.0, 1e-9);
  EXPECT_NEAR(ter("", "a b"), 100.0, 1e-9);
  EXPECT_THROW(ter("a", ""), Error);
}

TEST(Ter, CorpusIsPooled) {
  EXPECT_NEAR(corpus_ter({"a b x d", "p q"}, {"a b c d", "p q"}), 100.0 / 6.0, 1e-9);
  EXPECT_THROW(corpus_ter({"a"}, {}), Error);
}

TEST(TaskEval, ScoresAndErrors) {
  TaskTests tests;
  tests[TaskKind::kTrn] = {{TaskKind::kTrn, "x", std::nullopt, "a b c d", std::nullopt, "srcish", "tgtish"}};
  tests[TaskKind::kIns] = {{TaskKind::kIns, "x", std::string("a b d"), "a b c d", std::nullopt, "srcish", "tgtish"}};
  TaskDecodes decodes;
  decodes.outputs[TaskKind::kTrn] = {"a b c d"};
  decodes.outputs[TaskKind::kIns] = {"a b d"};
  const auto b = evaluate_tasks(decodes, tests);
  EXPECT_NEAR(b.at("TRN"), 100.0, 1e-9);
  EXPECT_LT(b.at("INS"), 100.0);
  const auto close = evaluate_closeness(decodes, tests);
  EXPECT_NEAR(close.at("INS"), 0.0, 1e-9);  // copying y preserves it exactly
  EXPECT_EQ(close.count("TRN"), 0u);
  tests[TaskKind::kDel] = {};
  EXPECT_THROW(evaluate_tasks(decodes, tests), Error);
}

TEST(TaskEval, ReportTables) {
  EvalReport r;
  r.model = "m";
  r.bleu = {{"TRN", 50.0}, {"INS", 90.0}};
  r.closeness = {{"INS", 2.0}};
  r.model_bytes = 1000;
  r.tokens_per_sec = 12.5;
  const auto text = format_reports({r});
  EXPECT_NE(text.find("BLEU"), std::string::npos);
  EXPECT_NE(text.find("TER"), std::string::npos);
  EXPECT_NE(text.find("90.0"), std::string::npos);
  const auto j = r.to_json();
  EXPECT_EQ(j["bleu"]["INS"], 90.0);
  EXPECT_EQ(j["ter_closeness_sanity"], 0.0);
}
