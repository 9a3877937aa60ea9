#pragma once

#include <bisync/common.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace bisync {

struct ParallelPair {
  std::string source;
  std::string target;
  std::string src_lang;
  std::string tgt_lang;

  ParallelPair reversed() const { return {target, source, tgt_lang, src_lang}; }
  bool operator==(const ParallelPair&) const = default;
};

// Throws when the pair violates the ParallelPair invariants for `languages`.
void validate_pair(const ParallelPair& pair, const LanguagePair& languages);

struct CorpusFilterConfig {
  double max_length_ratio = 1.5;
  int min_words = 1;
  int max_words = 250;
  double perturb_prob = 0.05;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

enum class DropReason { kKept, kLength, kRatio };

struct FilterDecision {
  bool keep = true;
  DropReason reason = DropReason::kKept;
};

const char* to_string(DropReason reason);

// Unifies quote, dash and ellipsis variants and collapses whitespace runs.
// The substitution table is fixed (kPunctuationTable in corpus.cpp).
std::string normalize_punctuation(std::string_view text);

FilterDecision filter_pair(const ParallelPair& pair, const CorpusFilterConfig& cfg);

// With probability cfg.perturb_prob (one draw per pair) lowercases the first
// character and strips one trailing terminal punctuation mark on both sides.
ParallelPair perturb_casing(const ParallelPair& pair, const CorpusFilterConfig& cfg, Rng& rng);

// The deterministic part of perturb_casing, applied unconditionally.
ParallelPair lowercase_and_strip_terminal(const ParallelPair& pair);

// Filters and perturbs a whole corpus. Pair i draws from its own stream
// derived from cfg.rng_seed, so the result is independent of pair order.
struct PreprocessStats {
  std::size_t kept = 0;
  std::size_t dropped_length = 0;
  std::size_t dropped_ratio = 0;
  std::size_t perturbed = 0;
};
std::vector<ParallelPair> preprocess_corpus(const std::vector<ParallelPair>& pairs,
                                            const CorpusFilterConfig& cfg,
                                            PreprocessStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Toy language pair

enum class WordClass {
  kDeterminer,
  kAdjective,
  kNoun,
  kIntransitiveVerb,
  kTransitiveVerb,
  kAdverb,
  kPreposition,
  kConjunction,
};

struct LexiconEntry {
  WordClass word_class;
  std::vector<std::string> source_forms;  // one per dialect, dialect 0 first
  std::vector<std::string> target_forms;  // adjectives: stems without marker
  std::string marker;                     // nouns only
};

// Lexicon file: `#` comments, then one entry per line:
//   pos TAB source forms TAB target forms TAB class marker
// where forms are `|`-separated dialect variants and the marker is `-` for
// everything but nouns.
class ToyLexicon {
 public:
  static ToyLexicon parse(std::string_view text);
  static ToyLexicon load(const std::filesystem::path& path);
  static ToyLexicon load_default();

  const std::vector<LexiconEntry>& entries() const { return entries_; }
  const std::vector<std::size_t>& of_class(WordClass c) const {
    return by_class_[static_cast<std::size_t>(c)];
  }
  std::size_t dialects() const { return dialects_; }
  // Entry index for a source surface form in any dialect, or -1.
  long find_source(std::string_view word) const;

 private:
  std::vector<LexiconEntry> entries_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t dialects_ = 0;
};

struct ToyCorpusConfig {
  LanguagePair languages;
  // Sentence-level dialect distributions. A single weight means the
  // translation is a deterministic function of the source.
  std::vector<double> source_dialect_weights{1.0};
  std::vector<double> target_dialect_weights{1.0};
  double second_clause_prob = 0.7;
  double adjective_prob = 0.6;
  double pp_prob = 0.3;
  double transitive_prob = 0.6;
  double adverb_prob = 0.4;
};

// Source sentences come from a small PCFG over the lexicon. The target is
// the word-by-word lexicon image with adjective-noun swapped and the
// adjective suffixed with the noun's class marker.
class ToyCorpus {
 public:
  ToyCorpus(ToyLexicon lexicon, ToyCorpusConfig config);

  const ToyLexicon& lexicon() const { return lexicon_; }
  const ToyCorpusConfig& config() const { return config_; }

  ParallelPair sample(Rng& rng) const;
  std::vector<ParallelPair> generate(std::size_t n, std::uint64_t seed) const;

  // Deterministic image of a source sentence in the given target dialect.
  std::string translate(std::string_view source, std::size_t target_dialect = 0) const;

 private:
  std::vector<std::size_t> sample_sentence(Rng& rng) const;
  void sample_np(Rng& rng, bool allow_pp, std::vector<std::size_t>& out) const;
  std::string render_source(const std::vector<std::size_t>& words, std::size_t dialect) const;
  std::string render_target(const std::vector<std::size_t>& words, std::size_t dialect) const;

  ToyLexicon lexicon_;
  ToyCorpusConfig config_;
};

// n pairs from the shipped lexicon with deterministic (single-dialect) output.
std::vector<ParallelPair> generate_toy_corpus(std::size_t n, std::uint64_t seed);

// Corpus files.
std::vector<ParallelPair> read_tsv(const std::filesystem::path& path, const LanguagePair& languages);
void write_tsv(const std::filesystem::path& path, const std::vector<ParallelPair>& pairs);
std::vector<ParallelPair> read_aligned(const std::filesystem::path& src, const std::filesystem::path& tgt,
                                       const LanguagePair& languages);
void write_aligned(const std::filesystem::path& src, const std::filesystem::path& tgt,
                   const std::vector<ParallelPair>& pairs);

}  // namespace bisync
