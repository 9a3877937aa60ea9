#include <bisync/corpus.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>
#include <utility>

namespace bisync {

void validate_pair(const ParallelPair& pair, const LanguagePair& languages) {
  if (trim(pair.source).empty() || trim(pair.target).empty())
    throw Error("parallel pair has an empty side");
  if (pair.src_lang == pair.tgt_lang) throw Error("parallel pair languages must differ");
  if (!languages.contains(pair.src_lang) || !languages.contains(pair.tgt_lang))
    throw Error("parallel pair language outside the configured pair");
}

void CorpusFilterConfig::validate() const {
  if (!(max_length_ratio > 1.0)) throw Error("max_length_ratio must be > 1");
  if (min_words < 1 || min_words > max_words) throw Error("need 1 <= min_words <= max_words");
  if (perturb_prob < 0.0 || perturb_prob > 1.0) throw Error("perturb_prob must be in [0, 1]");
}

const char* to_string(DropReason reason) {
  switch (reason) {
    case DropReason::kKept: return "kept";
    case DropReason::kLength: return "length";
    case DropReason::kRatio: return "ratio";
  }
  return "?";
}

namespace {

// UTF-8 sequences folded onto ASCII before counting.
constexpr std::array<std::pair<std::string_view, std::string_view>, 14> kPunctuationTable{{
    {"“", "\""}, {"”", "\""}, {"„", "\""}, {"«", "\""}, {"»", "\""},
    {"‘", "'"},  {"’", "'"},  {"‚", "'"},
    {"–", "-"},  {"—", "-"},  {"−", "-"},
    {"…", "..."},
    {"\xC2\xA0", " "}, {"\xE2\x80\xAF", " "},
}};

bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

std::string lowercase_first(std::string text) {
  if (!text.empty()) text[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(text[0])));
  return text;
}

std::string strip_terminal(std::string text) {
  text = trim(text);
  if (text.size() >= 3 && text.compare(text.size() - 3, 3, "...") == 0) {
    text.resize(text.size() - 3);
  } else if (!text.empty() && is_terminal(text.back())) {
    text.pop_back();
  }
  return trim(text);
}

}  // namespace

std::string normalize_punctuation(std::string_view text) {
  std::string folded;
  folded.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    bool matched = false;
    for (const auto& [from, to] : kPunctuationTable) {
      if (text.substr(i, from.size()) == from) {
        folded += to;
        i += from.size();
        matched = true;
        break;
      }
    }
    if (!matched) folded += text[i++];
  }
  return join_words(split_words(folded));
}

FilterDecision filter_pair(const ParallelPair& pair, const CorpusFilterConfig& cfg) {
  const auto src = split_words(normalize_punctuation(pair.source)).size();
  const auto tgt = split_words(normalize_punctuation(pair.target)).size();
  const auto in_range = [&](std::size_t n) {
    return n >= static_cast<std::size_t>(cfg.min_words) && n <= static_cast<std::size_t>(cfg.max_words);
  };
  if (!in_range(src) || !in_range(tgt)) return {false, DropReason::kLength};
  const double ratio = static_cast<double>(std::max(src, tgt)) / static_cast<double>(std::min(src, tgt));
  if (ratio > cfg.max_length_ratio) return {false, DropReason::kRatio};
  return {};
}

ParallelPair lowercase_and_strip_terminal(const ParallelPair& pair) {
  ParallelPair out = pair;
  out.source = lowercase_first(strip_terminal(pair.source));
  out.target = lowercase_first(strip_terminal(pair.target));
  return out;
}

ParallelPair perturb_casing(const ParallelPair& pair, const CorpusFilterConfig& cfg, Rng& rng) {
  if (bernoulli(rng, cfg.perturb_prob)) return lowercase_and_strip_terminal(pair);
  return pair;
}

std::vector<ParallelPair> preprocess_corpus(const std::vector<ParallelPair>& pairs,
                                            const CorpusFilterConfig& cfg, PreprocessStats* stats) {
  cfg.validate();
  PreprocessStats local;
  std::vector<ParallelPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ParallelPair p = pairs[i];
    p.source = normalize_punctuation(p.source);
    p.target = normalize_punctuation(p.target);
    const auto decision = filter_pair(p, cfg);
    if (!decision.keep) {
      (decision.reason == DropReason::kRatio ? local.dropped_ratio : local.dropped_length)++;
      continue;
    }
    Rng rng(derive_seed(cfg.rng_seed, i));
    ParallelPair q = perturb_casing(p, cfg, rng);
    if (!(q == p)) ++local.perturbed;
    out.push_back(std::move(q));
    ++local.kept;
  }
  if (stats) *stats = local;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

WordClass parse_class(std::string_view pos) {
  static const std::pair<std::string_view, WordClass> kNames[] = {
      {"det", WordClass::kDeterminer},        {"adj", WordClass::kAdjective},
      {"noun", WordClass::kNoun},             {"vi", WordClass::kIntransitiveVerb},
      {"vt", WordClass::kTransitiveVerb},     {"adv", WordClass::kAdverb},
      {"prep", WordClass::kPreposition},      {"conj", WordClass::kConjunction},
  };
  for (const auto& [name, c] : kNames)
    if (name == pos) return c;
  throw Error("lexicon: unknown part of speech '" + std::string(pos) + "'");
}

std::vector<std::string> split_on(std::string_view text, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    parts.emplace_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

constexpr std::size_t kNumClasses = 8;

}  // namespace

ToyLexicon ToyLexicon::parse(std::string_view text) {
  ToyLexicon lex;
  lex.by_class_.resize(kNumClasses);
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split_on(line, '\t');
    if (cols.size() != 4) throw Error("lexicon line " + std::to_string(lineno) + ": expected 4 columns");
    LexiconEntry e{parse_class(cols[0]), split_on(cols[1], '|'), split_on(cols[2], '|'),
                   cols[3] == "-" ? std::string() : cols[3]};
    if (e.source_forms.size() != e.target_forms.size())
      throw Error("lexicon line " + std::to_string(lineno) + ": dialect count mismatch");
    if (lex.dialects_ == 0) lex.dialects_ = e.source_forms.size();
    if (e.source_forms.size() != lex.dialects_)
      throw Error("lexicon line " + std::to_string(lineno) + ": inconsistent dialect count");
    if (e.word_class == WordClass::kNoun && e.marker.empty())
      throw Error("lexicon line " + std::to_string(lineno) + ": noun without class marker");
    lex.by_class_[static_cast<std::size_t>(e.word_class)].push_back(lex.entries_.size());
    lex.entries_.push_back(std::move(e));
  }
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (lex.by_class_[c].empty()) throw Error("lexicon: a word class has no entries");
  return lex;
}

ToyLexicon ToyLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

ToyLexicon ToyLexicon::load_default() {
  return load(std::filesystem::path(BISYNC_DATA_DIR) / "toy_lexicon.tsv");
}

long ToyLexicon::find_source(std::string_view word) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    for (const auto& f : entries_[i].source_forms)
      if (f == word) return static_cast<long>(i);
  return -1;
}

ToyCorpus::ToyCorpus(ToyLexicon lexicon, ToyCorpusConfig config)
    : lexicon_(std::move(lexicon)), config_(std::move(config)) {
  if (config_.source_dialect_weights.size() > lexicon_.dialects() ||
      config_.target_dialect_weights.size() > lexicon_.dialects())
    throw Error("toy corpus: more dialect weights than lexicon dialects");
  if (config_.source_dialect_weights.empty() || config_.target_dialect_weights.empty())
    throw Error("toy corpus: empty dialect weights");
}

void ToyCorpus::sample_np(Rng& rng, bool allow_pp, std::vector<std::size_t>& out) const {
  const auto pick = [&](WordClass c) {
    const auto& ids = lexicon_.of_class(c);
    out.push_back(ids[uniform_int(rng, 0, ids.size() - 1)]);
  };
  pick(WordClass::kDeterminer);
  if (bernoulli(rng, config_.adjective_prob)) pick(WordClass::kAdjective);
  pick(WordClass::kNoun);
  if (allow_pp && bernoulli(rng, config_.pp_prob)) {
    pick(WordClass::kPreposition);
    sample_np(rng, false, out);
  }
}

std::vector<std::size_t> ToyCorpus::sample_sentence(Rng& rng) const {
  std::vector<std::size_t> words;
  const auto pick = [&](WordClass c) {
    const auto& ids = lexicon_.of_class(c);
    words.push_back(ids[uniform_int(rng, 0, ids.size() - 1)]);
  };
  const auto clause = [&] {
    sample_np(rng, true, words);
    if (bernoulli(rng, config_.transitive_prob)) {
      pick(WordClass::kTransitiveVerb);
      sample_np(rng, true, words);
    } else {
      pick(WordClass::kIntransitiveVerb);
    }
    if (bernoulli(rng, config_.adverb_prob)) pick(WordClass::kAdverb);
  };
  clause();
  if (bernoulli(rng, config_.second_clause_prob)) {
    pick(WordClass::kConjunction);
    clause();
  }
  return words;
}

std::string ToyCorpus::render_source(const std::vector<std::size_t>& words, std::size_t dialect) const {
  std::vector<std::string> out;
  out.reserve(words.size());
  for (auto w : words) out.push_back(lexicon_.entries()[w].source_forms[dialect]);
  return join_words(out);
}

std::string ToyCorpus::render_target(const std::vector<std::size_t>& words, std::size_t dialect) const {
  const auto& entries = lexicon_.entries();
  std::vector<std::string> out;
  out.reserve(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    const auto& e = entries[words[i]];
    if (e.word_class == WordClass::kAdjective && i + 1 < words.size() &&
        entries[words[i + 1]].word_class == WordClass::kNoun) {
      const auto& noun = entries[words[i + 1]];
      out.push_back(noun.target_forms[dialect]);
      out.push_back(e.target_forms[dialect] + noun.marker);
      ++i;
    } else {
      out.push_back(e.target_forms[dialect]);
    }
  }
  return join_words(out);
}

ParallelPair ToyCorpus::sample(Rng& rng) const {
  const auto words = sample_sentence(rng);
  const auto sd = sample_weighted(rng, config_.source_dialect_weights);
  const auto td = sample_weighted(rng, config_.target_dialect_weights);
  return {render_source(words, sd), render_target(words, td), config_.languages.first,
          config_.languages.second};
}

std::vector<ParallelPair> ToyCorpus::generate(std::size_t n, std::uint64_t seed) const {
  std::vector<ParallelPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(sample(rng));
  }
  return out;
}

std::string ToyCorpus::translate(std::string_view source, std::size_t target_dialect) const {
  if (target_dialect >= lexicon_.dialects()) throw Error("toy corpus: dialect out of range");
  std::vector<std::size_t> words;
  for (const auto& w : split_words(source)) {
    const long id = lexicon_.find_source(w);
    if (id < 0) throw Error("toy corpus: '" + w + "' is not in the lexicon");
    words.push_back(static_cast<std::size_t>(id));
  }
  return render_target(words, target_dialect);
}

std::vector<ParallelPair> generate_toy_corpus(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("generate_toy_corpus: n must be >= 1");
  return ToyCorpus(ToyLexicon::load_default(), {}).generate(n, seed);
}

// ---------------------------------------------------------------------------

std::vector<ParallelPair> read_tsv(const std::filesystem::path& path, const LanguagePair& languages) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::vector<ParallelPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error("'" + path.string() + "': line without TAB");
    pairs.push_back({line.substr(0, tab), line.substr(tab + 1), languages.first, languages.second});
  }
  return pairs;
}

void write_tsv(const std::filesystem::path& path, const std::vector<ParallelPair>& pairs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& p : pairs) out << p.source << '\t' << p.target << '\n';
}

std::vector<ParallelPair> read_aligned(const std::filesystem::path& src, const std::filesystem::path& tgt,
                                       const LanguagePair& languages) {
  std::ifstream a(src), b(tgt);
  if (!a || !b) throw Error("cannot open aligned corpus files");
  std::vector<ParallelPair> pairs;
  std::string s, t;
  while (std::getline(a, s)) {
    if (!std::getline(b, t)) throw Error("aligned corpus files differ in length");
    pairs.push_back({s, t, languages.first, languages.second});
  }
  if (std::getline(b, t)) throw Error("aligned corpus files differ in length");
  return pairs;
}

void write_aligned(const std::filesystem::path& src, const std::filesystem::path& tgt,
                   const std::vector<ParallelPair>& pairs) {
  std::ofstream a(src), b(tgt);
  if (!a || !b) throw Error("cannot write aligned corpus files");
  for (const auto& p : pairs) {
    a << p.source << '\n';
    b << p.target << '\n';
  }
}

}  // namespace bisync
