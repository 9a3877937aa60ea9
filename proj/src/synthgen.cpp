#include <bisync/synthgen.hpp>

#include <algorithm>
#include <cmath>

namespace bisync {

void SynthConfig::validate() const {
  if (max_segment_len < 1) throw Error("max_segment_len must be >= 1");
  if (!(max_removed_ratio > 0.0 && max_removed_ratio <= 1.0)) throw Error("max_removed_ratio must be in (0, 1]");
  if (nbest_for_sub < 2) throw Error("nbest_for_sub must be >= 2");
  double total = 0;
  for (double w : task_mix) {
    if (w < 0.0) throw Error("task_mix weights must be non-negative");
    total += w;
  }
  if (total <= 0.0) throw Error("task_mix must have positive mass");
}

const char* to_string(SkipReason reason) {
  switch (reason) {
    case SkipReason::kTooShort: return "too_short";
    case SkipReason::kEmptyFiller: return "empty_filler";
    case SkipReason::kNoDistinctFiller: return "no_distinct_filler";
  }
  return "?";
}

int max_update_segment(const SynthConfig& cfg, std::size_t target_words) {
  const auto by_ratio = static_cast<int>(std::floor(cfg.max_removed_ratio * static_cast<double>(target_words)));
  return std::min(cfg.max_segment_len, by_ratio);
}

namespace {

Triplet base_triplet(TaskKind task, const ParallelPair& pair) {
  Triplet t;
  t.task = task;
  t.x_prime = pair.source;
  t.y_prime = pair.target;
  t.src_lang = pair.src_lang;
  t.tgt_lang = pair.tgt_lang;
  return t;
}

std::vector<std::string> splice(const std::vector<std::string>& words, std::size_t begin, std::size_t end,
                                const std::vector<std::string>& insert) {
  std::vector<std::string> out(words.begin(), words.begin() + static_cast<long>(begin));
  out.insert(out.end(), insert.begin(), insert.end());
  out.insert(out.end(), words.begin() + static_cast<long>(end), words.end());
  return out;
}

const std::vector<std::string> kGapWord{std::string(kGapMarker)};

}  // namespace

Triplet make_translation(const ParallelPair& pair) { return base_triplet(TaskKind::kTrn, pair); }

SynthOutcome make_insertion(const ParallelPair& pair, const SynthConfig& cfg, Rng& rng) {
  const auto words = split_words(pair.target);
  const int limit = max_update_segment(cfg, words.size());
  if (limit < 1) return {std::nullopt, SkipReason::kTooShort};
  const auto len = uniform_int(rng, 1, static_cast<std::size_t>(limit));
  const auto pos = uniform_int(rng, 0, words.size() - len);
  Triplet t = base_triplet(TaskKind::kIns, pair);
  t.y = join_words(splice(words, pos, pos + len, {}));
  return {std::move(t), {}};
}

SynthOutcome make_deletion(const ParallelPair& pair, const FillOracle& oracle, const SynthConfig&, Rng& rng) {
  const auto words = split_words(pair.target);
  if (words.empty()) return {std::nullopt, SkipReason::kTooShort};
  const auto pos = uniform_int(rng, 0, words.size());
  const auto gapped = join_words(splice(words, pos, pos, kGapWord));
  const auto fillers = oracle.fill(pair.source, gapped, pair.tgt_lang, 1);
  if (fillers.empty()) return {std::nullopt, SkipReason::kEmptyFiller};
  const auto filler = split_words(fillers.front());
  if (filler.empty() || std::count(filler.begin(), filler.end(), "<sep>") > 0)
    return {std::nullopt, SkipReason::kEmptyFiller};
  Triplet t = base_triplet(TaskKind::kDel, pair);
  t.y = join_words(splice(words, pos, pos, filler));
  return {std::move(t), {}};
}

SynthOutcome make_substitution(const ParallelPair& pair, const FillOracle& oracle, const SynthConfig& cfg, Rng& rng) {
  const auto words = split_words(pair.target);
  const int limit = max_update_segment(cfg, words.size());
  if (limit < 1) return {std::nullopt, SkipReason::kTooShort};
  const auto len = uniform_int(rng, 1, static_cast<std::size_t>(limit));
  const auto pos = uniform_int(rng, 0, words.size() - len);
  const auto masked = join_words(words, pos, pos + len);
  const auto gapped = join_words(splice(words, pos, pos + len, kGapWord));
  for (const auto& candidate : oracle.fill(pair.source, gapped, pair.tgt_lang, cfg.nbest_for_sub)) {
    const auto filler = split_words(candidate);
    if (filler.empty() || std::count(filler.begin(), filler.end(), "<sep>") > 0) continue;
    if (join_words(filler) == masked) continue;
    Triplet t = base_triplet(TaskKind::kSub, pair);
    t.y = join_words(splice(words, pos, pos + len, filler));
    return {std::move(t), {}};
  }
  return {std::nullopt, SkipReason::kNoDistinctFiller};
}

Triplet make_bti(const ParallelPair& pair, const SynthConfig& cfg, Rng& rng) {
  const auto words = split_words(pair.target);
  if (words.empty()) throw Error("BTI needs a non-empty target");
  const auto len = uniform_int(rng, 1, std::min<std::size_t>(static_cast<std::size_t>(cfg.max_segment_len), words.size()));
  const auto pos = uniform_int(rng, 0, words.size() - len);
  Triplet t = base_triplet(TaskKind::kBti, pair);
  t.y_gapped = join_words(splice(words, pos, pos + len, kGapWord));
  t.y_prime = join_words(words, pos, pos + len);
  return t;
}

nlohmann::json SynthStats::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [len, count] : target_length_histogram) hist[std::to_string(len)] = count;
  return {{"emitted", emitted}, {"skips", skips}, {"target_length_histogram", hist}, {"dropped_pairs", dropped_pairs}};
}

std::vector<Triplet> generate_triplets(const std::vector<ParallelPair>& pairs, const FillOracle* oracle,
                                       const SynthConfig& cfg, SynthStats* stats) {
  cfg.validate();
  const std::vector<double> mix(cfg.task_mix.begin(), cfg.task_mix.end());
  const bool needs_oracle = cfg.task_mix[2] > 0.0 || cfg.task_mix[3] > 0.0;
  if (needs_oracle && !oracle) throw Error("DEL and SUB generation require a fill-in-gaps oracle");
  constexpr int kSegmentRetries = 4;
  constexpr int kTaskRetries = 5;

  SynthStats local;
  SynthStats& st = stats ? *stats : local;
  std::vector<Triplet> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& pair = pairs[i];
    Rng rng(derive_seed(cfg.rng_seed, i));
    std::optional<Triplet> made;
    for (int draw = 0; draw < kTaskRetries && !made; ++draw) {
      const auto task = kAllTasks[sample_weighted(rng, mix)];
      for (int attempt = 0; attempt < kSegmentRetries && !made; ++attempt) {
        SynthOutcome o;
        switch (task) {
          case TaskKind::kTrn: o.triplet = make_translation(pair); break;
          case TaskKind::kIns: o = make_insertion(pair, cfg, rng); break;
          case TaskKind::kDel: o = make_deletion(pair, *oracle, cfg, rng); break;
          case TaskKind::kSub: o = make_substitution(pair, *oracle, cfg, rng); break;
          case TaskKind::kBti: o.triplet = make_bti(pair, cfg, rng); break;
        }
        if (o.triplet) {
          made = std::move(o.triplet);
        } else {
          ++st.skips[to_string(task)][to_string(o.skip)];
          if (o.skip == SkipReason::kTooShort) break;  // a new segment cannot help
        }
      }
    }
    if (!made) {
      ++st.dropped_pairs;
      continue;
    }
    ++st.emitted[to_string(made->task)];
    ++st.target_length_histogram[split_words(pair.target).size()];
    out.push_back(std::move(*made));
  }
  return out;
}

std::optional<std::string> check_span_property(const Triplet& t, const SynthConfig& cfg) {
  if (!is_update(t.task)) return std::nullopt;
  if (!t.y) return std::string("update triplet without y");
  const auto a = split_words(*t.y);
  const auto b = split_words(t.y_prime);
  std::size_t prefix = 0;
  while (prefix < a.size() && prefix < b.size() && a[prefix] == b[prefix]) ++prefix;
  std::size_t suffix = 0;
  while (suffix < a.size() - prefix && suffix < b.size() - prefix &&
         a[a.size() - 1 - suffix] == b[b.size() - 1 - suffix])
    ++suffix;
  const auto a_mid = a.size() - prefix - suffix;  // span only in y
  const auto b_mid = b.size() - prefix - suffix;  // span only in y'
  switch (t.task) {
    case TaskKind::kIns: {
      if (a_mid != 0 || b_mid == 0) return std::string("INS: y is not y' minus one contiguous span");
      const auto limit = static_cast<std::size_t>(std::max(0, max_update_segment(cfg, b.size())));
      if (b_mid > limit) return std::string("INS: dropped span longer than allowed");
      return std::nullopt;
    }
    case TaskKind::kDel:
      if (b_mid != 0 || a_mid == 0) return std::string("DEL: y' is not y minus one contiguous span");
      return std::nullopt;
    case TaskKind::kSub:
      if (a_mid == 0 && b_mid == 0) return std::string("SUB: y equals y'");
      if (b_mid > static_cast<std::size_t>(std::max(0, max_update_segment(cfg, b.size()))))
        return std::string("SUB: replaced span too long");
      return std::nullopt;
    default: return std::nullopt;
  }
}

}  // namespace bisync
