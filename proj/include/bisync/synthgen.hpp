#pragma once

#include <bisync/corpus.hpp>
#include <bisync/protocol.hpp>

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace bisync {

struct SynthConfig {
  int max_segment_len = 5;
  double max_removed_ratio = 0.5;
  int nbest_for_sub = 5;
  std::uint64_t rng_seed = 0;
  std::array<double, 5> task_mix{0.2, 0.2, 0.2, 0.2, 0.2};  // TRN, INS, DEL, SUB, BTI

  void validate() const;
};

// Fills `<gap>` words of a target given its source; returns up to n fillers,
// best first.
class FillOracle {
 public:
  virtual ~FillOracle() = default;
  virtual std::vector<std::string> fill(const std::string& x, const std::string& y_gapped,
                                        const std::string& tgt_lang, int n) const = 0;
};

enum class SkipReason { kTooShort, kEmptyFiller, kNoDistinctFiller };
const char* to_string(SkipReason reason);

struct SynthOutcome {
  std::optional<Triplet> triplet;
  SkipReason skip = SkipReason::kTooShort;  // meaningful when triplet is empty
};

// Segment length for INS and SUB: uniform in [1, min(max_segment_len,
// floor(max_removed_ratio * |y'|))]. Returns 0 when no length is allowed.
int max_update_segment(const SynthConfig& cfg, std::size_t target_words);

Triplet make_translation(const ParallelPair& pair);
SynthOutcome make_insertion(const ParallelPair& pair, const SynthConfig& cfg, Rng& rng);
SynthOutcome make_deletion(const ParallelPair& pair, const FillOracle& oracle, const SynthConfig& cfg, Rng& rng);
SynthOutcome make_substitution(const ParallelPair& pair, const FillOracle& oracle, const SynthConfig& cfg, Rng& rng);
Triplet make_bti(const ParallelPair& pair, const SynthConfig& cfg, Rng& rng);

struct SynthStats {
  std::map<std::string, std::size_t> emitted;                      // by task
  std::map<std::string, std::map<std::string, std::size_t>> skips;  // task -> reason -> count
  std::map<std::size_t, std::size_t> target_length_histogram;     // |y'| in words
  std::size_t dropped_pairs = 0;

  nlohmann::json to_json() const;
};

// One triplet per input pair, task drawn from cfg.task_mix; a skipped draw
// is retried with a fresh segment, then with a fresh task. The oracle may be
// null only if the mix gives DEL and SUB zero weight. Pair i uses its own
// derived random stream.
std::vector<Triplet> generate_triplets(const std::vector<ParallelPair>& pairs, const FillOracle* oracle,
                                       const SynthConfig& cfg, SynthStats* stats = nullptr);

// Span properties per task: INS drops one contiguous span, DEL adds one,
// SUB replaces one with different words. Returns a description of the first
// violation, or nullopt.
std::optional<std::string> check_span_property(const Triplet& t, const SynthConfig& cfg = {});

}  // namespace bisync
