#pragma once

#include <bisync/model.hpp>
#include <bisync/protocol.hpp>
#include <bisync/quantize.hpp>
#include <bisync/subword.hpp>

#include <memory>
#include <span>
#include <string>
#include <vector>

namespace bisync {

struct DecodeOptions {
  int beam_size = 3;
  int max_len = 0;  // 0: 2 * source length + 10
  double length_alpha = 0.6;
  int min_length = 0;
  bool allow_gap_separator = false;
};

// token_ids excludes BOS and EOS; score is the summed log-probability
// including EOS when finished.
struct BeamHypothesis {
  TokenIds token_ids;
  double score = 0.0;
  bool finished = false;

  double normalized_score(double alpha) const;
};

// Immutable inference-time copy of a model, float32 or int8. All methods
// are const and safe to call concurrently.
class InferenceModel {
 public:
  explicit InferenceModel(const TransformerParams<float>& params);
  explicit InferenceModel(const QuantizedParams& params);
  ~InferenceModel();
  InferenceModel(InferenceModel&&) noexcept;
  InferenceModel& operator=(InferenceModel&&) noexcept;

  const ModelConfig& config() const;
  bool quantized() const;

  // Encoder output projected to per-layer cross-attention keys and values.
  struct Memory {
    int length = 0;
    std::vector<MatrixF> keys;
    std::vector<MatrixF> values;
  };
  Memory encode(std::span<const TokenId> source_ids) const;

  // Incremental decoder state; row i attends to *memory[i].
  struct State {
    std::vector<const Memory*> memory;
    std::vector<std::vector<MatrixF>> keys;    // [layer][row], capacity x d
    std::vector<std::vector<MatrixF>> values;  // [layer][row]
    int length = 0;
    int capacity = 0;
  };
  State start(std::vector<const Memory*> rows, int capacity) const;
  // Feeds one token per row at position state.length; returns log-probs [rows, vocab].
  MatrixF step(State& state, std::span<const TokenId> tokens) const;
  // Row i of the new state continues row parents[i] of the old one.
  void reorder(State& state, std::span<const std::size_t> parents) const;

  // Teacher-forced log-probabilities computed through incremental steps.
  MatrixF forward(std::span<const TokenId> source_ids, std::span<const TokenId> target_prefix_ids) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Greedy argmax decoding under the same token masks as beam search.
TokenIds greedy_decode(const InferenceModel& model, std::span<const TokenId> source_ids,
                       const DecodeOptions& options = {});

// Best-first list (finished before unfinished, then by length-normalized
// score) of at most n_best hypotheses; n_best <= 0 means beam_size.
std::vector<BeamHypothesis> beam_search(const InferenceModel& model, std::span<const TokenId> source_ids,
                                        const DecodeOptions& options = {},
                                        std::span<const TokenId> forced_prefix = {}, int n_best = 0);

// Several sources decoded in lockstep; results are identical to decoding
// each source alone.
std::vector<std::vector<BeamHypothesis>> beam_search_batch(const InferenceModel& model,
                                                           const std::vector<TokenIds>& sources,
                                                           const DecodeOptions& options = {});

// Up to k completions of the forced prefix, distinct after detokenization.
std::vector<BeamHypothesis> prefix_constrained_decode(const InferenceModel& model, const BpeModel& bpe,
                                                      std::span<const TokenId> source_ids,
                                                      std::span<const TokenId> forced_prefix, int k,
                                                      DecodeOptions options = {});

// n-best fillers for a BTI source (which must contain a gap token).
std::vector<BeamHypothesis> infill_gaps(const InferenceModel& model, std::span<const TokenId> source_ids, int n,
                                        DecodeOptions options = {});

struct Filler {
  std::string text;  // multiple fillers joined by " <sep> "
  double score = 0.0;
};

// Text-in, text-out wrapper over a vocabulary and a model.
class TextDecoder {
 public:
  TextDecoder(const BpeModel& bpe, const InferenceModel& model, DecodeOptions options = {})
      : bpe_(bpe), model_(model), options_(options) {}

  const BpeModel& bpe() const { return bpe_; }
  const InferenceModel& model() const { return model_; }
  const DecodeOptions& options() const { return options_; }

  std::string translate(std::string_view source, std::string_view tgt_lang) const;
  std::string synchronize(std::string_view x_prime, std::string_view y, TaskKind kind,
                          std::string_view tgt_lang) const;
  std::vector<Filler> fill(std::string_view x, std::string_view y_gapped, std::string_view tgt_lang, int n) const;
  // Full sentences beginning with `prefix` (whole words).
  std::vector<std::string> complete(std::string_view source, std::string_view tgt_lang, std::string_view prefix,
                                    int k) const;
  // Best decode of a task's source pattern; BTI yields the filler text.
  std::string run(const Triplet& t) const;
  std::vector<std::string> run_batch(const std::vector<Triplet>& triplets, std::size_t batch_size = 16) const;

 private:
  std::string best(const EncodedExample& ex) const;

  const BpeModel& bpe_;
  const InferenceModel& model_;
  DecodeOptions options_;
};

}  // namespace bisync
