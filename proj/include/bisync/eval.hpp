#pragma once

#include <bisync/decode.hpp>
#include <bisync/protocol.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace bisync {

// ---------------------------------------------------------------------------
// Metrics

std::vector<std::string> tokenize_13a(std::string_view text);

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  double score() const;
};

BleuStats bleu_stats(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);
// Corpus BLEU in [0, 100]: 13a tokens, orders 1-4, clipped counts,
// exponential smoothing of zero matches, brevity penalty.
double bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

struct TerOptions {
  bool lowercase = true;
  int max_shifts = 10;
  int max_shift_span = 10;
};

struct TerStats {
  double edits = 0;  // insertions + deletions + substitutions + shifts
  std::size_t ref_words = 0;
  int shifts = 0;
};

TerStats ter_stats(std::string_view hypothesis, std::string_view reference, const TerOptions& options = {});
// Sentence TER in percent.
double ter(std::string_view hypothesis, std::string_view reference, const TerOptions& options = {});
// Corpus TER: total edits over total reference words.
double corpus_ter(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                  const TerOptions& options = {});

// ---------------------------------------------------------------------------
// Task evaluation

using TaskTests = std::map<TaskKind, std::vector<Triplet>>;

// Decodes of one model over the test sets. A retranslation baseline decodes
// x' with the TRN pattern for every task and has no BTI path.
struct TaskDecodes {
  std::map<TaskKind, std::vector<std::string>> outputs;
  bool retranslation = false;
};

TaskDecodes decode_tests(const TextDecoder& decoder, const TaskTests& tests, bool retranslation,
                         std::size_t batch_size = 16);

struct EvalReport {
  std::string model;
  std::map<std::string, double> bleu;         // task -> BLEU(decode, y')
  std::map<std::string, double> closeness;    // update task -> TER(y, decode)
  double closeness_sanity = 0.0;              // TER(y, y)
  std::size_t model_bytes = 0;
  double tokens_per_sec = 0.0;
  nlohmann::json config;

  nlohmann::json to_json() const;
};

std::map<std::string, double> evaluate_tasks(const TaskDecodes& decodes, const TaskTests& tests);
std::map<std::string, double> evaluate_closeness(const TaskDecodes& decodes, const TaskTests& tests);
EvalReport evaluate_model(const TextDecoder& decoder, const TaskTests& tests, bool retranslation,
                          const std::string& name);

// Tables in the layout of the task, closeness and speed/size comparisons.
std::string format_reports(const std::vector<EvalReport>& reports);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchOptions {
  int runs = 3;
  std::size_t batch_size = 1;
  int threads = 1;
  std::size_t warmup_sentences = 8;
};

struct BenchResult {
  std::size_t model_bytes = 0;
  double tokens_per_sec = 0.0;  // median over runs
  std::vector<double> runs;
  std::size_t tokens = 0;       // generated per run
  nlohmann::json to_json() const;
};

// Decodes every source `runs` times after a warmup, counting generated
// target tokens. `model_file` is measured for size.
BenchResult benchmark(const InferenceModel& model, const std::vector<TokenIds>& sources,
                      const DecodeOptions& decode, const BenchOptions& options,
                      const std::filesystem::path& model_file = {});

}  // namespace bisync
