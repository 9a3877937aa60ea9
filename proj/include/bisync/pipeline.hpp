#pragma once

#include <bisync/corpus.hpp>
#include <bisync/decode.hpp>
#include <bisync/eval.hpp>
#include <bisync/model.hpp>
#include <bisync/subword.hpp>
#include <bisync/synthgen.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace bisync {

// Fill-in-gaps oracle backed by a BTI-capable model.
class ModelFillOracle : public FillOracle {
 public:
  explicit ModelFillOracle(const TextDecoder& decoder) : decoder_(decoder) {}
  std::vector<std::string> fill(const std::string& x, const std::string& y_gapped, const std::string& tgt_lang,
                                int n) const override;

 private:
  const TextDecoder& decoder_;
};

// Reverses each pair with probability 1/2 (pair i uses its own stream).
std::vector<ParallelPair> random_directions(const std::vector<ParallelPair>& pairs, std::uint64_t seed);
// Every pair in both directions.
std::vector<ParallelPair> both_directions(const std::vector<ParallelPair>& pairs);

std::vector<EncodedExample> encode_triplets(const BpeModel& bpe, const std::vector<Triplet>& triplets);

std::vector<std::string> bpe_training_text(const std::vector<ParallelPair>& pairs);

// Training and checkpoint averaging in one call, optionally continuing from
// `init`. The log is written as JSON lines when `log_path` is set.
TransformerParams<float> train_and_average(const ModelConfig& model, const TrainConfig& train,
                                           const std::vector<EncodedExample>& data,
                                           const std::filesystem::path& log_path = {},
                                           const std::function<void(const TrainLogEntry&)>& on_log = {},
                                           const TransformerParams<float>* init = nullptr);

struct ExperimentConfig {
  std::size_t train_pairs = 200000;
  std::size_t oracle_pairs = 100000;
  std::uint64_t corpus_seed = 1;
  std::uint64_t test_seed = 7919;
  std::vector<double> dialect_weights{0.4, 0.15, 0.15, 0.15, 0.15};
  std::size_t bpe_merges = 2000;
  ModelConfig model;
  TrainConfig oracle_pretrain;  // translation only; total_steps 0 skips it
  TrainConfig oracle_train;     // translation and infilling
  TrainConfig baseline_train;
  TrainConfig bisync_train;
  bool bisync_from_oracle = true;  // BiSync starts from the oracle weights
  SynthConfig synth;
  DecodeOptions decode;
  std::size_t test_per_task_direction = 200;
  std::size_t deterministic_test_pairs = 250;  // per direction

  static ExperimentConfig desk();
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

// Artifacts of a full experiment run, all inside one working directory.
struct ExperimentArtifacts {
  std::filesystem::path dir;
  std::filesystem::path bpe() const { return dir / "bpe.model"; }
  std::filesystem::path oracle() const { return dir / "oracle.ckpt"; }
  std::filesystem::path triplets() const { return dir / "bisync_train.jsonl"; }
  std::filesystem::path synth_stats() const { return dir / "synth_stats.json"; }
  std::filesystem::path baseline() const { return dir / "baseline.ckpt"; }
  std::filesystem::path bisync() const { return dir / "bisync.ckpt"; }
  std::filesystem::path bisync_int8() const { return dir / "bisync.int8"; }
  std::filesystem::path tests() const { return dir / "tests.jsonl"; }
  std::filesystem::path deterministic_tests() const { return dir / "tests_deterministic.jsonl"; }
  std::filesystem::path report() const { return dir / "report.json"; }
  std::filesystem::path timings() const { return dir / "timings.json"; }
};

using ProgressFn = std::function<void(const std::string&)>;

// Runs corpus generation, BPE, oracle training, triplet synthesis, baseline
// and BiSync training, averaging, quantization and test-set construction.
// Stages whose outputs exist for the same configuration are reused.
ExperimentArtifacts run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                   const ProgressFn& progress = {});

TaskTests group_by_task(const std::vector<Triplet>& triplets);

// Loads a float checkpoint or an int8 model, whichever the file holds.
InferenceModel load_inference_model(const std::filesystem::path& path);

struct ExperimentReport {
  EvalReport baseline;
  EvalReport bisync;
  EvalReport bisync_int8;
  double deterministic_trn_bleu = 0.0;
  BenchResult bench_float;
  BenchResult bench_int8;
  nlohmann::json timings;
  nlohmann::json to_json() const;
};

// Evaluates the artifacts of run_experiment and writes report.json.
ExperimentReport evaluate_experiment(const ExperimentConfig& cfg, const ExperimentArtifacts& art,
                                     const ProgressFn& progress = {});

}  // namespace bisync
