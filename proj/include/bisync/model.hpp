#pragma once

#include <bisync/common.hpp>
#include <bisync/protocol.hpp>

#include <Eigen/Core>

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace bisync {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixF = Matrix<float>;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 512;
  double dropout = 0.1;
  int vocab_size = 0;
  int max_positions = 256;
  bool tied_embeddings = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Parameter indices for one linear layer (weight is [out, in]).
struct LinearSlots {
  std::size_t weight = 0;
  std::size_t bias = 0;
};
struct NormSlots {
  std::size_t gamma = 0;
  std::size_t beta = 0;
};
struct AttentionSlots {
  LinearSlots q, k, v, out;
};
struct EncoderLayerSlots {
  NormSlots self_norm;
  AttentionSlots self_attn;
  NormSlots ff_norm;
  LinearSlots ff1, ff2;
};
struct DecoderLayerSlots {
  NormSlots self_norm;
  AttentionSlots self_attn;
  NormSlots cross_norm;
  AttentionSlots cross_attn;
  NormSlots ff_norm;
  LinearSlots ff1, ff2;
};

// Canonical tensor names, shapes and the slot structure derived from a config.
struct ParamLayout {
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> shapes;
  std::size_t embedding = 0;
  std::size_t output_weight = 0;  // == embedding when tied
  std::size_t output_bias = 0;
  std::vector<EncoderLayerSlots> encoder;
  NormSlots encoder_norm;
  std::vector<DecoderLayerSlots> decoder;
  NormSlots decoder_norm;

  explicit ParamLayout(const ModelConfig& config);
  ParamLayout() = default;
  std::size_t index_of(std::string_view name) const;
};

// All learnable tensors of the encoder-decoder, keyed by canonical name.
// Vectors are stored as 1 x n matrices. With tied embeddings the output
// projection is the embedding tensor itself.
template <typename T>
struct TransformerParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<Matrix<T>> tensors;

  TransformerParams() = default;
  explicit TransformerParams(const ModelConfig& cfg);  // zero-initialized

  static TransformerParams random(const ModelConfig& cfg, std::uint64_t seed);
  TransformerParams zeros_like() const { return TransformerParams(config); }

  Matrix<T>& embedding() { return tensors[layout.embedding]; }
  const Matrix<T>& embedding() const { return tensors[layout.embedding]; }
  Matrix<T>& output_projection() { return tensors[layout.output_weight]; }
  const Matrix<T>& output_projection() const { return tensors[layout.output_weight]; }
  Matrix<T>& operator[](std::string_view name) { return tensors[layout.index_of(name)]; }
  const Matrix<T>& operator[](std::string_view name) const { return tensors[layout.index_of(name)]; }

  std::size_t parameter_count() const;
  bool all_finite() const;

  template <typename U>
  TransformerParams<U> cast() const {
    TransformerParams<U> out;
    out.config = config;
    out.layout = layout;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

// A padded batch of encoded examples. Target input is BOS + target,
// target output is target + EOS.
struct Batch {
  int size = 0;
  int src_len = 0;
  int tgt_len = 0;
  std::vector<TokenId> src;      // size * src_len, PAD-filled
  std::vector<TokenId> tgt_in;   // size * tgt_len
  std::vector<TokenId> tgt_out;  // size * tgt_len
  std::vector<int> src_lengths;
  std::vector<int> tgt_lengths;  // includes EOS
  std::size_t target_tokens = 0;
};

Batch make_batch(std::span<const EncodedExample* const> examples);

// Sinusoidal position table [max_positions, d_model].
template <typename T>
Matrix<T> positional_encoding(int max_positions, int d_model);

// Teacher-forced log-probabilities [target_prefix.size(), vocab] for one
// example: row t is conditioned on the full source and prefix positions <= t.
// The prefix should start with BOS.
template <typename T>
Matrix<T> forward(const TransformerParams<T>& params, std::span<const TokenId> source_ids,
                  std::span<const TokenId> target_prefix_ids);

// Log-probabilities for every target position of a padded batch,
// [size * tgt_len, vocab]; rows at PAD positions are unspecified.
template <typename T>
Matrix<T> batch_log_probs(const TransformerParams<T>& params, const Batch& batch);

// Label-smoothed cross entropy of log-probabilities against gold ids, mean
// over non-PAD positions. The smoothed target puts 1-eps on the gold token
// and eps/(V-1) on each other token.
template <typename T>
T smoothed_loss(const Matrix<T>& log_probs, std::span<const TokenId> target_ids, double label_smoothing);

// Batched forward pass returning the mean smoothed loss. When `grads` is
// given, gradients of that loss are accumulated into it. Dropout is active
// iff `dropout_rng` is non-null.
template <typename T>
T forward_backward(const TransformerParams<T>& params, const Batch& batch, double label_smoothing,
                   TransformerParams<T>* grads, Rng* dropout_rng);

double noam_lr(long step, int d_model, int warmup_steps, double scale = 1.0);

struct TrainConfig {
  int warmup_steps = 4000;
  double label_smoothing = 0.1;
  int tokens_per_batch = 4096;
  long total_steps = 1000;
  long checkpoint_every = 100;
  int keep_last = 10;
  long log_every = 50;
  std::uint64_t rng_seed = 1;
  double lr_scale = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.998;
  double adam_eps = 1e-9;

  void validate() const;
};

struct TrainLogEntry {
  long step = 0;
  double loss = 0;
  double lr = 0;
  double tokens_per_sec = 0;
  nlohmann::json to_json() const;
};

struct Checkpoint {
  long step = 0;
  TransformerParams<float> params;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  // the last keep_last, oldest first
  std::vector<TrainLogEntry> log;
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_log;
  std::function<void(const Checkpoint&)> on_checkpoint;
};

// Adam with the Noam schedule over token-bucketed batches. Throws on a
// non-finite loss.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const std::vector<EncodedExample>& dataset, const TrainHooks& hooks = {},
                  const TransformerParams<float>* init = nullptr);

TransformerParams<float> average_checkpoints(std::span<const TransformerParams<float>> checkpoints);

// Checkpoint files: 8-byte magic, u64 little-endian header length, JSON
// header (format version, config, tensor table), then raw tensor bytes.
void save_checkpoint(const std::filesystem::path& path, const TransformerParams<float>& params, long step = 0);
TransformerParams<float> load_checkpoint(const std::filesystem::path& path);

extern template struct TransformerParams<float>;
extern template struct TransformerParams<double>;

}  // namespace bisync
