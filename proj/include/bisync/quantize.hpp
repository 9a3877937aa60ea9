#pragma once

#include <bisync/model.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace bisync {

// Per-row symmetric int8 weights: w[r][c] ~= q[r][c] * scales[r].
struct QuantizedMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::int8_t> q;    // rows * cols, row-major
  std::vector<float> scales;     // one per row

  // Kernel layout: blocks of 16 rows, columns in groups of 4, zero padded.
  std::vector<std::int8_t> packed;
  std::vector<std::int32_t> row_sums;
  int padded_cols = 0;

  void pack();
  MatrixF dequantize() const;
};

// scale = max|row| / 127, q = round-half-even(w / scale); zero rows get scale 1.
// Throws on non-finite input.
QuantizedMatrix quantize_rows(const MatrixF& w);

// y[n, rows] = x[n, cols] * W^T (+ bias). Activations are quantized per row
// on the fly; uses AVX-512 VNNI when compiled for it.
void int8_matmul(const MatrixF& x, const QuantizedMatrix& w, const float* bias, MatrixF& y);
bool int8_kernel_is_vectorized();

// Weight matrices (the embedding and every *.weight) are int8; biases and
// norm parameters stay float32.
struct QuantizedParams {
  ModelConfig config;
  ParamLayout layout;
  std::vector<std::optional<QuantizedMatrix>> quantized;  // per layout slot
  std::vector<MatrixF> dense;                             // empty where quantized

  bool is_quantized(std::size_t slot) const { return quantized[slot].has_value(); }
};

bool is_weight_matrix(const std::string& name);

QuantizedParams quantize_int8(const TransformerParams<float>& params);
TransformerParams<float> dequantize(const QuantizedParams& params);

// Same container as checkpoints; int8 tensors carry a "<name>.scale" companion.
void save_quantized(const std::filesystem::path& path, const QuantizedParams& params);
QuantizedParams load_quantized(const std::filesystem::path& path);

}  // namespace bisync
