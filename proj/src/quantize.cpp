#include <bisync/quantize.hpp>
#include <bisync/tensor_file.hpp>

#include <cmath>
#include <cstring>

#if defined(__AVX512F__) && defined(__AVX512VNNI__)
#include <immintrin.h>
#define BISYNC_VNNI 1
#endif

namespace bisync {

namespace {

constexpr int kBlockRows = 16;

float quantize_activation_row(const float* x, int n, int padded, std::uint8_t* out) {
  float maxabs = 0.0f;
  for (int i = 0; i < n; ++i) maxabs = std::max(maxabs, std::fabs(x[i]));
  const float scale = maxabs > 0.0f ? maxabs / 127.0f : 1.0f;
  const float inv = 1.0f / scale;
  for (int i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(static_cast<int>(std::nearbyint(x[i] * inv)) + 128);
  for (int i = n; i < padded; ++i) out[i] = 128;
  return scale;
}

}  // namespace

QuantizedMatrix quantize_rows(const MatrixF& w) {
  if (!w.allFinite()) throw Error("cannot quantize non-finite weights");
  QuantizedMatrix m;
  m.rows = static_cast<int>(w.rows());
  m.cols = static_cast<int>(w.cols());
  m.q.resize(static_cast<std::size_t>(w.size()));
  m.scales.resize(static_cast<std::size_t>(m.rows));
  for (int r = 0; r < m.rows; ++r) {
    const float maxabs = w.row(r).cwiseAbs().maxCoeff();
    const float scale = maxabs > 0.0f ? maxabs / 127.0f : 1.0f;
    m.scales[static_cast<std::size_t>(r)] = scale;
    // Dividing by the rounded scale can land a hair off .5; multiply by
    // 127/maxabs so exact halves stay exact and round to even.
    const double factor = maxabs > 0.0f ? 127.0 / static_cast<double>(maxabs) : 0.0;
    for (int c = 0; c < m.cols; ++c) {
      const double v = std::nearbyint(static_cast<double>(w(r, c)) * factor);
      m.q[static_cast<std::size_t>(r) * m.cols + c] = static_cast<std::int8_t>(std::clamp(v, -127.0, 127.0));
    }
  }
  m.pack();
  return m;
}

void QuantizedMatrix::pack() {
  padded_cols = (cols + 3) / 4 * 4;
  const int blocks = (rows + kBlockRows - 1) / kBlockRows;
  const int groups = padded_cols / 4;
  packed.assign(static_cast<std::size_t>(blocks) * groups * kBlockRows * 4, 0);
  row_sums.assign(static_cast<std::size_t>(rows), 0);
  for (int r = 0; r < rows; ++r) {
    const int b = r / kBlockRows, lane = r % kBlockRows;
    for (int c = 0; c < cols; ++c) {
      const auto v = q[static_cast<std::size_t>(r) * cols + c];
      row_sums[static_cast<std::size_t>(r)] += v;
      const std::size_t at = ((static_cast<std::size_t>(b) * groups + c / 4) * kBlockRows + lane) * 4 + c % 4;
      packed[at] = v;
    }
  }
}

MatrixF QuantizedMatrix::dequantize() const {
  MatrixF w(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      w(r, c) = static_cast<float>(q[static_cast<std::size_t>(r) * cols + c]) * scales[static_cast<std::size_t>(r)];
  return w;
}

bool int8_kernel_is_vectorized() {
#ifdef BISYNC_VNNI
  return true;
#else
  return false;
#endif
}

void int8_matmul(const MatrixF& x, const QuantizedMatrix& w, const float* bias, MatrixF& y) {
  if (x.cols() != w.cols) throw Error("int8_matmul: shape mismatch");
  const int n = static_cast<int>(x.rows());
  y.resize(n, w.rows);
  std::vector<std::uint8_t> xq(static_cast<std::size_t>(w.padded_cols));
  const int groups = w.padded_cols / 4;
  const int blocks = (w.rows + kBlockRows - 1) / kBlockRows;
  for (int r = 0; r < n; ++r) {
    const float sx = quantize_activation_row(x.row(r).data(), w.cols, w.padded_cols, xq.data());
    float* out = y.row(r).data();
#ifdef BISYNC_VNNI
    const auto* xw = reinterpret_cast<const std::int32_t*>(xq.data());
    const __m512 vsx = _mm512_set1_ps(sx);
    const __m512i v128 = _mm512_set1_epi32(128);
    for (int b = 0; b < blocks; ++b) {
      const auto* wb = w.packed.data() + static_cast<std::size_t>(b) * groups * kBlockRows * 4;
      __m512i acc0 = _mm512_setzero_si512(), acc1 = _mm512_setzero_si512();
      int g = 0;
      for (; g + 1 < groups; g += 2) {
        acc0 = _mm512_dpbusd_epi32(acc0, _mm512_set1_epi32(xw[g]), _mm512_loadu_si512(wb + g * 64));
        acc1 = _mm512_dpbusd_epi32(acc1, _mm512_set1_epi32(xw[g + 1]), _mm512_loadu_si512(wb + (g + 1) * 64));
      }
      if (g < groups) acc0 = _mm512_dpbusd_epi32(acc0, _mm512_set1_epi32(xw[g]), _mm512_loadu_si512(wb + g * 64));
      const int row0 = b * kBlockRows;
      const int live = std::min(kBlockRows, w.rows - row0);
      const __mmask16 mask = static_cast<__mmask16>((1u << live) - 1u);
      const __m512i sums = _mm512_maskz_loadu_epi32(mask, w.row_sums.data() + row0);
      const __m512i acc = _mm512_sub_epi32(_mm512_add_epi32(acc0, acc1), _mm512_mullo_epi32(sums, v128));
      __m512 res = _mm512_mul_ps(_mm512_mul_ps(_mm512_cvtepi32_ps(acc), vsx),
                                 _mm512_maskz_loadu_ps(mask, w.scales.data() + row0));
      if (bias) res = _mm512_add_ps(res, _mm512_maskz_loadu_ps(mask, bias + row0));
      _mm512_mask_storeu_ps(out + row0, mask, res);
    }
#else
    (void)groups;
    (void)blocks;
    for (int o = 0; o < w.rows; ++o) {
      const std::int8_t* wr = w.q.data() + static_cast<std::size_t>(o) * w.cols;
      std::int32_t acc = 0;
      for (int c = 0; c < w.cols; ++c) acc += (static_cast<std::int32_t>(xq[c]) - 128) * wr[c];
      out[o] = static_cast<float>(acc) * sx * w.scales[static_cast<std::size_t>(o)] + (bias ? bias[o] : 0.0f);
    }
#endif
  }
}

bool is_weight_matrix(const std::string& name) {
  return name == "embedding" || (name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0);
}

QuantizedParams quantize_int8(const TransformerParams<float>& params) {
  QuantizedParams out;
  out.config = params.config;
  out.layout = params.layout;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    if (is_weight_matrix(params.layout.names[i])) {
      out.quantized.emplace_back(quantize_rows(params.tensors[i]));
      out.dense.emplace_back();
    } else {
      if (!params.tensors[i].allFinite()) throw Error("cannot quantize non-finite weights");
      out.quantized.emplace_back(std::nullopt);
      out.dense.push_back(params.tensors[i]);
    }
  }
  return out;
}

TransformerParams<float> dequantize(const QuantizedParams& params) {
  TransformerParams<float> out(params.config);
  for (std::size_t i = 0; i < out.tensors.size(); ++i)
    out.tensors[i] = params.quantized[i] ? params.quantized[i]->dequantize() : params.dense[i];
  return out;
}

void save_quantized(const std::filesystem::path& path, const QuantizedParams& params) {
  std::vector<TensorBlob> blobs;
  for (std::size_t i = 0; i < params.layout.names.size(); ++i) {
    const auto& name = params.layout.names[i];
    if (params.quantized[i]) {
      const auto& q = *params.quantized[i];
      TensorBlob w{name, "int8", q.rows, q.cols, {}};
      w.bytes.resize(q.q.size());
      std::memcpy(w.bytes.data(), q.q.data(), q.q.size());
      TensorBlob s{name + ".scale", "float32", 1, q.rows, {}};
      s.bytes.resize(q.scales.size() * sizeof(float));
      std::memcpy(s.bytes.data(), q.scales.data(), s.bytes.size());
      blobs.push_back(std::move(w));
      blobs.push_back(std::move(s));
    } else {
      const auto& m = params.dense[i];
      TensorBlob b{name, "float32", static_cast<int>(m.rows()), static_cast<int>(m.cols()), {}};
      b.bytes.resize(static_cast<std::size_t>(m.size()) * sizeof(float));
      std::memcpy(b.bytes.data(), m.data(), b.bytes.size());
      blobs.push_back(std::move(b));
    }
  }
  write_tensor_file(path, {{"kind", "quantized"}, {"config", params.config.to_json()}}, blobs);
}

QuantizedParams load_quantized(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  if (file.header.value("kind", "") != "quantized") throw Error("'" + path.string() + "' is not a quantized model");
  QuantizedParams out;
  out.config = ModelConfig::from_json(file.header.at("config"));
  out.config.validate();
  out.layout = ParamLayout(out.config);
  for (std::size_t i = 0; i < out.layout.names.size(); ++i) {
    const auto& name = out.layout.names[i];
    const auto [rows, cols] = out.layout.shapes[i];
    const auto& blob = file.find(name);
    if (blob.rows != rows || blob.cols != cols) throw Error("quantized tensor '" + name + "' has the wrong shape");
    if (blob.dtype == "int8") {
      const auto& sblob = file.find(name + ".scale");
      if (sblob.dtype != "float32" || sblob.cols != rows) throw Error("bad scale tensor for '" + name + "'");
      QuantizedMatrix q;
      q.rows = rows;
      q.cols = cols;
      q.q.resize(blob.bytes.size());
      std::memcpy(q.q.data(), blob.bytes.data(), blob.bytes.size());
      q.scales.resize(static_cast<std::size_t>(rows));
      std::memcpy(q.scales.data(), sblob.bytes.data(), sblob.bytes.size());
      q.pack();
      out.quantized.emplace_back(std::move(q));
      out.dense.emplace_back();
    } else {
      MatrixF m(rows, cols);
      std::memcpy(m.data(), blob.bytes.data(), blob.bytes.size());
      out.quantized.emplace_back(std::nullopt);
      out.dense.push_back(std::move(m));
    }
  }
  return out;
}

}  // namespace bisync
