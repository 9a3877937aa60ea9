#include <bisync/model.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace bisync {

// ---------------------------------------------------------------------------
// Configuration and layout

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) throw Error("model dimensions must be positive");
  if (d_model % n_heads != 0) throw Error("d_model must be divisible by n_heads");
  if (vocab_size <= 0) throw Error("vocab_size must be positive");
  if (max_positions <= 1) throw Error("max_positions must be > 1");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},   {"n_layers", n_layers},           {"n_heads", n_heads},
          {"d_ff", d_ff},         {"dropout", dropout},             {"vocab_size", vocab_size},
          {"max_positions", max_positions}, {"tied_embeddings", tied_embeddings}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.d_ff = j.at("d_ff");
  c.dropout = j.at("dropout");
  c.vocab_size = j.at("vocab_size");
  c.max_positions = j.at("max_positions");
  c.tied_embeddings = j.at("tied_embeddings");
  return c;
}

ParamLayout::ParamLayout(const ModelConfig& cfg) {
  const int d = cfg.d_model;
  const auto add = [&](const std::string& name, int rows, int cols) {
    names.push_back(name);
    shapes.emplace_back(rows, cols);
    return names.size() - 1;
  };
  const auto linear = [&](const std::string& name, int out, int in) {
    LinearSlots s;
    s.weight = add(name + ".weight", out, in);
    s.bias = add(name + ".bias", 1, out);
    return s;
  };
  const auto norm = [&](const std::string& name) {
    NormSlots s;
    s.gamma = add(name + ".gamma", 1, d);
    s.beta = add(name + ".beta", 1, d);
    return s;
  };
  const auto attention = [&](const std::string& name) {
    return AttentionSlots{linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
                          linear(name + ".out", d, d)};
  };

  embedding = add("embedding", cfg.vocab_size, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l) + ".";
    EncoderLayerSlots s;
    s.self_norm = norm(p + "self_attn_norm");
    s.self_attn = attention(p + "self_attn");
    s.ff_norm = norm(p + "ff_norm");
    s.ff1 = linear(p + "ff1", cfg.d_ff, d);
    s.ff2 = linear(p + "ff2", d, cfg.d_ff);
    encoder.push_back(s);
  }
  encoder_norm = norm("encoder.norm");
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l) + ".";
    DecoderLayerSlots s;
    s.self_norm = norm(p + "self_attn_norm");
    s.self_attn = attention(p + "self_attn");
    s.cross_norm = norm(p + "cross_attn_norm");
    s.cross_attn = attention(p + "cross_attn");
    s.ff_norm = norm(p + "ff_norm");
    s.ff1 = linear(p + "ff1", cfg.d_ff, d);
    s.ff2 = linear(p + "ff2", d, cfg.d_ff);
    decoder.push_back(s);
  }
  decoder_norm = norm("decoder.norm");
  output_weight = cfg.tied_embeddings ? embedding : add("output.weight", cfg.vocab_size, d);
  output_bias = add("output.bias", 1, cfg.vocab_size);
}

std::size_t ParamLayout::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw Error("no parameter named '" + std::string(name) + "'");
}

template <typename T>
TransformerParams<T>::TransformerParams(const ModelConfig& cfg) : config(cfg), layout(cfg) {
  cfg.validate();
  tensors.reserve(layout.names.size());
  for (const auto& [r, c] : layout.shapes) tensors.push_back(Matrix<T>::Zero(r, c));
}

template <typename T>
TransformerParams<T> TransformerParams<T>::random(const ModelConfig& cfg, std::uint64_t seed) {
  TransformerParams p(cfg);
  Rng rng(seed);
  const auto uniform = [&](double limit) { return static_cast<T>((2.0 * uniform01(rng) - 1.0) * limit); };
  const auto normal = [&](double stddev) {
    const double u1 = std::max(uniform01(rng), 1e-300), u2 = uniform01(rng);
    return static_cast<T>(stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
  };
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const auto& name = p.layout.names[i];
    auto& t = p.tensors[i];
    const auto ends_with = [&](std::string_view s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (i == p.layout.embedding || name == "output.weight") {
      const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = normal(sd);
    } else if (ends_with(".weight")) {
      const double limit = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = uniform(limit);
    } else if (ends_with(".gamma")) {
      t.setOnes();
    }
  }
  return p;
}

template <typename T>
std::size_t TransformerParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

template <typename T>
bool TransformerParams<T>::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Matrix<T>& t) { return t.allFinite(); });
}

template struct TransformerParams<float>;
template struct TransformerParams<double>;

// ---------------------------------------------------------------------------
// Batching

Batch make_batch(std::span<const EncodedExample* const> examples) {
  if (examples.empty()) throw Error("empty batch");
  Batch b;
  b.size = static_cast<int>(examples.size());
  for (const auto* ex : examples) {
    b.src_len = std::max(b.src_len, static_cast<int>(ex->source_ids.size()));
    b.tgt_len = std::max(b.tgt_len, static_cast<int>(ex->target_ids.size()) + 1);
  }
  b.src.assign(static_cast<std::size_t>(b.size * b.src_len), kPad);
  b.tgt_in.assign(static_cast<std::size_t>(b.size * b.tgt_len), kPad);
  b.tgt_out.assign(static_cast<std::size_t>(b.size * b.tgt_len), kPad);
  for (int i = 0; i < b.size; ++i) {
    const auto& ex = *examples[static_cast<std::size_t>(i)];
    if (ex.source_ids.empty()) throw Error("example with empty source");
    std::copy(ex.source_ids.begin(), ex.source_ids.end(), b.src.begin() + i * b.src_len);
    const auto off = static_cast<std::size_t>(i * b.tgt_len);
    b.tgt_in[off] = kBos;
    for (std::size_t t = 0; t < ex.target_ids.size(); ++t) {
      b.tgt_in[off + t + 1] = ex.target_ids[t];
      b.tgt_out[off + t] = ex.target_ids[t];
    }
    b.tgt_out[off + ex.target_ids.size()] = kEos;
    b.src_lengths.push_back(static_cast<int>(ex.source_ids.size()));
    b.tgt_lengths.push_back(static_cast<int>(ex.target_ids.size()) + 1);
    b.target_tokens += ex.target_ids.size() + 1;
  }
  return b;
}

template <typename T>
Matrix<T> positional_encoding(int max_positions, int d_model) {
  Matrix<T> pe(max_positions, d_model);
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
      pe(pos, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < d_model) pe(pos, i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Layers with explicit backward passes

namespace {

template <typename T>
using Column = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kNormEps = 1e-6;

template <typename T>
struct NormCache {
  Matrix<T> xhat;
  Column<T> inv_std;
};

template <typename T>
void norm_forward(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta, Matrix<T>& y,
                  NormCache<T>& cache) {
  const Column<T> mean = x.rowwise().mean();
  Matrix<T> centered = x.colwise() - mean;
  const Column<T> var = centered.array().square().rowwise().mean();
  cache.inv_std = (var.array() + static_cast<T>(kNormEps)).rsqrt();
  cache.xhat = centered.array().colwise() * cache.inv_std.array();
  y = (cache.xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
}

template <typename T>
Matrix<T> norm_backward(const Matrix<T>& dy, const Matrix<T>& gamma, const NormCache<T>& cache, Matrix<T>& dgamma,
                        Matrix<T>& dbeta) {
  const Matrix<T> dxhat = dy.array().rowwise() * gamma.row(0).array();
  dgamma.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbeta.row(0) += dy.colwise().sum();
  const Column<T> m1 = dxhat.rowwise().mean();
  const Column<T> m2 = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  Matrix<T> dx = (dxhat.colwise() - m1) - (cache.xhat.array().colwise() * m2.array()).matrix();
  return dx.array().colwise() * cache.inv_std.array();
}

template <typename T>
void linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b, Matrix<T>& y) {
  y.noalias() = x * w.transpose();
  y.rowwise() += b.row(0);
}

template <typename T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& dy, Matrix<T>& dw, Matrix<T>& db,
                     Matrix<T>* dx) {
  dw.noalias() += dy.transpose() * x;
  db.row(0) += dy.colwise().sum();
  if (dx) dx->noalias() = dy * w;
}

struct AttentionShape {
  int batch = 0;
  int q_len = 0;
  int k_len = 0;
  int heads = 0;
  bool causal = false;
  const std::vector<int>* key_lengths = nullptr;
};

template <typename T>
struct AttentionCache {
  Matrix<T> xq;   // query input
  Matrix<T> xkv;  // key/value input; empty for self-attention
  Matrix<T> q, k, v, ctx;
  std::vector<Matrix<T>> probs;  // per (batch, head)
};

template <typename T>
void attention_forward(const TransformerParams<T>& P, const AttentionSlots& s, const Matrix<T>& xq,
                       const Matrix<T>* xkv, const AttentionShape& shape, Matrix<T>& out, AttentionCache<T>& c) {
  const auto& W = P.tensors;
  const bool self = xkv == nullptr;
  const Matrix<T>& kv_in = self ? xq : *xkv;
  const int d = static_cast<int>(xq.cols());
  const int dk = d / shape.heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
  c.xq = xq;
  if (!self) c.xkv = *xkv;
  linear_forward(xq, W[s.q.weight], W[s.q.bias], c.q);
  linear_forward(kv_in, W[s.k.weight], W[s.k.bias], c.k);
  linear_forward(kv_in, W[s.v.weight], W[s.v.bias], c.v);
  c.ctx.resize(xq.rows(), d);
  c.probs.resize(static_cast<std::size_t>(shape.batch * shape.heads));
  for (int b = 0; b < shape.batch; ++b) {
    const int key_len = (*shape.key_lengths)[static_cast<std::size_t>(b)];
    for (int h = 0; h < shape.heads; ++h) {
      auto qb = c.q.block(b * shape.q_len, h * dk, shape.q_len, dk);
      auto kb = c.k.block(b * shape.k_len, h * dk, shape.k_len, dk);
      auto vb = c.v.block(b * shape.k_len, h * dk, shape.k_len, dk);
      Matrix<T>& p = c.probs[static_cast<std::size_t>(b * shape.heads + h)];
      p.noalias() = (qb * kb.transpose()) * scale;
      for (int i = 0; i < shape.q_len; ++i) {
        const int limit = shape.causal ? std::min(key_len, i + 1) : key_len;
        auto row = p.row(i);
        const T mx = row.head(limit).maxCoeff();
        T sum = 0;
        for (int j = 0; j < limit; ++j) {
          row(j) = std::exp(row(j) - mx);
          sum += row(j);
        }
        row.head(limit) /= sum;
        for (int j = limit; j < shape.k_len; ++j) row(j) = 0;
      }
      c.ctx.block(b * shape.q_len, h * dk, shape.q_len, dk).noalias() = p * vb;
    }
  }
  linear_forward(c.ctx, W[s.out.weight], W[s.out.bias], out);
}

// Returns d(query input); for cross-attention adds d(key/value input) to *dkv.
template <typename T>
Matrix<T> attention_backward(const TransformerParams<T>& P, TransformerParams<T>& G, const AttentionSlots& s,
                             const AttentionShape& shape, const AttentionCache<T>& c, const Matrix<T>& dout,
                             Matrix<T>* dkv) {
  const auto& W = P.tensors;
  auto& dW = G.tensors;
  const bool self = c.xkv.size() == 0;
  const Matrix<T>& kv_in = self ? c.xq : c.xkv;
  const int d = static_cast<int>(c.q.cols());
  const int dk = d / shape.heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  Matrix<T> dctx;
  linear_backward(c.ctx, W[s.out.weight], dout, dW[s.out.weight], dW[s.out.bias], &dctx);
  Matrix<T> dq = Matrix<T>::Zero(c.q.rows(), d);
  Matrix<T> dk_ = Matrix<T>::Zero(c.k.rows(), d);
  Matrix<T> dv = Matrix<T>::Zero(c.v.rows(), d);
  for (int b = 0; b < shape.batch; ++b) {
    for (int h = 0; h < shape.heads; ++h) {
      const Matrix<T>& p = c.probs[static_cast<std::size_t>(b * shape.heads + h)];
      auto qb = c.q.block(b * shape.q_len, h * dk, shape.q_len, dk);
      auto kb = c.k.block(b * shape.k_len, h * dk, shape.k_len, dk);
      auto vb = c.v.block(b * shape.k_len, h * dk, shape.k_len, dk);
      auto dcb = dctx.block(b * shape.q_len, h * dk, shape.q_len, dk);
      dv.block(b * shape.k_len, h * dk, shape.k_len, dk).noalias() += p.transpose() * dcb;
      Matrix<T> dp = dcb * vb.transpose();
      const Column<T> rowdot = (dp.array() * p.array()).rowwise().sum();
      Matrix<T> ds = p.array() * (dp.colwise() - rowdot).array();
      ds *= scale;
      dq.block(b * shape.q_len, h * dk, shape.q_len, dk).noalias() += ds * kb;
      dk_.block(b * shape.k_len, h * dk, shape.k_len, dk).noalias() += ds.transpose() * qb;
    }
  }
  Matrix<T> dxq, tmp;
  linear_backward(c.xq, W[s.q.weight], dq, dW[s.q.weight], dW[s.q.bias], &dxq);
  linear_backward(kv_in, W[s.k.weight], dk_, dW[s.k.weight], dW[s.k.bias], &tmp);
  Matrix<T> dkv_local = tmp;
  linear_backward(kv_in, W[s.v.weight], dv, dW[s.v.weight], dW[s.v.bias], &tmp);
  dkv_local += tmp;
  if (self) {
    dxq += dkv_local;
  } else {
    *dkv += dkv_local;
  }
  return dxq;
}

template <typename T>
struct FeedForwardCache {
  Matrix<T> x;
  Matrix<T> hidden;  // post-ReLU
};

template <typename T>
void feed_forward(const TransformerParams<T>& P, const LinearSlots& l1, const LinearSlots& l2, const Matrix<T>& x,
                  Matrix<T>& out, FeedForwardCache<T>& c) {
  c.x = x;
  linear_forward(x, P.tensors[l1.weight], P.tensors[l1.bias], c.hidden);
  c.hidden = c.hidden.cwiseMax(static_cast<T>(0));
  linear_forward(c.hidden, P.tensors[l2.weight], P.tensors[l2.bias], out);
}

template <typename T>
Matrix<T> feed_forward_backward(const TransformerParams<T>& P, TransformerParams<T>& G, const LinearSlots& l1,
                                const LinearSlots& l2, const FeedForwardCache<T>& c, const Matrix<T>& dout) {
  Matrix<T> dh, dx;
  linear_backward(c.hidden, P.tensors[l2.weight], dout, G.tensors[l2.weight], G.tensors[l2.bias], &dh);
  dh = (c.hidden.array() > static_cast<T>(0)).select(dh, static_cast<T>(0));
  linear_backward(c.x, P.tensors[l1.weight], dh, G.tensors[l1.weight], G.tensors[l1.bias], &dx);
  return dx;
}

template <typename T>
void dropout_forward(Matrix<T>& x, double p, Rng* rng, Matrix<T>& mask) {
  if (!rng || p <= 0.0) {
    mask.resize(0, 0);
    return;
  }
  mask.resize(x.rows(), x.cols());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = bernoulli(*rng, p) ? T(0) : keep;
  x.array() *= mask.array();
}

template <typename T>
void dropout_backward(Matrix<T>& dx, const Matrix<T>& mask) {
  if (mask.size()) dx.array() *= mask.array();
}

template <typename T>
struct EncoderLayerCache {
  NormCache<T> n1, n2;
  AttentionCache<T> attn;
  FeedForwardCache<T> ff;
  Matrix<T> drop_attn, drop_ff;
};

template <typename T>
struct DecoderLayerCache {
  NormCache<T> n1, n2, n3;
  AttentionCache<T> self_attn, cross_attn;
  FeedForwardCache<T> ff;
  Matrix<T> drop_self, drop_cross, drop_ff;
};

// Runs the model on a batch; optionally computes the loss gradient.
template <typename T>
T run_batch(const TransformerParams<T>& P, const Batch& batch, double label_smoothing, TransformerParams<T>* grads,
            Rng* rng, Matrix<T>* log_probs_out) {
  const ModelConfig& cfg = P.config;
  const ParamLayout& L = P.layout;
  const int d = cfg.d_model;
  const int B = batch.size, Ts = batch.src_len, Tt = batch.tgt_len;
  if (Ts > cfg.max_positions || Tt > cfg.max_positions) throw Error("sequence exceeds max positions");
  const double p_drop = rng ? cfg.dropout : 0.0;
  const T emb_scale = static_cast<T>(std::sqrt(static_cast<double>(d)));
  const Matrix<T> pe = positional_encoding<T>(std::max(Ts, Tt), d);
  const Matrix<T>& E = P.embedding();

  // Encoder.
  Matrix<T> x(B * Ts, d);
  for (int r = 0; r < B * Ts; ++r) x.row(r) = E.row(batch.src[static_cast<std::size_t>(r)]) * emb_scale + pe.row(r % Ts);
  Matrix<T> drop_src;
  dropout_forward(x, p_drop, rng, drop_src);
  AttentionShape enc_shape{B, Ts, Ts, cfg.n_heads, false, &batch.src_lengths};
  std::vector<EncoderLayerCache<T>> enc(L.encoder.size());
  Matrix<T> h, branch;
  for (std::size_t l = 0; l < L.encoder.size(); ++l) {
    const auto& s = L.encoder[l];
    auto& c = enc[l];
    norm_forward(x, P.tensors[s.self_norm.gamma], P.tensors[s.self_norm.beta], h, c.n1);
    attention_forward(P, s.self_attn, h, static_cast<const Matrix<T>*>(nullptr), enc_shape, branch, c.attn);
    dropout_forward(branch, p_drop, rng, c.drop_attn);
    x += branch;
    norm_forward(x, P.tensors[s.ff_norm.gamma], P.tensors[s.ff_norm.beta], h, c.n2);
    feed_forward(P, s.ff1, s.ff2, h, branch, c.ff);
    dropout_forward(branch, p_drop, rng, c.drop_ff);
    x += branch;
  }
  NormCache<T> enc_norm;
  Matrix<T> memory;
  norm_forward(x, P.tensors[L.encoder_norm.gamma], P.tensors[L.encoder_norm.beta], memory, enc_norm);

  // Decoder.
  std::vector<int> tgt_key_lengths(static_cast<std::size_t>(B), Tt);
  AttentionShape self_shape{B, Tt, Tt, cfg.n_heads, true, &tgt_key_lengths};
  AttentionShape cross_shape{B, Tt, Ts, cfg.n_heads, false, &batch.src_lengths};
  Matrix<T> y(B * Tt, d);
  for (int r = 0; r < B * Tt; ++r)
    y.row(r) = E.row(batch.tgt_in[static_cast<std::size_t>(r)]) * emb_scale + pe.row(r % Tt);
  Matrix<T> drop_tgt;
  dropout_forward(y, p_drop, rng, drop_tgt);
  std::vector<DecoderLayerCache<T>> dec(L.decoder.size());
  for (std::size_t l = 0; l < L.decoder.size(); ++l) {
    const auto& s = L.decoder[l];
    auto& c = dec[l];
    norm_forward(y, P.tensors[s.self_norm.gamma], P.tensors[s.self_norm.beta], h, c.n1);
    attention_forward(P, s.self_attn, h, static_cast<const Matrix<T>*>(nullptr), self_shape, branch, c.self_attn);
    dropout_forward(branch, p_drop, rng, c.drop_self);
    y += branch;
    norm_forward(y, P.tensors[s.cross_norm.gamma], P.tensors[s.cross_norm.beta], h, c.n2);
    attention_forward(P, s.cross_attn, h, &memory, cross_shape, branch, c.cross_attn);
    dropout_forward(branch, p_drop, rng, c.drop_cross);
    y += branch;
    norm_forward(y, P.tensors[s.ff_norm.gamma], P.tensors[s.ff_norm.beta], h, c.n3);
    feed_forward(P, s.ff1, s.ff2, h, branch, c.ff);
    dropout_forward(branch, p_drop, rng, c.drop_ff);
    y += branch;
  }
  NormCache<T> dec_norm;
  Matrix<T> z;
  norm_forward(y, P.tensors[L.decoder_norm.gamma], P.tensors[L.decoder_norm.beta], z, dec_norm);

  // Output distribution.
  const Matrix<T>& Wout = P.output_projection();
  Matrix<T> logits;
  linear_forward(z, Wout, P.tensors[L.output_bias], logits);
  const Column<T> mx = logits.rowwise().maxCoeff();
  logits.colwise() -= mx;
  const Column<T> lse = logits.array().exp().rowwise().sum().log();
  logits.colwise() -= lse;  // now log-probabilities

  const T loss = smoothed_loss<T>(logits, batch.tgt_out, label_smoothing);
  if (log_probs_out) *log_probs_out = logits;
  if (!grads) return loss;

  // Backward.
  TransformerParams<T>& G = *grads;
  const auto V = static_cast<int>(logits.cols());
  const double eps = label_smoothing;
  const T off = static_cast<T>(V > 1 ? eps / (V - 1) : 0.0);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(batch.target_tokens));
  Matrix<T> dlogits = logits.array().exp();
  for (int r = 0; r < B * Tt; ++r) {
    const TokenId gold = batch.tgt_out[static_cast<std::size_t>(r)];
    if (gold == kPad) {
      dlogits.row(r).setZero();
      continue;
    }
    dlogits.row(r).array() -= off;
    dlogits(r, gold) -= static_cast<T>(1.0 - eps) - off;
    dlogits.row(r) *= inv_n;
  }
  Matrix<T> dz;
  linear_backward(z, Wout, dlogits, G.tensors[L.output_weight], G.tensors[L.output_bias], &dz);
  Matrix<T> dy = norm_backward(dz, P.tensors[L.decoder_norm.gamma], dec_norm, G.tensors[L.decoder_norm.gamma],
                               G.tensors[L.decoder_norm.beta]);
  Matrix<T> dmemory = Matrix<T>::Zero(B * Ts, d);
  Matrix<T> g;
  for (std::size_t l = L.decoder.size(); l-- > 0;) {
    const auto& s = L.decoder[l];
    auto& c = dec[l];
    g = dy;
    dropout_backward(g, c.drop_ff);
    g = feed_forward_backward(P, G, s.ff1, s.ff2, c.ff, g);
    dy += norm_backward(g, P.tensors[s.ff_norm.gamma], c.n3, G.tensors[s.ff_norm.gamma], G.tensors[s.ff_norm.beta]);
    g = dy;
    dropout_backward(g, c.drop_cross);
    g = attention_backward(P, G, s.cross_attn, cross_shape, c.cross_attn, g, &dmemory);
    dy += norm_backward(g, P.tensors[s.cross_norm.gamma], c.n2, G.tensors[s.cross_norm.gamma],
                        G.tensors[s.cross_norm.beta]);
    g = dy;
    dropout_backward(g, c.drop_self);
    g = attention_backward(P, G, s.self_attn, self_shape, c.self_attn, g, static_cast<Matrix<T>*>(nullptr));
    dy += norm_backward(g, P.tensors[s.self_norm.gamma], c.n1, G.tensors[s.self_norm.gamma],
                        G.tensors[s.self_norm.beta]);
  }
  dropout_backward(dy, drop_tgt);
  Matrix<T>& dE = G.embedding();
  for (int r = 0; r < B * Tt; ++r) dE.row(batch.tgt_in[static_cast<std::size_t>(r)]) += dy.row(r) * emb_scale;

  Matrix<T> dx = norm_backward(dmemory, P.tensors[L.encoder_norm.gamma], enc_norm, G.tensors[L.encoder_norm.gamma],
                               G.tensors[L.encoder_norm.beta]);
  for (std::size_t l = L.encoder.size(); l-- > 0;) {
    const auto& s = L.encoder[l];
    auto& c = enc[l];
    g = dx;
    dropout_backward(g, c.drop_ff);
    g = feed_forward_backward(P, G, s.ff1, s.ff2, c.ff, g);
    dx += norm_backward(g, P.tensors[s.ff_norm.gamma], c.n2, G.tensors[s.ff_norm.gamma], G.tensors[s.ff_norm.beta]);
    g = dx;
    dropout_backward(g, c.drop_attn);
    g = attention_backward(P, G, s.self_attn, enc_shape, c.attn, g, static_cast<Matrix<T>*>(nullptr));
    dx += norm_backward(g, P.tensors[s.self_norm.gamma], c.n1, G.tensors[s.self_norm.gamma],
                        G.tensors[s.self_norm.beta]);
  }
  dropout_backward(dx, drop_src);
  for (int r = 0; r < B * Ts; ++r) dE.row(batch.src[static_cast<std::size_t>(r)]) += dx.row(r) * emb_scale;
  return loss;
}

}  // namespace

template <typename T>
T smoothed_loss(const Matrix<T>& log_probs, std::span<const TokenId> target_ids, double label_smoothing) {
  if (static_cast<std::size_t>(log_probs.rows()) != target_ids.size()) throw Error("loss: shape mismatch");
  const auto V = log_probs.cols();
  const double eps = label_smoothing;
  const double off = V > 1 ? eps / static_cast<double>(V - 1) : 0.0;
  double total = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < target_ids.size(); ++r) {
    const TokenId gold = target_ids[r];
    if (gold == kPad) continue;
    const auto row = log_probs.row(static_cast<Eigen::Index>(r));
    const double lp_gold = static_cast<double>(row(gold));
    double lp_others = static_cast<double>(row.sum()) - lp_gold;
    // 0 * log 0 is 0 when the smoothing mass is zero.
    const double other_term = off > 0.0 ? off * lp_others : 0.0;
    total -= (1.0 - eps) * lp_gold + other_term;
    ++n;
  }
  if (n == 0) throw Error("loss: all target positions are padding");
  return static_cast<T>(total / static_cast<double>(n));
}

template <typename T>
T forward_backward(const TransformerParams<T>& params, const Batch& batch, double label_smoothing,
                   TransformerParams<T>* grads, Rng* dropout_rng) {
  return run_batch<T>(params, batch, label_smoothing, grads, dropout_rng, nullptr);
}

template <typename T>
Matrix<T> batch_log_probs(const TransformerParams<T>& params, const Batch& batch) {
  Matrix<T> out;
  Batch b = batch;
  // Score every position, including padded ones.
  std::replace(b.tgt_out.begin(), b.tgt_out.end(), static_cast<TokenId>(kPad), static_cast<TokenId>(kEos));
  b.target_tokens = b.tgt_out.size();
  run_batch<T>(params, b, 0.0, nullptr, nullptr, &out);
  return out;
}

template <typename T>
Matrix<T> forward(const TransformerParams<T>& params, std::span<const TokenId> source_ids,
                  std::span<const TokenId> target_prefix_ids) {
  if (source_ids.empty() || target_prefix_ids.empty()) throw Error("forward: empty sequence");
  const int max_pos = params.config.max_positions;
  if (static_cast<int>(source_ids.size()) > max_pos || static_cast<int>(target_prefix_ids.size()) > max_pos)
    throw Error("sequence exceeds max positions");
  Batch b;
  b.size = 1;
  b.src_len = static_cast<int>(source_ids.size());
  b.tgt_len = static_cast<int>(target_prefix_ids.size());
  b.src.assign(source_ids.begin(), source_ids.end());
  b.tgt_in.assign(target_prefix_ids.begin(), target_prefix_ids.end());
  b.tgt_out.assign(target_prefix_ids.size(), kEos);
  b.src_lengths = {b.src_len};
  b.tgt_lengths = {b.tgt_len};
  b.target_tokens = target_prefix_ids.size();
  Matrix<T> out;
  run_batch<T>(params, b, 0.0, nullptr, nullptr, &out);
  return out;
}

template Matrix<float> positional_encoding<float>(int, int);
template Matrix<double> positional_encoding<double>(int, int);
template float smoothed_loss<float>(const Matrix<float>&, std::span<const TokenId>, double);
template double smoothed_loss<double>(const Matrix<double>&, std::span<const TokenId>, double);
template float forward_backward<float>(const TransformerParams<float>&, const Batch&, double,
                                       TransformerParams<float>*, Rng*);
template double forward_backward<double>(const TransformerParams<double>&, const Batch&, double,
                                         TransformerParams<double>*, Rng*);
template Matrix<float> batch_log_probs<float>(const TransformerParams<float>&, const Batch&);
template Matrix<double> batch_log_probs<double>(const TransformerParams<double>&, const Batch&);
template Matrix<float> forward<float>(const TransformerParams<float>&, std::span<const TokenId>,
                                      std::span<const TokenId>);
template Matrix<double> forward<double>(const TransformerParams<double>&, std::span<const TokenId>,
                                        std::span<const TokenId>);

// ---------------------------------------------------------------------------
// Training

double noam_lr(long step, int d_model, int warmup_steps, double scale) {
  if (step < 1) throw Error("noam_lr: step must be >= 1");
  if (warmup_steps < 1) throw Error("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  return scale * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup_steps), -1.5));
}

void TrainConfig::validate() const {
  if (warmup_steps < 1) throw Error("warmup_steps must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw Error("label_smoothing must be in [0, 1)");
  if (tokens_per_batch < 1) throw Error("tokens_per_batch must be positive");
  if (total_steps < 1 || checkpoint_every < 1 || log_every < 1 || keep_last < 1)
    throw Error("step counts must be positive");
}

nlohmann::json TrainLogEntry::to_json() const {
  return {{"step", step}, {"loss", loss}, {"lr", lr}, {"tokens_per_sec", tokens_per_sec}};
}

namespace {

std::size_t example_cost(const EncodedExample& ex) {
  return std::max(ex.source_ids.size(), ex.target_ids.size() + 1);
}

// Shuffles, sorts windows of examples by length and cuts them into batches
// whose padded size stays within the token budget.
std::vector<std::vector<std::size_t>> bucket_batches(const std::vector<EncodedExample>& data, int tokens_per_batch,
                                                     Rng& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_int(rng, 0, i - 1)]);
  constexpr std::size_t kWindow = 4096;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += kWindow) {
    const auto end = std::min(order.size(), start + kWindow);
    std::stable_sort(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end),
                     [&](std::size_t a, std::size_t b) { return example_cost(data[a]) < example_cost(data[b]); });
    std::vector<std::size_t> current;
    std::size_t longest = 0;
    for (std::size_t i = start; i < end; ++i) {
      const auto cost = example_cost(data[order[i]]);
      const auto next_longest = std::max(longest, cost);
      if (!current.empty() && next_longest * (current.size() + 1) > static_cast<std::size_t>(tokens_per_batch)) {
        batches.push_back(std::move(current));
        current.clear();
        longest = 0;
      }
      current.push_back(order[i]);
      longest = std::max(longest, cost);
    }
    if (!current.empty()) batches.push_back(std::move(current));
  }
  for (std::size_t i = batches.size(); i > 1; --i) std::swap(batches[i - 1], batches[uniform_int(rng, 0, i - 1)]);
  return batches;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const std::vector<EncodedExample>& dataset,
                  const TrainHooks& hooks, const TransformerParams<float>* init) {
  model_cfg.validate();
  cfg.validate();
  if (dataset.empty()) throw Error("training dataset is empty");

  Rng rng(cfg.rng_seed);
  TransformerParams<float> params = init ? *init : TransformerParams<float>::random(model_cfg, derive_seed(cfg.rng_seed, 0));
  if (!(params.config == model_cfg)) throw Error("initial parameters do not match the model config");
  TransformerParams<float> grads = params.zeros_like();
  TransformerParams<float> m = params.zeros_like();
  TransformerParams<float> v = params.zeros_like();

  TrainResult result;
  std::vector<std::vector<std::size_t>> batches;
  std::size_t next_batch = 0;
  double loss_sum = 0;
  std::size_t tokens = 0;
  long interval_steps = 0;
  auto interval_start = std::chrono::steady_clock::now();
  std::vector<const EncodedExample*> members;

  for (long step = 1; step <= cfg.total_steps; ++step) {
    if (next_batch == batches.size()) {
      batches = bucket_batches(dataset, cfg.tokens_per_batch, rng);
      next_batch = 0;
    }
    members.clear();
    for (auto i : batches[next_batch++]) members.push_back(&dataset[i]);
    const Batch batch = make_batch(members);

    for (auto& g : grads.tensors) g.setZero();
    const float loss = forward_backward<float>(params, batch, cfg.label_smoothing, &grads, &rng);
    if (!std::isfinite(loss))
      throw Error("training diverged: non-finite loss at step " + std::to_string(step));

    const double lr = noam_lr(step, model_cfg.d_model, cfg.warmup_steps, cfg.lr_scale);
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    const float step_size = static_cast<float>(lr * std::sqrt(c2) / c1);
    const float eps = static_cast<float>(cfg.adam_eps * std::sqrt(c2));
    for (std::size_t t = 0; t < params.tensors.size(); ++t) {
      auto g = grads.tensors[t].array();
      auto mt = m.tensors[t].array();
      auto vt = v.tensors[t].array();
      mt = static_cast<float>(b1) * mt + static_cast<float>(1.0 - b1) * g;
      vt = static_cast<float>(b2) * vt + static_cast<float>(1.0 - b2) * g.square();
      params.tensors[t].array() -= step_size * mt / (vt.sqrt() + eps);
    }

    loss_sum += loss;
    tokens += batch.target_tokens;
    ++interval_steps;
    if (step % cfg.log_every == 0 || step == cfg.total_steps) {
      const auto now = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(now - interval_start).count();
      TrainLogEntry entry{step, loss_sum / static_cast<double>(interval_steps), lr,
                          secs > 0 ? static_cast<double>(tokens) / secs : 0.0};
      result.log.push_back(entry);
      if (hooks.on_log) hooks.on_log(entry);
      loss_sum = 0;
      tokens = 0;
      interval_steps = 0;
      interval_start = now;
    }
    if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
      if (result.checkpoints.empty() || result.checkpoints.back().step != step) {
        result.checkpoints.push_back({step, params});
        if (hooks.on_checkpoint) hooks.on_checkpoint(result.checkpoints.back());
        if (result.checkpoints.size() > static_cast<std::size_t>(cfg.keep_last))
          result.checkpoints.erase(result.checkpoints.begin());
      }
    }
  }
  return result;
}

TransformerParams<float> average_checkpoints(std::span<const TransformerParams<float>> checkpoints) {
  if (checkpoints.empty()) throw Error("average_checkpoints: no checkpoints");
  const auto& first = checkpoints.front();
  for (const auto& c : checkpoints) {
    if (c.tensors.size() != first.tensors.size()) throw Error("average_checkpoints: shape mismatch");
    for (std::size_t t = 0; t < c.tensors.size(); ++t)
      if (c.tensors[t].rows() != first.tensors[t].rows() || c.tensors[t].cols() != first.tensors[t].cols())
        throw Error("average_checkpoints: shape mismatch");
  }
  TransformerParams<float> out = first.zeros_like();
  // Accumulate in double so the mean does not depend on checkpoint order.
  for (std::size_t t = 0; t < out.tensors.size(); ++t) {
    Matrix<double> acc = Matrix<double>::Zero(first.tensors[t].rows(), first.tensors[t].cols());
    for (const auto& c : checkpoints) acc += c.tensors[t].cast<double>();
    out.tensors[t] = (acc / static_cast<double>(checkpoints.size())).cast<float>();
  }
  return out;
}

}  // namespace bisync
