#include <bisync/decode.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <variant>

namespace bisync {

double BeamHypothesis::normalized_score(double alpha) const {
  const auto len = std::max<std::size_t>(1, token_ids.size() + (finished ? 1 : 0));
  return score / std::pow(static_cast<double>(len), alpha);
}

// ---------------------------------------------------------------------------
// Inference model

namespace {

using RowVectorF = Eigen::Matrix<float, 1, Eigen::Dynamic>;

struct Linear {
  std::variant<MatrixF, QuantizedMatrix> weight;  // [out, in]
  RowVectorF bias;

  void apply(const MatrixF& x, MatrixF& y) const {
    if (const auto* w = std::get_if<MatrixF>(&weight)) {
      y.noalias() = x * w->transpose();
      if (bias.size()) y.rowwise() += bias;
    } else {
      int8_matmul(x, std::get<QuantizedMatrix>(weight), bias.size() ? bias.data() : nullptr, y);
    }
  }
};

struct Norm {
  RowVectorF gamma, beta;

  void apply(const MatrixF& x, MatrixF& y) const {
    y.resize(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const float mean = x.row(r).mean();
      const auto centered = (x.row(r).array() - mean).eval();
      const float inv = 1.0f / std::sqrt(centered.square().mean() + 1e-6f);
      y.row(r) = (centered * inv * gamma.array() + beta.array()).matrix();
    }
  }
};

struct Attention {
  Linear q, k, v, out;
};

struct EncoderLayer {
  Norm self_norm, ff_norm;
  Attention self_attn;
  Linear ff1, ff2;
};

struct DecoderLayer {
  Norm self_norm, cross_norm, ff_norm;
  Attention self_attn, cross_attn;
  Linear ff1, ff2;
};

void softmax_in_place(Eigen::Ref<RowVectorF> row) {
  const float mx = row.maxCoeff();
  row = (row.array() - mx).exp().matrix();
  row /= row.sum();
}

void log_softmax_rows(MatrixF& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const float mx = row.maxCoeff();
    const float lse = mx + std::log((row.array() - mx).exp().sum());
    row.array() -= lse;
  }
}

}  // namespace

struct InferenceModel::Impl {
  ModelConfig config;
  bool quantized = false;
  std::variant<MatrixF, QuantizedMatrix> embedding;  // also the output projection when tied
  std::variant<MatrixF, QuantizedMatrix> output_weight;
  RowVectorF output_bias;
  std::vector<EncoderLayer> encoder;
  Norm encoder_norm;
  std::vector<DecoderLayer> decoder;
  Norm decoder_norm;
  MatrixF positions;
  float emb_scale = 1.0f;

  template <typename Source>
  void build(const ModelConfig& cfg, const ParamLayout& L, Source&& tensor, bool q) {
    config = cfg;
    quantized = q;
    const auto dense = [&](std::size_t slot) -> RowVectorF { return std::get<MatrixF>(tensor(slot)).row(0); };
    const auto linear = [&](const LinearSlots& s) { return Linear{tensor(s.weight), dense(s.bias)}; };
    const auto norm = [&](const NormSlots& s) { return Norm{dense(s.gamma), dense(s.beta)}; };
    const auto attention = [&](const AttentionSlots& s) {
      return Attention{linear(s.q), linear(s.k), linear(s.v), linear(s.out)};
    };
    embedding = tensor(L.embedding);
    if (!cfg.tied_embeddings) output_weight = tensor(L.output_weight);
    output_bias = dense(L.output_bias);
    for (const auto& s : L.encoder)
      encoder.push_back({norm(s.self_norm), norm(s.ff_norm), attention(s.self_attn), linear(s.ff1), linear(s.ff2)});
    encoder_norm = norm(L.encoder_norm);
    for (const auto& s : L.decoder)
      decoder.push_back({norm(s.self_norm), norm(s.cross_norm), norm(s.ff_norm), attention(s.self_attn),
                         attention(s.cross_attn), linear(s.ff1), linear(s.ff2)});
    decoder_norm = norm(L.decoder_norm);
    positions = positional_encoding<float>(cfg.max_positions, cfg.d_model);
    emb_scale = std::sqrt(static_cast<float>(cfg.d_model));
  }

  const std::variant<MatrixF, QuantizedMatrix>& output() const {
    return config.tied_embeddings ? embedding : output_weight;
  }

  // Row i sits at position first_position + i, or at first_position for
  // every row when `same_position` (one decoder step across a beam).
  void embed(std::span<const TokenId> ids, int first_position, bool same_position, MatrixF& x) const {
    const int d = config.d_model;
    x.resize(static_cast<Eigen::Index>(ids.size()), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const TokenId id = ids[i];
      if (id < 0 || id >= config.vocab_size) throw Error("unknown token id");
      const auto r = static_cast<Eigen::Index>(i);
      if (const auto* e = std::get_if<MatrixF>(&embedding)) {
        x.row(r) = e->row(id);
      } else {
        const auto& q = std::get<QuantizedMatrix>(embedding);
        const float s = q.scales[static_cast<std::size_t>(id)];
        const std::int8_t* src = q.q.data() + static_cast<std::size_t>(id) * d;
        for (int c = 0; c < d; ++c) x(r, c) = static_cast<float>(src[c]) * s;
      }
      x.row(r) = x.row(r) * emb_scale + positions.row(first_position + (same_position ? 0 : static_cast<int>(i)));
    }
  }

  void logits(const MatrixF& z, MatrixF& out) const {
    if (const auto* w = std::get_if<MatrixF>(&output())) {
      out.noalias() = z * w->transpose();
      out.rowwise() += output_bias;
    } else {
      int8_matmul(z, std::get<QuantizedMatrix>(output()), output_bias.data(), out);
    }
    log_softmax_rows(out);
  }
};

InferenceModel::InferenceModel(const TransformerParams<float>& params) : impl_(std::make_unique<Impl>()) {
  if (!params.all_finite()) throw Error("model contains non-finite parameters");
  impl_->build(
      params.config, params.layout,
      [&](std::size_t slot) { return std::variant<MatrixF, QuantizedMatrix>(params.tensors[slot]); }, false);
}

InferenceModel::InferenceModel(const QuantizedParams& params) : impl_(std::make_unique<Impl>()) {
  impl_->build(
      params.config, params.layout,
      [&](std::size_t slot) {
        return params.quantized[slot] ? std::variant<MatrixF, QuantizedMatrix>(*params.quantized[slot])
                                      : std::variant<MatrixF, QuantizedMatrix>(params.dense[slot]);
      },
      true);
}

InferenceModel::~InferenceModel() = default;
InferenceModel::InferenceModel(InferenceModel&&) noexcept = default;
InferenceModel& InferenceModel::operator=(InferenceModel&&) noexcept = default;

const ModelConfig& InferenceModel::config() const { return impl_->config; }
bool InferenceModel::quantized() const { return impl_->quantized; }

InferenceModel::Memory InferenceModel::encode(std::span<const TokenId> source_ids) const {
  const auto& m = *impl_;
  const int n = static_cast<int>(source_ids.size());
  if (n == 0) throw Error("empty source");
  if (n > m.config.max_positions) throw Error("sequence exceeds max positions");
  const int d = m.config.d_model, heads = m.config.n_heads, dk = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));

  MatrixF x, h, q, k, v, ctx(n, d), branch, hidden;
  m.embed(source_ids, 0, false, x);
  MatrixF scores(n, n);
  for (const auto& layer : m.encoder) {
    layer.self_norm.apply(x, h);
    layer.self_attn.q.apply(h, q);
    layer.self_attn.k.apply(h, k);
    layer.self_attn.v.apply(h, v);
    for (int hd = 0; hd < heads; ++hd) {
      scores.noalias() = q.middleCols(hd * dk, dk) * k.middleCols(hd * dk, dk).transpose() * scale;
      for (int i = 0; i < n; ++i) softmax_in_place(scores.row(i));
      ctx.middleCols(hd * dk, dk).noalias() = scores * v.middleCols(hd * dk, dk);
    }
    layer.self_attn.out.apply(ctx, branch);
    x += branch;
    layer.ff_norm.apply(x, h);
    layer.ff1.apply(h, hidden);
    hidden = hidden.cwiseMax(0.0f);
    layer.ff2.apply(hidden, branch);
    x += branch;
  }
  MatrixF memory;
  m.encoder_norm.apply(x, memory);

  Memory out;
  out.length = n;
  for (const auto& layer : m.decoder) {
    layer.cross_attn.k.apply(memory, k);
    layer.cross_attn.v.apply(memory, v);
    out.keys.push_back(k);
    out.values.push_back(v);
  }
  return out;
}

InferenceModel::State InferenceModel::start(std::vector<const Memory*> rows, int capacity) const {
  const auto& cfg = impl_->config;
  if (capacity < 1 || capacity > cfg.max_positions) throw Error("sequence exceeds max positions");
  State s;
  s.capacity = capacity;
  s.keys.assign(impl_->decoder.size(), {});
  s.values.assign(impl_->decoder.size(), {});
  for (std::size_t l = 0; l < impl_->decoder.size(); ++l) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      s.keys[l].emplace_back(capacity, cfg.d_model);
      s.values[l].emplace_back(capacity, cfg.d_model);
    }
  }
  s.memory = std::move(rows);
  return s;
}

MatrixF InferenceModel::step(State& state, std::span<const TokenId> tokens) const {
  const auto& m = *impl_;
  const auto rows = static_cast<int>(state.memory.size());
  if (static_cast<int>(tokens.size()) != rows) throw Error("step: one token per row required");
  if (state.length >= state.capacity) throw Error("sequence exceeds max positions");
  const int d = m.config.d_model, heads = m.config.n_heads, dk = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  const int t = state.length;

  MatrixF x, h, q, k, v, ctx(rows, d), branch, hidden;
  m.embed(tokens, t, true, x);
  RowVectorF scores;
  for (std::size_t l = 0; l < m.decoder.size(); ++l) {
    const auto& layer = m.decoder[l];
    layer.self_norm.apply(x, h);
    layer.self_attn.q.apply(h, q);
    layer.self_attn.k.apply(h, k);
    layer.self_attn.v.apply(h, v);
    for (int r = 0; r < rows; ++r) {
      auto& kc = state.keys[l][static_cast<std::size_t>(r)];
      auto& vc = state.values[l][static_cast<std::size_t>(r)];
      kc.row(t) = k.row(r);
      vc.row(t) = v.row(r);
      for (int hd = 0; hd < heads; ++hd) {
        scores.noalias() = q.block(r, hd * dk, 1, dk) * kc.block(0, hd * dk, t + 1, dk).transpose() * scale;
        softmax_in_place(scores);
        ctx.block(r, hd * dk, 1, dk).noalias() = scores * vc.block(0, hd * dk, t + 1, dk);
      }
    }
    layer.self_attn.out.apply(ctx, branch);
    x += branch;

    layer.cross_norm.apply(x, h);
    layer.cross_attn.q.apply(h, q);
    for (int r = 0; r < rows; ++r) {
      const Memory& mem = *state.memory[static_cast<std::size_t>(r)];
      const MatrixF& mk = mem.keys[l];
      const MatrixF& mv = mem.values[l];
      for (int hd = 0; hd < heads; ++hd) {
        scores.noalias() = q.block(r, hd * dk, 1, dk) * mk.middleCols(hd * dk, dk).transpose() * scale;
        softmax_in_place(scores);
        ctx.block(r, hd * dk, 1, dk).noalias() = scores * mv.middleCols(hd * dk, dk);
      }
    }
    layer.cross_attn.out.apply(ctx, branch);
    x += branch;

    layer.ff_norm.apply(x, h);
    layer.ff1.apply(h, hidden);
    hidden = hidden.cwiseMax(0.0f);
    layer.ff2.apply(hidden, branch);
    x += branch;
  }
  m.decoder_norm.apply(x, h);
  MatrixF out;
  m.logits(h, out);
  ++state.length;
  return out;
}

void InferenceModel::reorder(State& state, std::span<const std::size_t> parents) const {
  const auto old_rows = state.memory.size();
  std::vector<int> uses(old_rows, 0);
  for (auto p : parents) {
    if (p >= old_rows) throw Error("reorder: parent out of range");
    ++uses[p];
  }
  const auto remap = [&](std::vector<MatrixF>& mats) {
    std::vector<MatrixF> next(parents.size());
    std::vector<int> left = uses;
    for (std::size_t i = 0; i < parents.size(); ++i) {
      const auto p = parents[i];
      if (--left[p] == 0) {
        next[i] = std::move(mats[p]);
      } else {
        next[i].resize(state.capacity, mats[p].cols());
        next[i].topRows(state.length) = mats[p].topRows(state.length);
      }
    }
    mats = std::move(next);
  };
  for (auto& layer : state.keys) remap(layer);
  for (auto& layer : state.values) remap(layer);
  std::vector<const Memory*> memory;
  for (auto p : parents) memory.push_back(state.memory[p]);
  state.memory = std::move(memory);
}

MatrixF InferenceModel::forward(std::span<const TokenId> source_ids, std::span<const TokenId> target_prefix_ids) const {
  if (target_prefix_ids.empty()) throw Error("forward: empty sequence");
  if (static_cast<int>(target_prefix_ids.size()) > impl_->config.max_positions)
    throw Error("sequence exceeds max positions");
  const Memory mem = encode(source_ids);
  State state = start({&mem}, static_cast<int>(target_prefix_ids.size()));
  MatrixF out(static_cast<Eigen::Index>(target_prefix_ids.size()), impl_->config.vocab_size);
  for (std::size_t t = 0; t < target_prefix_ids.size(); ++t)
    out.row(static_cast<Eigen::Index>(t)) = step(state, target_prefix_ids.subspan(t, 1)).row(0);
  return out;
}

// ---------------------------------------------------------------------------
// Search

namespace {

constexpr float kMasked = -std::numeric_limits<float>::infinity();

int resolve_max_len(const InferenceModel& model, std::size_t source_len, const DecodeOptions& o) {
  const int cap = model.config().max_positions;
  const int len = o.max_len > 0 ? o.max_len : 2 * static_cast<int>(source_len) + 10;
  return std::min(len, cap);
}

void mask_row(Eigen::Ref<RowVectorF> row, int t, const DecodeOptions& o, std::size_t prefix_len) {
  for (TokenId id = 0; id < kNumSpecialTokens && id < row.size(); ++id) {
    if (id == kEos || (id == kGapSep && o.allow_gap_separator)) continue;
    row(id) = kMasked;
  }
  if (t < o.min_length || static_cast<std::size_t>(t) < prefix_len) row(kEos) = kMasked;
}

struct Candidate {
  float score;
  std::size_t hyp;
  TokenId token;
};

bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.hyp != b.hyp) return a.hyp < b.hyp;
  return a.token < b.token;
}

struct SearchState {
  int beam = 1;
  int max_len = 0;
  TokenIds prefix;
  std::vector<BeamHypothesis> active;
  std::vector<BeamHypothesis> finished;
  bool done = false;
};

void check_source(const InferenceModel& model, std::span<const TokenId> source_ids) {
  if (source_ids.empty()) throw Error("empty source");
  if (static_cast<int>(source_ids.size()) > model.config().max_positions)
    throw Error("sequence exceeds max positions");
}

std::vector<std::vector<BeamHypothesis>> run_search(const InferenceModel& model, const std::vector<TokenIds>& sources,
                                                    const std::vector<TokenIds>& prefixes, const DecodeOptions& o,
                                                    int n_best) {
  if (o.beam_size < 1) throw Error("beam_size must be >= 1");
  const std::size_t n = sources.size();
  std::vector<InferenceModel::Memory> memories;
  memories.reserve(n);
  std::vector<SearchState> searches(n);
  int capacity = 1;
  for (std::size_t s = 0; s < n; ++s) {
    check_source(model, sources[s]);
    memories.push_back(model.encode(sources[s]));
    auto& st = searches[s];
    st.beam = o.beam_size;
    st.max_len = resolve_max_len(model, sources[s].size(), o);
    st.prefix = prefixes.empty() ? TokenIds{} : prefixes[s];
    if (st.prefix.size() >= static_cast<std::size_t>(st.max_len)) throw Error("forced prefix exceeds max_len");
    st.active.push_back({});
    capacity = std::max(capacity, st.max_len);
  }
  std::vector<const InferenceModel::Memory*> rows;
  for (auto& m : memories) rows.push_back(&m);
  auto state = model.start(rows, capacity);
  // row_owner[r] = (search, active index)
  std::vector<std::pair<std::size_t, std::size_t>> row_owner;
  for (std::size_t s = 0; s < n; ++s) row_owner.emplace_back(s, 0);

  std::vector<Candidate> cands;
  for (int t = 0;; ++t) {
    TokenIds last;
    for (const auto& [s, a] : row_owner) {
      const auto& toks = searches[s].active[a].token_ids;
      last.push_back(toks.empty() ? static_cast<TokenId>(kBos) : toks.back());
    }
    MatrixF lp = model.step(state, last);

    std::vector<std::size_t> parents;
    std::vector<std::pair<std::size_t, std::size_t>> next_owner;
    std::size_t row_base = 0;
    for (std::size_t s = 0; s < n; ++s) {
      auto& st = searches[s];
      if (st.done) continue;
      const std::size_t n_active = st.active.size();
      const auto k = static_cast<std::size_t>(st.beam);
      cands.clear();
      for (std::size_t a = 0; a < n_active; ++a) {
        auto row = lp.row(static_cast<Eigen::Index>(row_base + a));
        const float base = static_cast<float>(st.active[a].score);
        if (static_cast<std::size_t>(t) < st.prefix.size()) {
          const TokenId forced = st.prefix[static_cast<std::size_t>(t)];
          cands.push_back({base + row(forced), a, forced});
          continue;
        }
        mask_row(row, t, o, st.prefix.size());
        // Per-row top 2k, merged below.
        std::vector<Candidate> local;
        local.reserve(static_cast<std::size_t>(row.size()));
        for (Eigen::Index id = 0; id < row.size(); ++id)
          if (row(id) != kMasked) local.push_back({base + row(id), a, static_cast<TokenId>(id)});
        const auto keep = std::min(local.size(), 2 * k);
        std::partial_sort(local.begin(), local.begin() + static_cast<long>(keep), local.end(), better);
        cands.insert(cands.end(), local.begin(), local.begin() + static_cast<long>(keep));
      }
      std::sort(cands.begin(), cands.end(), better);
      if (cands.size() > 2 * k) cands.resize(2 * k);

      std::vector<BeamHypothesis> next;
      std::vector<std::size_t> next_parents;
      for (std::size_t rank = 0; rank < cands.size(); ++rank) {
        const auto& c = cands[rank];
        const auto& parent = st.active[c.hyp];
        if (c.token == kEos) {
          if (rank < k && st.finished.size() < k) st.finished.push_back({parent.token_ids, c.score, true});
          continue;
        }
        if (next.size() < k) {
          BeamHypothesis h{parent.token_ids, c.score, false};
          h.token_ids.push_back(c.token);
          next.push_back(std::move(h));
          next_parents.push_back(row_base + c.hyp);
        }
      }
      row_base += n_active;
      if (st.finished.size() >= k || next.empty() || t + 1 >= st.max_len) {
        st.done = true;
        // Truncated hypotheses are kept, marked unfinished.
        for (auto& h : next)
          if (st.finished.size() < k) st.finished.push_back(std::move(h));
        st.active.clear();
        continue;
      }
      for (std::size_t a = 0; a < next.size(); ++a) next_owner.emplace_back(s, a);
      parents.insert(parents.end(), next_parents.begin(), next_parents.end());
      st.active = std::move(next);
    }
    if (next_owner.empty()) break;
    model.reorder(state, parents);
    row_owner = std::move(next_owner);
  }

  std::vector<std::vector<BeamHypothesis>> results(n);
  for (std::size_t s = 0; s < n; ++s) {
    auto hyps = std::move(searches[s].finished);
    std::stable_sort(hyps.begin(), hyps.end(), [&](const BeamHypothesis& a, const BeamHypothesis& b) {
      if (a.finished != b.finished) return a.finished;
      return a.normalized_score(o.length_alpha) > b.normalized_score(o.length_alpha);
    });
    const auto limit = static_cast<std::size_t>(n_best > 0 ? n_best : o.beam_size);
    if (hyps.size() > limit) hyps.resize(limit);
    results[s] = std::move(hyps);
  }
  return results;
}

}  // namespace

TokenIds greedy_decode(const InferenceModel& model, std::span<const TokenId> source_ids, const DecodeOptions& o) {
  check_source(model, source_ids);
  const int max_len = resolve_max_len(model, source_ids.size(), o);
  const auto mem = model.encode(source_ids);
  auto state = model.start({&mem}, max_len);
  TokenIds out;
  TokenId last = kBos;
  for (int t = 0; t < max_len; ++t) {
    MatrixF lp = model.step(state, std::span<const TokenId>(&last, 1));
    auto row = lp.row(0);
    mask_row(row, t, o, 0);
    Eigen::Index best = 0;
    row.maxCoeff(&best);
    if (best == kEos) break;
    last = static_cast<TokenId>(best);
    out.push_back(last);
  }
  return out;
}

std::vector<BeamHypothesis> beam_search(const InferenceModel& model, std::span<const TokenId> source_ids,
                                        const DecodeOptions& options, std::span<const TokenId> forced_prefix,
                                        int n_best) {
  std::vector<TokenIds> prefixes;
  if (!forced_prefix.empty()) prefixes.emplace_back(forced_prefix.begin(), forced_prefix.end());
  return run_search(model, {TokenIds(source_ids.begin(), source_ids.end())}, prefixes, options, n_best)[0];
}

std::vector<std::vector<BeamHypothesis>> beam_search_batch(const InferenceModel& model,
                                                           const std::vector<TokenIds>& sources,
                                                           const DecodeOptions& options) {
  if (sources.empty()) return {};
  return run_search(model, sources, {}, options, 0);
}

std::vector<BeamHypothesis> prefix_constrained_decode(const InferenceModel& model, const BpeModel& bpe,
                                                      std::span<const TokenId> source_ids,
                                                      std::span<const TokenId> forced_prefix, int k,
                                                      DecodeOptions options) {
  if (k < 1) throw Error("k must be >= 1");
  std::vector<BeamHypothesis> out;
  for (int width = k; width <= 4 * k; width *= 2) {
    options.beam_size = width;
    auto hyps = beam_search(model, source_ids, options, forced_prefix, width);
    out.clear();
    std::set<std::string> seen;
    for (auto& h : hyps) {
      if (!seen.insert(bpe.decode(h.token_ids)).second) continue;
      out.push_back(std::move(h));
      if (static_cast<int>(out.size()) == k) return out;
    }
    if (static_cast<int>(hyps.size()) < width) break;  // search space exhausted
  }
  return out;
}

std::vector<BeamHypothesis> infill_gaps(const InferenceModel& model, std::span<const TokenId> source_ids, int n,
                                        DecodeOptions options) {
  const auto gaps = std::count(source_ids.begin(), source_ids.end(), static_cast<TokenId>(kGap));
  if (gaps == 0) throw Error("source has no gap token");
  if (n < 1) throw Error("n must be >= 1");
  options.beam_size = std::max(n, options.beam_size);
  options.min_length = std::max(options.min_length, 1);
  options.allow_gap_separator = gaps > 1;
  return beam_search(model, source_ids, options, {}, n);
}

// ---------------------------------------------------------------------------
// Text-level wrapper

std::string TextDecoder::best(const EncodedExample& ex) const {
  if (ex.task == TaskKind::kBti) {
    auto hyps = infill_gaps(model_, ex.source_ids, 1, options_);
    return hyps.empty() ? std::string() : bpe_.decode(hyps[0].token_ids);
  }
  auto hyps = beam_search(model_, ex.source_ids, options_);
  return hyps.empty() ? std::string() : bpe_.decode(hyps[0].token_ids);
}

std::string TextDecoder::translate(std::string_view source, std::string_view tgt_lang) const {
  return best(encode_trn(bpe_, source, tgt_lang));
}

std::string TextDecoder::synchronize(std::string_view x_prime, std::string_view y, TaskKind kind,
                                     std::string_view tgt_lang) const {
  if (kind == TaskKind::kTrn) return translate(x_prime, tgt_lang);
  return best(encode_update(bpe_, x_prime, y, kind, tgt_lang));
}

std::vector<Filler> TextDecoder::fill(std::string_view x, std::string_view y_gapped, std::string_view tgt_lang,
                                      int n) const {
  const auto ex = encode_bti(bpe_, x, y_gapped, tgt_lang);
  std::vector<Filler> out;
  for (const auto& h : infill_gaps(model_, ex.source_ids, n, options_))
    out.push_back({bpe_.decode(h.token_ids), h.normalized_score(options_.length_alpha)});
  return out;
}

std::vector<std::string> TextDecoder::complete(std::string_view source, std::string_view tgt_lang,
                                               std::string_view prefix, int k) const {
  const auto ex = encode_trn(bpe_, source, tgt_lang);
  const auto prefix_ids = bpe_.encode(prefix);
  std::vector<std::string> out;
  for (const auto& h : prefix_constrained_decode(model_, bpe_, ex.source_ids, prefix_ids, k, options_))
    out.push_back(bpe_.decode(h.token_ids));
  return out;
}

std::string TextDecoder::run(const Triplet& t) const { return best(encode_triplet(bpe_, t, false)); }

std::vector<std::string> TextDecoder::run_batch(const std::vector<Triplet>& triplets, std::size_t batch_size) const {
  std::vector<std::string> out(triplets.size());
  std::vector<TokenIds> sources;
  std::vector<std::size_t> index;
  const auto flush = [&] {
    if (sources.empty()) return;
    const auto results = beam_search_batch(model_, sources, options_);
    for (std::size_t i = 0; i < results.size(); ++i)
      out[index[i]] = results[i].empty() ? std::string() : bpe_.decode(results[i][0].token_ids);
    sources.clear();
    index.clear();
  };
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    if (triplets[i].task == TaskKind::kBti) {
      out[i] = run(triplets[i]);
      continue;
    }
    sources.push_back(encode_triplet(bpe_, triplets[i], false).source_ids);
    index.push_back(i);
    if (sources.size() >= std::max<std::size_t>(1, batch_size)) flush();
  }
  flush();
  return out;
}

}  // namespace bisync
