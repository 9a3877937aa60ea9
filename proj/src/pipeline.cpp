#include <bisync/pipeline.hpp>
#include <bisync/quantize.hpp>
#include <bisync/tensor_file.hpp>

#include <chrono>
#include <fstream>
#include <optional>

namespace bisync {

std::vector<std::string> ModelFillOracle::fill(const std::string& x, const std::string& y_gapped,
                                               const std::string& tgt_lang, int n) const {
  std::vector<std::string> out;
  for (auto& f : decoder_.fill(x, y_gapped, tgt_lang, n)) out.push_back(std::move(f.text));
  return out;
}

std::vector<ParallelPair> random_directions(const std::vector<ParallelPair>& pairs, std::uint64_t seed) {
  std::vector<ParallelPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(bernoulli(rng, 0.5) ? pairs[i].reversed() : pairs[i]);
  }
  return out;
}

std::vector<ParallelPair> both_directions(const std::vector<ParallelPair>& pairs) {
  std::vector<ParallelPair> out;
  out.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    out.push_back(p);
    out.push_back(p.reversed());
  }
  return out;
}

std::vector<EncodedExample> encode_triplets(const BpeModel& bpe, const std::vector<Triplet>& triplets) {
  std::vector<EncodedExample> out;
  out.reserve(triplets.size());
  for (const auto& t : triplets) out.push_back(encode_triplet(bpe, t));
  return out;
}

std::vector<std::string> bpe_training_text(const std::vector<ParallelPair>& pairs) {
  std::vector<std::string> text;
  text.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    text.push_back(p.source);
    text.push_back(p.target);
  }
  return text;
}

TransformerParams<float> train_and_average(const ModelConfig& model, const TrainConfig& train,
                                           const std::vector<EncodedExample>& data,
                                           const std::filesystem::path& log_path,
                                           const std::function<void(const TrainLogEntry&)>& on_log,
                                           const TransformerParams<float>* init) {
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path);
    if (!log) throw Error("cannot write '" + log_path.string() + "'");
  }
  TrainHooks hooks;
  hooks.on_log = [&](const TrainLogEntry& e) {
    if (log) log << e.to_json().dump() << '\n' << std::flush;
    if (on_log) on_log(e);
  };
  auto result = bisync::train(model, train, data, hooks, init);
  std::vector<TransformerParams<float>> params;
  for (auto& c : result.checkpoints) params.push_back(std::move(c.params));
  return average_checkpoints(params);
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

nlohmann::json train_to_json(const TrainConfig& c) {
  return {{"warmup_steps", c.warmup_steps},       {"label_smoothing", c.label_smoothing},
          {"tokens_per_batch", c.tokens_per_batch}, {"total_steps", c.total_steps},
          {"checkpoint_every", c.checkpoint_every}, {"keep_last", c.keep_last},
          {"log_every", c.log_every},             {"rng_seed", c.rng_seed},
          {"lr_scale", c.lr_scale},               {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},           {"adam_eps", c.adam_eps}};
}

TrainConfig train_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  c.tokens_per_batch = j.value("tokens_per_batch", c.tokens_per_batch);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.keep_last = j.value("keep_last", c.keep_last);
  c.log_every = j.value("log_every", c.log_every);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.lr_scale = j.value("lr_scale", c.lr_scale);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  return c;
}

nlohmann::json synth_to_json(const SynthConfig& c) {
  return {{"max_segment_len", c.max_segment_len},
          {"max_removed_ratio", c.max_removed_ratio},
          {"nbest_for_sub", c.nbest_for_sub},
          {"rng_seed", c.rng_seed},
          {"task_mix", c.task_mix}};
}

SynthConfig synth_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  c.max_segment_len = j.value("max_segment_len", c.max_segment_len);
  c.max_removed_ratio = j.value("max_removed_ratio", c.max_removed_ratio);
  c.nbest_for_sub = j.value("nbest_for_sub", c.nbest_for_sub);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  if (j.contains("task_mix")) c.task_mix = j["task_mix"].get<std::array<double, 5>>();
  return c;
}

nlohmann::json decode_to_json(const DecodeOptions& o) {
  return {{"beam_size", o.beam_size}, {"max_len", o.max_len}, {"length_alpha", o.length_alpha}};
}

DecodeOptions decode_from_json(const nlohmann::json& j, DecodeOptions o = {}) {
  o.beam_size = j.value("beam_size", o.beam_size);
  o.max_len = j.value("max_len", o.max_len);
  o.length_alpha = j.value("length_alpha", o.length_alpha);
  return o;
}

}  // namespace

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.model.d_model = 64;
  c.model.n_layers = 2;
  c.model.n_heads = 4;
  c.model.d_ff = 256;
  // Without dropout the tiny model reaches the attention-alignment phase in
  // about two thirds of the steps; the toy data is plentiful.
  c.model.dropout = 0.0;
  // The loss plateaus at the target-side language model until cross
  // attention aligns; warmup and peak rate were picked on that phase.
  const auto schedule = [](long steps, int warmup, std::uint64_t seed) {
    TrainConfig t;
    t.total_steps = steps;
    t.warmup_steps = warmup;
    t.tokens_per_batch = 2048;
    t.checkpoint_every = std::max<long>(1, steps / 40);
    t.keep_last = 10;
    t.log_every = 50;
    t.rng_seed = seed;
    t.lr_scale = 0.25;
    return t;
  };
  c.oracle_pretrain = schedule(1200, 400, 10);
  c.oracle_train = schedule(1300, 200, 11);
  c.baseline_train = schedule(2000, 400, 12);
  c.bisync_train = schedule(3500, 200, 13);
  c.synth.rng_seed = 21;
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"train_pairs", train_pairs},
          {"oracle_pairs", oracle_pairs},
          {"corpus_seed", corpus_seed},
          {"test_seed", test_seed},
          {"dialect_weights", dialect_weights},
          {"bpe_merges", bpe_merges},
          {"model", model.to_json()},
          {"oracle_pretrain", train_to_json(oracle_pretrain)},
          {"oracle_train", train_to_json(oracle_train)},
          {"baseline_train", train_to_json(baseline_train)},
          {"bisync_train", train_to_json(bisync_train)},
          {"bisync_from_oracle", bisync_from_oracle},
          {"synth", synth_to_json(synth)},
          {"decode", decode_to_json(decode)},
          {"test_per_task_direction", test_per_task_direction},
          {"deterministic_test_pairs", deterministic_test_pairs}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c = desk();
  c.train_pairs = j.value("train_pairs", c.train_pairs);
  c.oracle_pairs = j.value("oracle_pairs", c.oracle_pairs);
  c.corpus_seed = j.value("corpus_seed", c.corpus_seed);
  c.test_seed = j.value("test_seed", c.test_seed);
  if (j.contains("dialect_weights")) c.dialect_weights = j["dialect_weights"].get<std::vector<double>>();
  c.bpe_merges = j.value("bpe_merges", c.bpe_merges);
  if (j.contains("model")) {
    auto m = c.model.to_json();
    m.update(j["model"]);
    c.model = ModelConfig::from_json(m);
  }
  if (j.contains("oracle_pretrain")) c.oracle_pretrain = train_from_json(j["oracle_pretrain"], c.oracle_pretrain);
  if (j.contains("oracle_train")) c.oracle_train = train_from_json(j["oracle_train"], c.oracle_train);
  if (j.contains("baseline_train")) c.baseline_train = train_from_json(j["baseline_train"], c.baseline_train);
  if (j.contains("bisync_train")) c.bisync_train = train_from_json(j["bisync_train"], c.bisync_train);
  c.bisync_from_oracle = j.value("bisync_from_oracle", c.bisync_from_oracle);
  if (j.contains("synth")) c.synth = synth_from_json(j["synth"], c.synth);
  if (j.contains("decode")) c.decode = decode_from_json(j["decode"], c.decode);
  c.test_per_task_direction = j.value("test_per_task_direction", c.test_per_task_direction);
  c.deterministic_test_pairs = j.value("deterministic_test_pairs", c.deterministic_test_pairs);
  return c;
}

TaskTests group_by_task(const std::vector<Triplet>& triplets) {
  TaskTests out;
  for (const auto& t : triplets) out[t.task].push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

std::string fingerprint(const nlohmann::json& j) {
  // FNV-1a over the canonical dump.
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

class Stages {
 public:
  Stages(std::filesystem::path dir, ProgressFn progress) : dir_(std::move(dir)), progress_(std::move(progress)) {
    if (std::filesystem::exists(dir_ / "timings.json")) {
      std::ifstream in(dir_ / "timings.json");
      timings_ = nlohmann::json::parse(in, nullptr, false);
      if (timings_.is_discarded()) timings_ = nlohmann::json::object();
    }
  }

  // Runs `body` unless the stage stamp matches `key`.
  template <typename Body>
  void run(const std::string& name, const nlohmann::json& key, Body&& body) {
    const auto stamp = dir_ / ("stage_" + name + ".json");
    const auto fp = fingerprint(key);
    if (std::filesystem::exists(stamp)) {
      std::ifstream in(stamp);
      const auto j = nlohmann::json::parse(in, nullptr, false);
      if (!j.is_discarded() && j.value("fingerprint", "") == fp) {
        say("stage " + name + ": reusing cached outputs");
        return;
      }
    }
    say("stage " + name + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    body();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings_[name] = secs;
    std::ofstream(dir_ / "timings.json") << timings_.dump(2);
    std::ofstream(stamp) << nlohmann::json{{"fingerprint", fp}, {"seconds", secs}}.dump();
    say("stage " + name + ": done in " + std::to_string(static_cast<int>(secs)) + " s");
  }

  void say(const std::string& msg) const {
    if (progress_) progress_(msg);
  }

 private:
  std::filesystem::path dir_;
  ProgressFn progress_;
  nlohmann::json timings_ = nlohmann::json::object();
};

ToyCorpus dialect_corpus(const ExperimentConfig& cfg) {
  ToyCorpusConfig tc;
  tc.source_dialect_weights = cfg.dialect_weights;
  tc.target_dialect_weights = cfg.dialect_weights;
  return ToyCorpus(ToyLexicon::load_default(), tc);
}

std::vector<Triplet> oracle_triplets(const std::vector<ParallelPair>& pairs, const SynthConfig& synth,
                                     std::uint64_t seed) {
  std::vector<Triplet> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    out.push_back(bernoulli(rng, 0.5) ? make_bti(pairs[i], synth, rng) : make_translation(pairs[i]));
  }
  return out;
}

// Test triplets of one task; pairs that cannot yield the task are skipped.
std::vector<Triplet> task_tests(TaskKind task, const std::vector<ParallelPair>& pairs, std::size_t& cursor,
                                std::size_t want, const FillOracle& oracle, const SynthConfig& synth,
                                std::uint64_t seed) {
  std::vector<Triplet> out;
  while (out.size() < want) {
    if (cursor >= pairs.size()) throw Error("ran out of held-out pairs while building test sets");
    const auto& pair = pairs[cursor];
    Rng rng(derive_seed(seed, cursor));
    ++cursor;
    SynthOutcome o;
    switch (task) {
      case TaskKind::kTrn: o.triplet = make_translation(pair); break;
      case TaskKind::kIns: o = make_insertion(pair, synth, rng); break;
      case TaskKind::kDel: o = make_deletion(pair, oracle, synth, rng); break;
      case TaskKind::kSub: o = make_substitution(pair, oracle, synth, rng); break;
      case TaskKind::kBti: o.triplet = make_bti(pair, synth, rng); break;
    }
    if (o.triplet) out.push_back(std::move(*o.triplet));
  }
  return out;
}

}  // namespace

ExperimentArtifacts run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                                   const ProgressFn& progress) {
  std::filesystem::create_directories(dir);
  ExperimentArtifacts art{dir};
  Stages stages(dir, progress);
  std::ofstream(dir / "config.json") << cfg.to_json().dump(2);

  const nlohmann::json data_key = {{"pairs", cfg.train_pairs},
                                   {"seed", cfg.corpus_seed},
                                   {"dialects", cfg.dialect_weights},
                                   {"merges", cfg.bpe_merges},
                                   {"version", BISYNC_VERSION}};
  const auto corpus = dialect_corpus(cfg);
  std::vector<ParallelPair> pairs;
  const auto ensure_pairs = [&] {
    if (pairs.empty()) pairs = corpus.generate(cfg.train_pairs, cfg.corpus_seed);
  };

  stages.run("data", data_key, [&] {
    ensure_pairs();
    BpeModel::learn(bpe_training_text(pairs), cfg.bpe_merges, corpus.config().languages).save(art.bpe());
  });
  const auto bpe = BpeModel::load(art.bpe());

  auto oracle_key = data_key;
  oracle_key["oracle"] = {{"model", cfg.model.to_json()},
                          {"pretrain", train_to_json(cfg.oracle_pretrain)},
                          {"train", train_to_json(cfg.oracle_train)},
                          {"pairs", cfg.oracle_pairs},
                          {"synth", synth_to_json(cfg.synth)}};
  stages.run("oracle", oracle_key, [&] {
    ensure_pairs();
    const std::vector<ParallelPair> subset(pairs.begin(),
                                           pairs.begin() + static_cast<long>(std::min(cfg.oracle_pairs, pairs.size())));
    const auto directed = random_directions(subset, cfg.synth.rng_seed + 1);
    auto model_cfg = cfg.model;
    model_cfg.vocab_size = static_cast<int>(bpe.vocab_size());
    // Translation alone aligns cross attention far sooner than the mix with
    // infilling, so the oracle starts from a translation-only phase.
    std::optional<TransformerParams<float>> init;
    if (cfg.oracle_pretrain.total_steps > 0) {
      std::vector<Triplet> trn;
      for (const auto& p : directed) trn.push_back(make_translation(p));
      init = train_and_average(model_cfg, cfg.oracle_pretrain, encode_triplets(bpe, trn),
                               dir / "oracle_pretrain.log.jsonl",
                               [&](const TrainLogEntry& e) { stages.say("oracle-pretrain " + e.to_json().dump()); });
    }
    const auto triplets = oracle_triplets(directed, cfg.synth, cfg.synth.rng_seed + 2);
    const auto params = train_and_average(
        model_cfg, cfg.oracle_train, encode_triplets(bpe, triplets), dir / "oracle_train.log.jsonl",
        [&](const TrainLogEntry& e) { stages.say("oracle " + e.to_json().dump()); }, init ? &*init : nullptr);
    save_checkpoint(art.oracle(), params, cfg.oracle_pretrain.total_steps + cfg.oracle_train.total_steps);
  });

  std::optional<InferenceModel> oracle_model;
  std::optional<TextDecoder> oracle_decoder;
  std::optional<ModelFillOracle> oracle;
  const auto ensure_oracle = [&] {
    if (oracle) return;
    oracle_model.emplace(load_checkpoint(art.oracle()));
    oracle_decoder.emplace(bpe, *oracle_model, cfg.decode);
    oracle.emplace(*oracle_decoder);
  };

  auto synth_key = oracle_key;
  synth_key["synth_stage"] = synth_to_json(cfg.synth);
  stages.run("synth", synth_key, [&] {
    ensure_pairs();
    ensure_oracle();
    SynthStats stats;
    const auto triplets = generate_triplets(random_directions(pairs, cfg.synth.rng_seed + 3), &*oracle, cfg.synth, &stats);
    write_triplets(art.triplets(), triplets);
    std::ofstream(art.synth_stats()) << stats.to_json().dump(2);
  });

  auto baseline_key = data_key;
  baseline_key["baseline"] = {{"model", cfg.model.to_json()}, {"train", train_to_json(cfg.baseline_train)}};
  stages.run("baseline", baseline_key, [&] {
    ensure_pairs();
    std::vector<Triplet> triplets;
    for (const auto& p : random_directions(pairs, cfg.synth.rng_seed + 3)) triplets.push_back(make_translation(p));
    auto model_cfg = cfg.model;
    model_cfg.vocab_size = static_cast<int>(bpe.vocab_size());
    const auto params = train_and_average(model_cfg, cfg.baseline_train, encode_triplets(bpe, triplets),
                                          dir / "baseline_train.log.jsonl", [&](const TrainLogEntry& e) {
                                            stages.say("baseline " + e.to_json().dump());
                                          });
    save_checkpoint(art.baseline(), params, cfg.baseline_train.total_steps);
  });

  auto bisync_key = synth_key;
  bisync_key["bisync"] = train_to_json(cfg.bisync_train);
  bisync_key["bisync_from_oracle"] = cfg.bisync_from_oracle;
  stages.run("bisync", bisync_key, [&] {
    const auto triplets = read_triplets(art.triplets());
    auto model_cfg = cfg.model;
    model_cfg.vocab_size = static_cast<int>(bpe.vocab_size());
    std::optional<TransformerParams<float>> init;
    if (cfg.bisync_from_oracle) init = load_checkpoint(art.oracle());
    const auto params = train_and_average(
        model_cfg, cfg.bisync_train, encode_triplets(bpe, triplets), dir / "bisync_train.log.jsonl",
        [&](const TrainLogEntry& e) { stages.say("bisync " + e.to_json().dump()); }, init ? &*init : nullptr);
    save_checkpoint(art.bisync(), params, cfg.bisync_train.total_steps);
  });

  stages.run("quantize", bisync_key, [&] { save_quantized(art.bisync_int8(), quantize_int8(load_checkpoint(art.bisync()))); });

  auto test_key = oracle_key;
  test_key["tests"] = {{"seed", cfg.test_seed},
                       {"per_task_direction", cfg.test_per_task_direction},
                       {"deterministic", cfg.deterministic_test_pairs},
                       {"decode", decode_to_json(cfg.decode)},
                       {"synth", synth_to_json(cfg.synth)}};
  stages.run("tests", test_key, [&] {
    ensure_oracle();
    const std::size_t n = cfg.test_per_task_direction;
    // Generous pool: some pairs are skipped for some tasks.
    const auto held_out = corpus.generate(n * 5 * 4 + 1000, cfg.test_seed);
    std::vector<ParallelPair> forward, backward;
    for (std::size_t i = 0; i < held_out.size(); ++i)
      (i % 2 ? backward : forward).push_back(i % 2 ? held_out[i].reversed() : held_out[i]);
    std::vector<Triplet> tests;
    std::size_t fwd_cursor = 0, bwd_cursor = 0;
    for (auto task : kAllTasks) {
      for (auto& t : task_tests(task, forward, fwd_cursor, n, *oracle, cfg.synth, cfg.test_seed + 1))
        tests.push_back(std::move(t));
      for (auto& t : task_tests(task, backward, bwd_cursor, n, *oracle, cfg.synth, cfg.test_seed + 2))
        tests.push_back(std::move(t));
    }
    write_triplets(art.tests(), tests);

    // Single-dialect pairs: the translation is a function of the source.
    const auto det = generate_toy_corpus(cfg.deterministic_test_pairs, cfg.test_seed + 3);
    std::vector<Triplet> det_tests;
    for (const auto& p : both_directions(det)) det_tests.push_back(make_translation(p));
    write_triplets(art.deterministic_tests(), det_tests);
  });
  return art;
}

InferenceModel load_inference_model(const std::filesystem::path& path) {
  const auto kind = read_tensor_file(path).header.value("kind", "");
  if (kind == "quantized") return InferenceModel(load_quantized(path));
  if (kind == "checkpoint") return InferenceModel(load_checkpoint(path));
  throw Error("'" + path.string() + "' is neither a checkpoint nor a quantized model");
}

nlohmann::json ExperimentReport::to_json() const {
  return {{"baseline", baseline.to_json()},
          {"bisync", bisync.to_json()},
          {"bisync_int8", bisync_int8.to_json()},
          {"deterministic_trn_bleu", deterministic_trn_bleu},
          {"bench_float", bench_float.to_json()},
          {"bench_int8", bench_int8.to_json()},
          {"timings", timings}};
}

ExperimentReport evaluate_experiment(const ExperimentConfig& cfg, const ExperimentArtifacts& art,
                                     const ProgressFn& progress) {
  const auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const auto bpe = BpeModel::load(art.bpe());
  const auto tests = group_by_task(read_triplets(art.tests()));
  ExperimentReport report;

  const InferenceModel baseline(load_checkpoint(art.baseline()));
  const InferenceModel bisync(load_checkpoint(art.bisync()));
  const InferenceModel bisync_int8(load_quantized(art.bisync_int8()));

  say("evaluating baseline");
  report.baseline = evaluate_model(TextDecoder(bpe, baseline, cfg.decode), tests, true, "baseline");
  say("evaluating bisync");
  report.bisync = evaluate_model(TextDecoder(bpe, bisync, cfg.decode), tests, false, "bisync");
  say("evaluating bisync int8");
  report.bisync_int8 = evaluate_model(TextDecoder(bpe, bisync_int8, cfg.decode), tests, false, "bisync-int8");

  const auto det = read_triplets(art.deterministic_tests());
  const auto det_out = TextDecoder(bpe, bisync, cfg.decode).run_batch(det);
  std::vector<std::string> refs;
  for (const auto& t : det) refs.push_back(t.y_prime);
  report.deterministic_trn_bleu = bleu(det_out, refs);

  say("benchmarking");
  std::vector<TokenIds> sources;
  for (const auto& t : tests.at(TaskKind::kTrn)) sources.push_back(encode_triplet(bpe, t, false).source_ids);
  BenchOptions bench;
  report.bench_float = benchmark(bisync, sources, cfg.decode, bench, art.bisync());
  report.bench_int8 = benchmark(bisync_int8, sources, cfg.decode, bench, art.bisync_int8());
  report.bisync.model_bytes = report.bench_float.model_bytes;
  report.bisync.tokens_per_sec = report.bench_float.tokens_per_sec;
  report.bisync_int8.model_bytes = report.bench_int8.model_bytes;
  report.bisync_int8.tokens_per_sec = report.bench_int8.tokens_per_sec;

  if (std::filesystem::exists(art.timings())) {
    std::ifstream in(art.timings());
    report.timings = nlohmann::json::parse(in);
  }
  std::ofstream(art.report()) << report.to_json().dump(2);
  return report;
}

}  // namespace bisync
