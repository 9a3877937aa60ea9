#include <bisync/corpus.hpp>
#include <bisync/decode.hpp>
#include <bisync/eval.hpp>
#include <bisync/model.hpp>
#include <bisync/pipeline.hpp>
#include <bisync/quantize.hpp>
#include <bisync/service.hpp>
#include <bisync/subword.hpp>
#include <bisync/synthgen.hpp>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

using namespace bisync;

namespace {

std::vector<double> parse_weights(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    const double w = std::stod(item, &used);
    if (used != item.size()) throw Error("bad weight '" + item + "'");
    out.push_back(w);
  }
  if (out.empty()) throw Error("empty weight list");
  return out;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return nlohmann::json::parse(in);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilingual synchronization toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", BISYNC_VERSION);
  std::function<void()> action;

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate corpora, vocabularies and training triplets");
  gen->require_subcommand(1);

  struct {
    std::size_t n = 200000;
    std::uint64_t seed = 1;
    std::string dialects = "1";
    std::string out;
  } corpus_args;
  auto* corpus_cmd = gen->add_subcommand("corpus", "Sample a toy parallel corpus as TSV");
  corpus_cmd->add_option("-n,--pairs", corpus_args.n, "Number of pairs");
  corpus_cmd->add_option("--seed", corpus_args.seed, "Random seed");
  corpus_cmd->add_option("--dialects", corpus_args.dialects, "Comma-separated dialect weights for both sides");
  corpus_cmd->add_option("-o,--out", corpus_args.out, "Output TSV")->required();
  corpus_cmd->callback([&] {
    action = [&] {
      ToyCorpusConfig cfg;
      cfg.source_dialect_weights = cfg.target_dialect_weights = parse_weights(corpus_args.dialects);
      const ToyCorpus corpus(ToyLexicon::load_default(), cfg);
      write_tsv(corpus_args.out, corpus.generate(corpus_args.n, corpus_args.seed));
      print_json({{"pairs", corpus_args.n}, {"out", corpus_args.out}});
    };
  });

  struct {
    std::string corpus, out;
    std::size_t merges = 2000;
  } bpe_args;
  auto* bpe_cmd = gen->add_subcommand("bpe", "Learn a joint BPE vocabulary from a TSV corpus");
  bpe_cmd->add_option("--corpus", bpe_args.corpus, "Input TSV")->required()->check(CLI::ExistingFile);
  bpe_cmd->add_option("--merges", bpe_args.merges, "Number of merge operations");
  bpe_cmd->add_option("-o,--out", bpe_args.out, "Output vocabulary")->required();
  bpe_cmd->callback([&] {
    action = [&] {
      const auto pairs = read_tsv(bpe_args.corpus, LanguagePair{});
      const auto bpe = BpeModel::learn(bpe_training_text(pairs), bpe_args.merges, LanguagePair{});
      bpe.save(bpe_args.out);
      print_json({{"vocab_size", bpe.vocab_size()}, {"merges", bpe.merges().size()}});
    };
  });

  struct {
    std::string corpus, bpe, oracle, out, stats, mix = "1,1,1,1,1";
    std::uint64_t seed = 21;
    bool keep_direction = false;
    int beam = 3;
  } trip_args;
  auto* trip_cmd = gen->add_subcommand("triplets", "Synthesize training triplets from a TSV corpus");
  trip_cmd->add_option("--corpus", trip_args.corpus, "Input TSV")->required()->check(CLI::ExistingFile);
  trip_cmd->add_option("--bpe", trip_args.bpe, "Vocabulary (needed with --oracle)");
  trip_cmd->add_option("--oracle", trip_args.oracle, "Fill-in-gaps model for DEL and SUB");
  trip_cmd->add_option("--mix", trip_args.mix, "Weights for TRN,INS,DEL,SUB,BTI");
  trip_cmd->add_option("--seed", trip_args.seed, "Random seed");
  trip_cmd->add_option("--beam", trip_args.beam, "Oracle beam size");
  trip_cmd->add_flag("--keep-direction", trip_args.keep_direction, "Do not reverse pairs at random");
  trip_cmd->add_option("-o,--out", trip_args.out, "Output JSONL")->required();
  trip_cmd->add_option("--stats", trip_args.stats, "Write generation statistics as JSON");
  trip_cmd->callback([&] {
    action = [&] {
      SynthConfig cfg;
      cfg.rng_seed = trip_args.seed;
      const auto mix = parse_weights(trip_args.mix);
      if (mix.size() != cfg.task_mix.size()) throw Error("--mix needs 5 weights");
      std::copy(mix.begin(), mix.end(), cfg.task_mix.begin());
      auto pairs = read_tsv(trip_args.corpus, LanguagePair{});
      if (!trip_args.keep_direction) pairs = random_directions(pairs, trip_args.seed + 3);

      std::optional<BpeModel> bpe;
      std::optional<InferenceModel> model;
      std::optional<TextDecoder> decoder;
      std::optional<ModelFillOracle> oracle;
      if (!trip_args.oracle.empty()) {
        if (trip_args.bpe.empty()) throw Error("--oracle needs --bpe");
        bpe.emplace(BpeModel::load(trip_args.bpe));
        model.emplace(load_inference_model(trip_args.oracle));
        DecodeOptions opts;
        opts.beam_size = trip_args.beam;
        decoder.emplace(*bpe, *model, opts);
        oracle.emplace(*decoder);
      }
      SynthStats stats;
      const auto triplets = generate_triplets(pairs, oracle ? &*oracle : nullptr, cfg, &stats);
      write_triplets(trip_args.out, triplets);
      if (!trip_args.stats.empty()) std::ofstream(trip_args.stats) << stats.to_json().dump(2);
      print_json(stats.to_json());
    };
  });

  // train ------------------------------------------------------------------
  struct {
    std::string bpe, data, out, log, checkpoint_dir;
    ModelConfig model;
    TrainConfig train;
    bool no_average = false;
  } train_args;
  train_args.train.tokens_per_batch = 2048;
  train_args.train.warmup_steps = 400;
  auto* train_cmd = app.add_subcommand("train", "Train a model on JSONL triplets");
  train_cmd->add_option("--bpe", train_args.bpe, "Vocabulary")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train_args.data, "Training triplets (JSONL)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("-o,--out", train_args.out, "Output checkpoint (average of the kept ones)")->required();
  train_cmd->add_option("--d-model", train_args.model.d_model);
  train_cmd->add_option("--layers", train_args.model.n_layers);
  train_cmd->add_option("--heads", train_args.model.n_heads);
  train_cmd->add_option("--d-ff", train_args.model.d_ff);
  train_cmd->add_option("--dropout", train_args.model.dropout);
  train_cmd->add_option("--max-positions", train_args.model.max_positions);
  train_cmd->add_option("--steps", train_args.train.total_steps);
  train_cmd->add_option("--warmup", train_args.train.warmup_steps);
  train_cmd->add_option("--tokens-per-batch", train_args.train.tokens_per_batch);
  train_cmd->add_option("--label-smoothing", train_args.train.label_smoothing);
  train_cmd->add_option("--lr-scale", train_args.train.lr_scale);
  train_cmd->add_option("--checkpoint-every", train_args.train.checkpoint_every);
  train_cmd->add_option("--keep-last", train_args.train.keep_last);
  train_cmd->add_option("--seed", train_args.train.rng_seed);
  train_cmd->add_option("--log", train_args.log, "Training log (JSONL)");
  train_cmd->add_option("--checkpoint-dir", train_args.checkpoint_dir, "Also save every kept checkpoint here");
  train_cmd->add_flag("--no-average", train_args.no_average, "Save only the last checkpoint");
  train_cmd->callback([&] {
    action = [&] {
      const auto bpe = BpeModel::load(train_args.bpe);
      auto model_cfg = train_args.model;
      model_cfg.vocab_size = static_cast<int>(bpe.vocab_size());
      const auto data = encode_triplets(bpe, read_triplets(train_args.data));
      std::ofstream log;
      if (!train_args.log.empty()) log.open(train_args.log);
      TrainHooks hooks;
      hooks.on_log = [&](const TrainLogEntry& e) {
        std::cerr << e.to_json().dump() << std::endl;
        if (log) log << e.to_json().dump() << '\n';
      };
      if (!train_args.checkpoint_dir.empty()) {
        std::filesystem::create_directories(train_args.checkpoint_dir);
        hooks.on_checkpoint = [&](const Checkpoint& c) {
          save_checkpoint(std::filesystem::path(train_args.checkpoint_dir) / ("step" + std::to_string(c.step) + ".ckpt"),
                          c.params, c.step);
        };
      }
      auto result = train(model_cfg, train_args.train, data, hooks);
      if (result.checkpoints.empty()) throw Error("training produced no checkpoint");
      if (train_args.no_average) {
        save_checkpoint(train_args.out, result.checkpoints.back().params, result.checkpoints.back().step);
      } else {
        std::vector<TransformerParams<float>> params;
        for (auto& c : result.checkpoints) params.push_back(std::move(c.params));
        save_checkpoint(train_args.out, average_checkpoints(params), train_args.train.total_steps);
      }
      print_json({{"out", train_args.out}, {"checkpoints", result.checkpoints.size()}});
    };
  });

  // average ----------------------------------------------------------------
  struct {
    std::vector<std::string> inputs;
    std::string out;
  } avg_args;
  auto* avg_cmd = app.add_subcommand("average", "Average checkpoints parameter-wise");
  avg_cmd->add_option("inputs", avg_args.inputs, "Checkpoints")->required()->check(CLI::ExistingFile);
  avg_cmd->add_option("-o,--out", avg_args.out, "Output checkpoint")->required();
  avg_cmd->callback([&] {
    action = [&] {
      std::vector<TransformerParams<float>> params;
      for (const auto& p : avg_args.inputs) params.push_back(load_checkpoint(p));
      save_checkpoint(avg_args.out, average_checkpoints(params));
      print_json({{"averaged", params.size()}, {"out", avg_args.out}});
    };
  });

  // quantize ---------------------------------------------------------------
  struct {
    std::string in, out;
  } q_args;
  auto* q_cmd = app.add_subcommand("quantize", "Convert a float checkpoint to int8");
  q_cmd->add_option("-i,--in", q_args.in, "Float checkpoint")->required()->check(CLI::ExistingFile);
  q_cmd->add_option("-o,--out", q_args.out, "Output int8 model")->required();
  q_cmd->callback([&] {
    action = [&] {
      save_quantized(q_args.out, quantize_int8(load_checkpoint(q_args.in)));
      const auto a = std::filesystem::file_size(q_args.in), b = std::filesystem::file_size(q_args.out);
      print_json({{"float_bytes", a}, {"int8_bytes", b}, {"ratio", static_cast<double>(b) / static_cast<double>(a)}});
    };
  });

  // eval -------------------------------------------------------------------
  struct {
    std::string bpe, model, tests, out;
    bool retranslation = false;
    DecodeOptions decode;
  } eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "BLEU per task and TER closeness on JSONL test triplets");
  eval_cmd->add_option("--bpe", eval_args.bpe, "Vocabulary")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--model", eval_args.model, "Checkpoint or int8 model")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--tests", eval_args.tests, "Test triplets (JSONL)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_flag("--retranslation", eval_args.retranslation, "Decode every task as translation of x'");
  eval_cmd->add_option("--beam", eval_args.decode.beam_size);
  eval_cmd->add_option("-o,--out", eval_args.out, "Write the report as JSON");
  eval_cmd->callback([&] {
    action = [&] {
      const auto bpe = BpeModel::load(eval_args.bpe);
      const auto model = load_inference_model(eval_args.model);
      auto report = evaluate_model(TextDecoder(bpe, model, eval_args.decode), group_by_task(read_triplets(eval_args.tests)),
                                   eval_args.retranslation, eval_args.model);
      report.model_bytes = std::filesystem::file_size(eval_args.model);
      std::cerr << format_reports({report});
      if (!eval_args.out.empty()) std::ofstream(eval_args.out) << report.to_json().dump(2);
      print_json(report.to_json());
    };
  });

  // bench ------------------------------------------------------------------
  struct {
    std::string bpe, model, tests;
    BenchOptions bench;
    DecodeOptions decode;
  } bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Decoding throughput on the TRN sources of a test file");
  bench_cmd->add_option("--bpe", bench_args.bpe, "Vocabulary")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--model", bench_args.model, "Checkpoint or int8 model")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--tests", bench_args.tests, "Test triplets (JSONL)")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--runs", bench_args.bench.runs);
  bench_cmd->add_option("--batch-size", bench_args.bench.batch_size);
  bench_cmd->add_option("--beam", bench_args.decode.beam_size);
  bench_cmd->callback([&] {
    action = [&] {
      const auto bpe = BpeModel::load(bench_args.bpe);
      const auto model = load_inference_model(bench_args.model);
      std::vector<TokenIds> sources;
      for (const auto& t : read_triplets(bench_args.tests))
        if (t.task == TaskKind::kTrn) sources.push_back(encode_triplet(bpe, t, false).source_ids);
      if (sources.empty()) throw Error("no TRN triplets in the test file");
      print_json(benchmark(model, sources, bench_args.decode, bench_args.bench, bench_args.model).to_json());
    };
  });

  // serve ------------------------------------------------------------------
  struct {
    std::string bpe, model, host = "127.0.0.1", cors = "*";
    int port = 8080;
    ServiceOptions service;
  } serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP/JSON synchronization service");
  serve_cmd->add_option("--bpe", serve_args.bpe, "Vocabulary")->envname("BISYNC_BPE")->check(CLI::ExistingFile);
  serve_cmd->add_option("--model", serve_args.model, "Checkpoint or int8 model")
      ->envname("BISYNC_MODEL")
      ->check(CLI::ExistingFile);
  serve_cmd->add_option("--host", serve_args.host, "Bind address")->envname("BISYNC_HOST");
  serve_cmd->add_option("--port", serve_args.port, "Port")->envname("BISYNC_PORT");
  serve_cmd->add_option("--beam", serve_args.service.decode.beam_size)->envname("BISYNC_BEAM");
  serve_cmd->add_option("--max-len", serve_args.service.decode.max_len)->envname("BISYNC_MAX_LEN");
  serve_cmd->add_option("--cors-origin", serve_args.service.cors_origin)->envname("BISYNC_CORS_ORIGIN");
  serve_cmd->callback([&] {
    action = [&] {
      std::optional<BpeModel> bpe;
      std::optional<InferenceModel> model;
      if (!serve_args.bpe.empty()) bpe.emplace(BpeModel::load(serve_args.bpe));
      if (!serve_args.model.empty()) {
        if (!bpe) throw Error("--model needs --bpe");
        model.emplace(load_inference_model(serve_args.model));
        serve_args.service.model_info["path"] = serve_args.model;
      }
      const SyncService service(bpe ? &*bpe : nullptr, model ? &*model : nullptr, serve_args.service);
      auto server = make_http_server(service);
      std::cerr << nlohmann::json{{"listening", serve_args.host + ":" + std::to_string(serve_args.port)}}.dump()
                << std::endl;
      if (!server->listen(serve_args.host, serve_args.port)) throw Error("cannot listen on the given address");
    };
  });

  // experiment -------------------------------------------------------------
  struct {
    std::string dir, config;
    bool skip_eval = false;
  } exp_args;
  auto* exp_cmd = app.add_subcommand("experiment", "Run the full toy pipeline and evaluation");
  exp_cmd->add_option("--dir", exp_args.dir, "Working directory")->required();
  exp_cmd->add_option("--config", exp_args.config, "JSON overrides of the desk configuration");
  exp_cmd->add_flag("--skip-eval", exp_args.skip_eval, "Stop after building artifacts");
  exp_cmd->callback([&] {
    action = [&] {
      const auto cfg = exp_args.config.empty() ? ExperimentConfig::desk()
                                               : ExperimentConfig::from_json(read_json_file(exp_args.config));
      const auto progress = [](const std::string& m) { std::cerr << m << std::endl; };
      const auto art = run_experiment(cfg, exp_args.dir, progress);
      if (exp_args.skip_eval) return;
      const auto report = evaluate_experiment(cfg, art, progress);
      std::cerr << format_reports({report.baseline, report.bisync, report.bisync_int8});
      print_json(report.to_json());
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "usage"}}.dump() << std::endl;
    return 2;
  }
  try {
    if (action) action();
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"kind", "runtime"}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
