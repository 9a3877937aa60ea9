#include <bisync/pipeline.hpp>
#include <bisync/quantize.hpp>

#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace bisync;

namespace {

ExperimentConfig tiny_experiment() {
  auto cfg = ExperimentConfig::desk();
  cfg.train_pairs = 400;
  cfg.oracle_pairs = 200;
  cfg.bpe_merges = 150;
  cfg.model.d_model = 16;
  cfg.model.n_heads = 2;
  cfg.model.d_ff = 32;
  for (auto* t : {&cfg.oracle_pretrain, &cfg.oracle_train, &cfg.baseline_train, &cfg.bisync_train}) {
    t->total_steps = 6;
    t->warmup_steps = 2;
    t->checkpoint_every = 2;
    t->keep_last = 3;
    t->tokens_per_batch = 512;
  }
  cfg.decode.max_len = 12;
  cfg.test_per_task_direction = 3;
  cfg.deterministic_test_pairs = 4;
  return cfg;
}

}  // namespace

TEST(Directions, RandomAndBoth) {
  const auto pairs = generate_toy_corpus(2000, 1);
  const auto r = random_directions(pairs, 3);
  EXPECT_EQ(r, random_directions(pairs, 3));
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (r[i] == pairs[i].reversed()) ++flipped;
    else EXPECT_EQ(r[i], pairs[i]);
  }
  EXPECT_NEAR(static_cast<double>(flipped) / 2000.0, 0.5, 0.05);
  const auto b = both_directions(pairs);
  ASSERT_EQ(b.size(), 4000u);
  EXPECT_EQ(b[1], pairs[0].reversed());
  EXPECT_EQ(bpe_training_text(pairs).size(), 4000u);
}

TEST(ExperimentConfig, JsonRoundTrip) {
  const auto cfg = tiny_experiment();
  const auto back = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  // Partial overrides keep desk defaults for the rest.
  const auto partial = ExperimentConfig::from_json({{"train_pairs", 10}, {"model", {{"d_model", 32}}}});
  EXPECT_EQ(partial.train_pairs, 10u);
  EXPECT_EQ(partial.model.d_model, 32);
  EXPECT_EQ(partial.model.n_layers, ExperimentConfig::desk().model.n_layers);
  EXPECT_EQ(partial.bisync_train.total_steps, ExperimentConfig::desk().bisync_train.total_steps);
}

TEST(Experiment, TinyRunProducesAllArtifactsAndCaches) {
  test_util::TempDir dir("experiment");
  const auto cfg = tiny_experiment();
  std::vector<std::string> log;
  const auto art = run_experiment(cfg, dir.path(), [&](const std::string& m) { log.push_back(m); });
  for (const auto& p : {art.bpe(), art.oracle(), art.triplets(), art.synth_stats(), art.baseline(), art.bisync(),
                        art.bisync_int8(), art.tests(), art.deterministic_tests(), art.timings()})
    EXPECT_TRUE(std::filesystem::exists(p)) << p;

  const auto tests = group_by_task(read_triplets(art.tests()));
  for (auto task : kAllTasks) {
    ASSERT_EQ(tests.count(task), 1u);
    EXPECT_EQ(tests.at(task).size(), 6u);
  }
  const auto det = read_triplets(art.deterministic_tests());
  EXPECT_EQ(det.size(), 8u);
  const auto bpe = BpeModel::load(art.bpe());
  for (const auto& t : read_triplets(art.triplets())) EXPECT_TRUE(is_valid_example(bpe, encode_triplet(bpe, t)));

  std::vector<std::string> second;
  run_experiment(cfg, dir.path(), [&](const std::string& m) { second.push_back(m); });
  EXPECT_TRUE(std::all_of(second.begin(), second.end(),
                          [](const std::string& m) { return m.find("reusing") != std::string::npos; }));

  auto changed = cfg;
  changed.bisync_train.total_steps = 4;
  std::vector<std::string> third;
  run_experiment(changed, dir.path(), [&](const std::string& m) { third.push_back(m); });
  const auto ran = [&](const std::string& stage) {
    return std::any_of(third.begin(), third.end(),
                       [&](const std::string& m) { return m == "stage " + stage + ": running"; });
  };
  EXPECT_FALSE(ran("oracle"));
  EXPECT_FALSE(ran("baseline"));
  EXPECT_TRUE(ran("bisync"));
  EXPECT_TRUE(ran("quantize"));

  const auto report = evaluate_experiment(changed, art);
  EXPECT_TRUE(std::filesystem::exists(art.report()));
  for (const char* task : {"TRN", "INS", "DEL", "SUB", "BTI"}) EXPECT_EQ(report.bisync.bleu.count(task), 1u) << task;
  EXPECT_EQ(report.baseline.bleu.count("BTI"), 0u);
  EXPECT_EQ(report.baseline.closeness.size(), 3u);
  EXPECT_EQ(report.bisync.closeness_sanity, 0.0);
  EXPECT_GT(report.bench_int8.model_bytes, 0u);
  EXPECT_LT(report.bench_int8.model_bytes, report.bench_float.model_bytes);
  EXPECT_TRUE(report.to_json().contains("timings"));
}

TEST(LoadModel, DetectsKind) {
  test_util::TempDir dir("load");
  const auto p = test_util::random_params(test_util::tiny_config(40), 1);
  save_checkpoint(dir / "f.ckpt", p);
  save_quantized(dir / "q.int8", quantize_int8(p));
  EXPECT_FALSE(load_inference_model(dir / "f.ckpt").quantized());
  EXPECT_TRUE(load_inference_model(dir / "q.int8").quantized());
  std::ofstream(dir / "junk") << "nope";
  EXPECT_THROW(load_inference_model(dir / "junk"), Error);
}
