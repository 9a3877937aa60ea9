#include <gtest/gtest.h>
#include <json.hpp>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "test_util.hpp"

namespace {

struct Run {
  int code;
  std::string err;
};

Run run(const std::string& args, const std::filesystem::path& err_file) {
  const std::string cmd = std::string(BISYNC_CLI) + " " + args + " >/dev/null 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(err_file);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WEXITSTATUS(status), ss.str()};
}

}  // namespace

TEST(Cli, DataToolchain) {
  bisync::test_util::TempDir dir("cli");
  const auto err = dir / "err.txt";
  EXPECT_EQ(run("gen-data corpus -n 300 --seed 3 --dialects 0.5,0.5 -o " + (dir / "c.tsv").string(), err).code, 0);
  EXPECT_EQ(run("gen-data bpe --corpus " + (dir / "c.tsv").string() + " --merges 100 -o " + (dir / "v.bpe").string(), err).code, 0);
  EXPECT_EQ(run("gen-data triplets --corpus " + (dir / "c.tsv").string() + " --mix 1,1,0,0,1 -o " +
                    (dir / "t.jsonl").string(),
                err)
                .code,
            0);
  const auto train = run("train --bpe " + (dir / "v.bpe").string() + " --data " + (dir / "t.jsonl").string() +
                             " --d-model 16 --heads 2 --d-ff 32 --steps 4 --warmup 2 --checkpoint-every 2 --tokens-per-batch 256 -o " +
                             (dir / "m.ckpt").string() + " --checkpoint-dir " + (dir / "ck").string(),
                         err);
  EXPECT_EQ(train.code, 0) << train.err;
  EXPECT_EQ(run("average " + (dir / "ck" / "step2.ckpt").string() + " " + (dir / "ck" / "step4.ckpt").string() + " -o " +
                    (dir / "avg.ckpt").string(),
                err)
                .code,
            0);
  EXPECT_EQ(run("quantize -i " + (dir / "m.ckpt").string() + " -o " + (dir / "m.int8").string(), err).code, 0);
  const auto eval = run("eval --bpe " + (dir / "v.bpe").string() + " --model " + (dir / "m.int8").string() + " --tests " +
                            (dir / "t.jsonl").string() + " -o " + (dir / "r.json").string(),
                        err);
  EXPECT_EQ(eval.code, 0) << eval.err;
  EXPECT_TRUE(std::filesystem::exists(dir / "r.json"));
  EXPECT_EQ(run("bench --bpe " + (dir / "v.bpe").string() + " --model " + (dir / "m.ckpt").string() + " --tests " +
                    (dir / "t.jsonl").string() + " --runs 3",
                err)
                .code,
            0);
}

TEST(Cli, ErrorsAreStructured) {
  bisync::test_util::TempDir dir("cli_err");
  const auto err = dir / "err.txt";
  auto r = run("quantize -i " + (dir / "missing.ckpt").string() + " -o x", err);
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(nlohmann::json::parse(r.err).contains("error"));
  std::ofstream(dir / "bad.ckpt") << "garbage";
  r = run("quantize -i " + (dir / "bad.ckpt").string() + " -o " + (dir / "x").string(), err);
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(nlohmann::json::parse(r.err).contains("error"));
  r = run("no-such-command", err);
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(nlohmann::json::parse(r.err).contains("error"));
}
