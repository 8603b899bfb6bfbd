// SPDX-License-Identifier: Apache-2.0

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "uftlab/uftlab.hpp"

namespace fs = std::filesystem;
using namespace uftlab;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(UFTLAB_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("uftlab_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(dir_ / name, std::ios::binary) << text;
    return dir_ / name;
  }

  // A small random-init checkpoint, cheap enough to train on in every test.
  fs::path base() const {
    ModelConfig c;
    c.context_length = 24;
    const fs::path p = dir_ / "base.ckpt";
    save_checkpoint(p, PolicyModel(Transformer::random(c, 1)));
    return p;
  }

  fs::path instruction_file(std::size_t n) const {
    const auto recs = tasks::instruction_data(tasks::echo(), n, 3);
    write_records(dir_ / "inst.jsonl", recs);
    return dir_ / "inst.jsonl";
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExit64) {
  EXPECT_EQ(run(""), 64);
  EXPECT_EQ(run("frobnicate"), 64);
  EXPECT_EQ(run("train --bogus-flag 1"), 64);
  EXPECT_EQ(run("eval " + q(base()) + " --out " + q(dir_ / "e") + " --tasks chess"), 64);
  EXPECT_EQ(run("gradcheck --help"), 0);
}

TEST_F(Cli, MissingFileExits1) {
  EXPECT_EQ(run("train --data " + q(dir_ / "nope.jsonl") + " --base " + q(base()) + " --out " + q(dir_ / "o")), 1);
}

TEST_F(Cli, SchemaMismatchExits2) {
  std::vector<ScoredExample> scored{{"p", "r", 0.5, Origin::native_score}};
  write_records(dir_ / "scored.jsonl", scored);
  EXPECT_EQ(run("train --objective dpo --schema scored --data " + q(dir_ / "scored.jsonl") + " --base " + q(base()) +
                " --out " + q(dir_ / "o")),
            2);
  write("bad.jsonl", "{\"prompt\": \"p\"\n");
  EXPECT_EQ(run("train --data " + q(dir_ / "bad.jsonl") + " --base " + q(base()) + " --out " + q(dir_ / "o")), 2);
}

TEST_F(Cli, ConvertInstructionToScored) {
  const fs::path in = instruction_file(20000);
  ASSERT_EQ(run("convert --data " + q(in) + " --schema instruction --to scored --out " + q(dir_ / "s.jsonl")), 0);
  const auto out = std::get<std::vector<ScoredExample>>(load_records(dir_ / "s.jsonl", Schema::scored));
  ASSERT_EQ(out.size(), 20000u);
  for (const auto& s : out) EXPECT_EQ(s.score, 1.0);
  EXPECT_EQ(run("convert --data " + q(in) + " --schema instruction --to scored --out " + q(in)), 64);
}

TEST_F(Cli, MixTwoSources) {
  std::vector<ScoredExample> a, b;
  for (int i = 0; i < 20000; ++i) {
    a.push_back({"a" + std::to_string(i), "r", 1.0, Origin::instruction});
    b.push_back({"b" + std::to_string(i), "r", 0.0, Origin::binary});
  }
  write_records(dir_ / "a.jsonl", a);
  write_records(dir_ / "b.jsonl", b);
  const fs::path spec = write("mix.json", R"({"seed": 4, "sources": [
      {"path": "a.jsonl", "schema": "scored", "count": 20000},
      {"path": "b.jsonl", "schema": "scored", "count": 20000}]})");
  ASSERT_EQ(run("mix --mix-spec " + q(spec) + " --out " + q(dir_ / "m.jsonl")), 0);
  EXPECT_EQ(std::get<std::vector<ScoredExample>>(load_records(dir_ / "m.jsonl", Schema::scored)).size(), 40000u);
}

TEST_F(Cli, GradcheckPasses) { EXPECT_EQ(run("gradcheck"), 0); }

TEST_F(Cli, PretrainToyWritesCheckpointAndMetrics) {
  std::string corpus;
  while (corpus.size() < 2000) corpus += "the cat sat on a mat ";
  write("corpus.txt", corpus);
  write("pre.json", R"({"model": {"context-length": 24}, "pretrain": {"steps": 10, "window": 16}})");
  ASSERT_EQ(run("pretrain-toy --data " + q(dir_ / "corpus.txt") + " --config " + q(dir_ / "pre.json") + " --out " +
                q(dir_ / "pre.ckpt")),
            0);
  EXPECT_NO_THROW(load_policy(dir_ / "pre.ckpt"));
  EXPECT_TRUE(fs::exists(dir_ / "pre.ckpt.metrics.csv"));
}

TEST_F(Cli, TrainRerunIsByteIdentical) {
  const fs::path data = instruction_file(20), b = base();
  const std::string args = "train --objective uft-sft --schema instruction --steps 8 --lr 1e-3 --data " + q(data) +
                           " --base " + q(b) + " --out ";
  ASSERT_EQ(run(args + q(dir_ / "r1")), 0);
  ASSERT_EQ(run(args + q(dir_ / "r2")), 0);
  for (const char* f : {"model.ckpt", "metrics.csv", "summary.csv"}) {
    EXPECT_EQ(read_file(dir_ / "r1" / f), read_file(dir_ / "r2" / f)) << f;
  }
}

TEST_F(Cli, TrainZeroLearningRateKeepsWeights) {
  const fs::path b = base();
  ASSERT_EQ(run("train --steps 3 --lr 0 --data " + q(instruction_file(10)) + " --base " + q(b) + " --out " +
                q(dir_ / "o")),
            0);
  EXPECT_EQ(load_policy(dir_ / "o" / "model.ckpt"), load_policy(b));
}

TEST_F(Cli, PipelineThenEval) {
  const fs::path b = base();
  instruction_file(10);
  std::vector<ScoredExample> fb{{"x:abc", "nope", 1.0, Origin::binary}, {"x:abc", "abc", 0.0, Origin::binary}};
  write_records(dir_ / "fb.jsonl", fb);
  const fs::path cfg = write("pipe.json", R"({
    "stages": [
      {"name": "sft", "data": "inst.jsonl", "config": {"objective": "sft", "steps": 4, "batch-size": 2}},
      {"name": "una", "data": "fb.jsonl", "reference": "previous-stage-snapshot",
       "config": {"objective": "una", "steps": 4, "batch-size": 2}}],
    "eval-after-each-stage": true,
    "eval": {"n-per-task": 3, "kl-samples": 1}})");
  ASSERT_EQ(run("pipeline --config " + q(cfg) + " --base " + q(b) + " --out " + q(dir_ / "p")), 0);
  for (const char* f : {"sft.ckpt", "una.ckpt", "sft.metrics.csv", "una.metrics.csv", "eval.csv", "degradation.csv"}) {
    EXPECT_TRUE(fs::exists(dir_ / "p" / f)) << f;
  }
  ASSERT_EQ(run("eval " + q(b) + " " + q(dir_ / "p" / "sft.ckpt") + " " + q(dir_ / "p" / "una.ckpt") +
                " --reference " + q(b) + " --kl-samples 1 --n-per-task 3 --out " + q(dir_ / "e")),
            0);
  const std::string table = read_file(dir_ / "e" / "degradation.csv");
  // header + 4 tasks x 3 checkpoints
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 13);
}
