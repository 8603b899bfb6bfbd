// SPDX-License-Identifier: Apache-2.0
//
// Writes a small corpus, record files and a pipeline config for trying the
// command-line tool:
//   make_toy_data out/
//   uftlab pretrain-toy --data out/corpus.txt --config out/pretrain.json --out out/base.ckpt
//   uftlab pipeline --config out/sequential.json --base out/base.ckpt --out out/seq
//   uftlab pipeline --config out/unified.json --base out/base.ckpt --out out/uft

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "uftlab/uftlab.hpp"

namespace fs = std::filesystem;
using namespace uftlab;

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? argv[1] : "toy_data";
  fs::create_directories(out);

  Rng rng(1);
  std::string corpus;
  while (corpus.size() < 20000) {
    for (std::size_t i = 0, n = 2 + rng.below(5); i < n; ++i) corpus += static_cast<char>('a' + rng.below(26));
    corpus += ' ';
  }
  write_file(out / "corpus.txt", corpus);

  auto inst = tasks::instruction_data(tasks::echo(), 300, 1);
  const auto up = tasks::instruction_data(tasks::upper(), 300, 2);
  inst.insert(inst.end(), up.begin(), up.end());
  write_records(out / "instructions.jsonl", inst);

  std::vector<ScoredExample> safety;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto ex = tasks::refusal().example(3, i);
    safety.push_back({ex.prompt, ex.gold, 1.0, Origin::binary});
    safety.push_back({ex.prompt, ex.prompt.substr(2), 0.0, Origin::binary});
  }
  write_records(out / "safety.jsonl", safety);

  std::ofstream(out / "pretrain.json") << R"({
  "model": {"layers": 2, "heads": 2, "model-dim": 32, "context-length": 24},
  "pretrain": {"steps": 300, "window": 16, "seed": 1}
}
)";
  std::ofstream(out / "mix.json") << R"({
  "seed": 1,
  "sources": [
    {"path": "instructions.jsonl", "schema": "instruction", "count": 600},
    {"path": "safety.jsonl", "schema": "scored", "count": 600}
  ]
}
)";
  const char* eval = R"("eval": {"tasks": ["echo", "upper", "refuse"], "n-per-task": 50, "kl-samples": 2})";
  std::ofstream(out / "sequential.json") << R"({
  "stages": [
    {"name": "sft", "data": "instructions.jsonl",
     "config": {"objective": "sft", "steps": 600, "batch-size": 16, "learning-rate": 0.003}},
    {"name": "align", "data": "safety.jsonl", "reference": "previous-stage-snapshot",
     "config": {"objective": "una", "steps": 300, "batch-size": 16, "learning-rate": 0.003, "beta": 0.03}}
  ],
  "eval-after-each-stage": true,
  )" << eval << "\n}\n";
  std::ofstream(out / "unified.json") << R"({
  "unified": true,
  "stages": [
    {"name": "uft", "mix": "mix.json",
     "config": {"objective": "una", "steps": 900, "batch-size": 16, "learning-rate": 0.003, "beta": 0.03}}
  ],
  "eval-after-each-stage": true,
  )" << eval << "\n}\n";
  std::printf("wrote toy inputs to %s\n", out.string().c_str());
}
