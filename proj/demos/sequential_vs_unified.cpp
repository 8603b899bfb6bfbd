// SPDX-License-Identifier: Apache-2.0
//
// SFT followed by alignment forgets the instruction tasks; one unified run
// over the mixed data keeps both. Prints the degradation table.

#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "uftlab/uftlab.hpp"

using namespace uftlab;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;

  ModelConfig mc;
  mc.layers = 2;
  mc.heads = 2;
  mc.model_dim = 32;
  mc.context_length = 24;
  std::string corpus;
  Rng rng(seed);
  while (corpus.size() < 20000) {
    for (std::size_t i = 0, n = 2 + rng.below(5); i < n; ++i) corpus += static_cast<char>('a' + rng.below(26));
    corpus += ' ';
  }
  PretrainConfig pc;
  pc.steps = 300;
  pc.window = 16;
  pc.seed = seed;
  const PolicyModel base = pretrain(PolicyModel(Transformer::random(mc, mix_seed(seed, 7))), corpus, pc).model;

  auto inst = tasks::instruction_data(tasks::echo(), 300, mix_seed(seed, 1));
  const auto up = tasks::instruction_data(tasks::upper(), 300, mix_seed(seed, 2));
  inst.insert(inst.end(), up.begin(), up.end());
  std::vector<ScoredExample> safety;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto ex = tasks::refusal().example(mix_seed(seed, 3), i);
    safety.push_back({ex.prompt, ex.gold, 1.0, Origin::native_score});
    safety.push_back({ex.prompt, ex.prompt.substr(2), 0.0, Origin::native_score});
  }

  EvalPlan plan;
  plan.tasks = {tasks::echo(), tasks::upper(), tasks::refusal()};
  plan.seed = mix_seed(seed, 4);

  TrainingConfig sft;
  sft.objective = Objective::sft;
  sft.steps = 600;
  sft.batch_size = 16;
  sft.learning_rate = 3e-3;
  sft.seed = seed;
  TrainingConfig align = sft;
  align.objective = Objective::una;
  align.steps = 300;
  align.beta = Beta(0.03);

  PipelineSpec seq;
  seq.eval_after_each_stage = true;
  seq.stages = {{"sft", sft, "inst", ReferencePolicy::pretrained_snapshot},
                {"align", align, "safety", ReferencePolicy::previous_stage_snapshot}};
  const auto sres = run_pipeline(seq, base, {{"inst", inst}, {"safety", safety}}, &plan);

  const auto mixed =
      mix({{{"inst", inst.size()}, {"safety", safety.size()}}, seed}, {{"inst", instruction_to_scored(inst)}, {"safety", safety}});
  TrainingConfig uft = align;
  uft.steps = sft.steps + align.steps;
  PipelineSpec uni;
  uni.unified = true;
  uni.eval_after_each_stage = true;
  uni.stages = {{"uft", uft, "mix", ReferencePolicy::pretrained_snapshot}};
  const auto ures = run_pipeline(uni, base, {{"mix", mixed}}, &plan);

  std::vector<EvalReport> reports = sres.reports();
  std::cout << "sequential\n" << degradation_text(degradation_report(reports, 0.05)) << "\n";
  reports.push_back(ures.reports().front());
  std::cout << report_text(reports);
}
