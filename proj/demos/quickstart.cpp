// SPDX-License-Identifier: Apache-2.0
//
// Pretrain a tiny model on random words, fine-tune it on the echo task with
// plain SFT and with UFT, and compare accuracy and drift from the base.

#include <cstdio>

#include "uftlab/uftlab.hpp"

using namespace uftlab;

int main() {
  ModelConfig mc;
  mc.layers = 2;
  mc.heads = 2;
  mc.model_dim = 32;
  mc.context_length = 24;

  std::string corpus;
  Rng rng(1);
  while (corpus.size() < 20000) {
    for (std::size_t i = 0, n = 2 + rng.below(5); i < n; ++i) corpus += static_cast<char>('a' + rng.below(26));
    corpus += ' ';
  }
  PretrainConfig pc;
  pc.steps = 300;
  pc.window = 16;
  const StageResult pre = pretrain(PolicyModel(Transformer::random(mc, 7)), corpus, pc);
  std::printf("pretrain loss %.3f -> %.3f\n", pre.log.records.front().loss, pre.log.records.back().loss);

  const PolicyModel& base = pre.model;
  const ReferenceModel ref = snapshot_reference(base);
  const auto data = tasks::instruction_data(tasks::echo(), 300, 11);

  EvalPlan plan;
  plan.tasks = {tasks::echo(), tasks::upper()};
  plan.n_per_task = 50;
  plan.seed = 99;
  plan.kl_samples = 2;

  for (const Objective o : {Objective::sft, Objective::uft_sft}) {
    TrainingConfig cfg;
    cfg.objective = o;
    cfg.steps = 300;
    cfg.batch_size = 16;
    cfg.learning_rate = 3e-3;
    const StageResult r = train_stage(base, ref, data, cfg);
    const EvalReport rep = evaluate(r.model, &ref, plan, std::string(objective_name(o)));
    std::printf("%-8s loss %.4f  echo %.2f  upper %.2f  kl %.2f\n", rep.checkpoint_id.c_str(),
                r.log.records.back().loss, rep.task("echo").accuracy(), rep.task("upper").accuracy(), rep.mean_kl);
  }
}
