// SPDX-License-Identifier: Apache-2.0
//
// DPO through rank-2 adapters, then fold the adapters back into the weights
// and check the merged model is the same function.

#include <cmath>
#include <cstdio>

#include "uftlab/uftlab.hpp"

using namespace uftlab;

int main() {
  ModelConfig mc;
  mc.model_dim = 16;
  mc.context_length = 24;
  const PolicyModel base(Transformer::random(mc, 3));
  const ReferenceModel ref = snapshot_reference(base);

  std::vector<PairwiseExample> pairs;
  for (const auto& ex : tasks::instruction_data(tasks::echo(), 64, 5)) pairs.push_back({ex.prompt, ex.response, "??"});

  TrainingConfig cfg;
  cfg.objective = Objective::dpo;
  cfg.steps = 150;
  cfg.learning_rate = 1e-2;
  cfg.lora_rank = 2;
  cfg.beta = Beta(0.5);
  const StageResult r = train_stage(base, ref, pairs, cfg);
  std::printf("dpo loss %.4f -> %.4f with %zu trainable tensors\n", r.log.records.front().loss,
              r.log.records.back().loss, r.model.network().trainable().size());

  const PolicyModel merged = merge_lora(r.model);
  const Tokens probe = encode_prompt(pairs[0].prompt);
  const auto a = r.model.next_token_logits(probe), b = merged.next_token_logits(probe);
  double gap = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::abs(a[i] - b[i]));
  std::printf("merged: max logit change %.2e, dpo loss %.4f\n", gap, dpo_loss(merged, ref, pairs, cfg.beta));
  save_checkpoint("lora_dpo_merged.ckpt", merged);
}
