// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "uftlab/autograd.hpp"
#include "uftlab/datasets.hpp"
#include "uftlab/grad_check.hpp"
#include "uftlab/model.hpp"
#include "uftlab/objectives.hpp"
#include "uftlab/rng.hpp"

namespace uftlab {

using LossBuilder = std::function<Var(const BoundNetwork&)>;

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_param;
};

struct GradCheckOptions {
  // Coordinates probed per tensor; tensors at most this size are probed fully.
  std::size_t coords_per_param = 32;
  double epsilon = 1e-5;
  std::uint64_t seed = 0;
};

/// Tape gradients of a network loss against central differences in the
/// network's trainable parameters.
inline GradCheckResult check_network_gradients(std::string name, const Transformer& net, const LossBuilder& build,
                                               const GradCheckOptions& opt = {}) {
  Tape tape(true);
  const BoundNetwork bound(net, tape, true);
  const Var loss = build(bound);
  const Gradients grads = tape.backward(loss.id());

  auto evaluate = [&](const Transformer& probe) {
    Tape t(false);
    return build(BoundNetwork(probe, t, false)).item();
  };

  GradCheckResult out;
  out.name = std::move(name);
  Rng rng(mix_seed(opt.seed, 0x6c));
  Transformer probe = net;
  for (const auto& param : net.trainable()) {
    const Tensor& analytic = grads.at(bound.var(param).id());
    std::vector<std::size_t> coords(analytic.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > opt.coords_per_param) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(opt.coords_per_param);
    }
    Tensor& w = probe.mutable_param(param);
    for (const std::size_t i : coords) {
      const double original = w[i];
      w[i] = original + opt.epsilon;
      const double up = evaluate(probe);
      w[i] = original - opt.epsilon;
      const double down = evaluate(probe);
      w[i] = original;
      const double err = relative_error(analytic[i], (up - down) / (2.0 * opt.epsilon));
      ++out.coordinates;
      if (err > out.max_error) {
        out.max_error = err;
        out.worst_param = param;
      }
    }
  }
  return out;
}

namespace detail {

inline std::string random_text(Rng& rng, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<char>('a' + rng.below(26));
  return s;
}

/// Random weights at a larger scale than the training init so that every
/// gradient coordinate is far from zero.
inline Transformer probe_network(const ModelConfig& cfg, std::uint64_t seed, double gain) {
  Transformer net = Transformer::random(cfg, seed);
  Rng rng(mix_seed(seed, 0x9a));
  for (auto& [name, t] : net.mutable_params()) {
    for (double& v : t.mutable_data()) v = v * gain + (name.find("ln") != std::string::npos ? 0.1 * rng.normal() : 0.0);
  }
  return net;
}

}  // namespace detail

/// Every objective on a 1-layer, dim-16 byte model with a distinct random
/// reference, so implicit rewards sit away from zero.
inline std::vector<GradCheckResult> gradcheck_suite(const GradCheckOptions& opt = {}) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.model_dim = 16;
  cfg.context_length = 16;
  Transformer net = detail::probe_network(cfg, mix_seed(opt.seed, 1), 1.5);
  const ReferenceModel reference(detail::probe_network(cfg, mix_seed(opt.seed, 2), 1.5));

  Rng rng(mix_seed(opt.seed, 3));
  std::vector<InstructionExample> inst;
  std::vector<PairwiseExample> pairs;
  std::vector<ScoredExample> scored;
  for (int i = 0; i < 2; ++i) {
    const std::string p = detail::random_text(rng, 3);
    inst.push_back({p, detail::random_text(rng, 3)});
    pairs.push_back({p, detail::random_text(rng, 3), detail::random_text(rng, 2)});
    scored.push_back({p, detail::random_text(rng, 3), 0.2 + 0.6 * rng.uniform(), Origin::native_score});
  }
  const Beta beta(0.5);

  std::vector<GradCheckResult> out;
  out.push_back(check_network_gradients("sft_loss", net, [&](const BoundNetwork& b) {
    return objectives::sft_loss(b, std::span<const InstructionExample>(inst));
  }, opt));
  out.push_back(check_network_gradients("dpo_loss", net, [&](const BoundNetwork& b) {
    return objectives::dpo_loss(b, reference, std::span<const PairwiseExample>(pairs), beta);
  }, opt));
  for (const GFunction g : {GFunction::sigmoid_mse, GFunction::raw_mse, GFunction::bce}) {
    out.push_back(check_network_gradients("una_feedback_loss/" + std::string(g_name(g)), net,
                                          [&, g](const BoundNetwork& b) {
      return objectives::una_feedback_loss(b, reference, std::span<const ScoredExample>(scored), beta, g);
    }, opt));
  }
  out.push_back(check_network_gradients("uft_sft_loss", net, [&](const BoundNetwork& b) {
    return objectives::uft_sft_loss(b, reference, std::span<const InstructionExample>(inst), beta);
  }, opt));
  out.push_back(check_network_gradients("pairwise_una_loss", net, [&](const BoundNetwork& b) {
    return objectives::pairwise_una_loss(b, reference, std::span<const PairwiseExample>(pairs), beta,
                                         GFunction::sigmoid_mse);
  }, opt));

  Transformer head = net;
  head.add_reward_head();
  for (double& v : head.mutable_param(param_names::kRewardHead).mutable_data()) v = rng.normal();
  out.push_back(check_network_gradients("reward_model_loss", head, [&](const BoundNetwork& b) {
    return objectives::reward_model_loss(b, std::span<const PairwiseExample>(pairs));
  }, opt));

  ModelConfig lora_cfg = cfg;
  lora_cfg.lora_rank = 2;
  Transformer lora_net = net;
  lora_net.set_config(lora_cfg);
  PolicyModel adapted = apply_lora(PolicyModel(lora_net), mix_seed(opt.seed, 4));
  for (auto& [name, t] : adapted.mutable_network().mutable_params()) {
    if (name.ends_with(".lora_b")) {
      for (double& v : t.mutable_data()) v = 0.3 * rng.normal();
    }
  }
  out.push_back(check_network_gradients("uft_sft_loss/lora", adapted.network(), [&](const BoundNetwork& b) {
    return objectives::uft_sft_loss(b, reference, std::span<const InstructionExample>(inst), beta);
  }, opt));
  return out;
}

}  // namespace uftlab
