// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "uftlab/autograd.hpp"
#include "uftlab/checkpoint.hpp"
#include "uftlab/datasets.hpp"
#include "uftlab/error.hpp"
#include "uftlab/model.hpp"
#include "uftlab/objectives.hpp"
#include "uftlab/rng.hpp"
#include "uftlab/tokenizer.hpp"

namespace uftlab {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamParams&, const AdamParams&) = default;
};

enum class Objective { sft, dpo, una, uft_sft, reward_model };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::sft: return "sft";
    case Objective::dpo: return "dpo";
    case Objective::una: return "una";
    case Objective::uft_sft: return "uft-sft";
    case Objective::reward_model: return "reward-model";
  }
  return "?";
}

inline Objective parse_objective(std::string_view name) {
  for (const Objective o : {Objective::sft, Objective::dpo, Objective::una, Objective::uft_sft, Objective::reward_model}) {
    if (objective_name(o) == name) return o;
  }
  throw UsageError("unknown objective '" + std::string(name) + "'");
}

inline Schema required_schema(Objective o) {
  switch (o) {
    case Objective::sft:
    case Objective::uft_sft: return Schema::instruction;
    case Objective::dpo:
    case Objective::reward_model: return Schema::pairwise;
    case Objective::una: return Schema::scored;
  }
  return Schema::scored;
}

struct TrainingConfig {
  Objective objective = Objective::sft;
  Beta beta{0.1};
  GFunction g = GFunction::sigmoid_mse;
  double learning_rate = 1e-3;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  // 0 leaves the step count as the only limit.
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  AdamParams adam;
  std::optional<std::size_t> lora_rank;
  // Global L2 norm cap; 0 disables clipping.
  double grad_clip = 1.0;

  void validate() const {
    if (steps < 1) throw UsageError("training config: steps must be > 0");
    if (batch_size < 1) throw UsageError("training config: batch_size must be > 0");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw UsageError("training config: learning_rate must be finite and >= 0");
    }
    if (!(grad_clip >= 0.0)) throw UsageError("training config: grad_clip must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw UsageError("training config: adam betas must lie in [0, 1)");
    }
    if (!(adam.epsilon > 0.0)) throw UsageError("training config: adam epsilon must be > 0");
    if (lora_rank && *lora_rank < 1) throw UsageError("training config: lora rank must be >= 1");
  }

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double mean_implicit_reward = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct StageSummary {
  std::string name;
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  friend bool operator==(const StageSummary&, const StageSummary&) = default;
};

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct MetricsLog {
  std::vector<StepRecord> records;
  std::vector<StageSummary> stages;

  void append(const StepRecord& r) {
    if (!records.empty() && r.step <= records.back().step) {
      throw UsageError("metrics log: steps must be strictly increasing");
    }
    records.push_back(r);
  }

  [[nodiscard]] std::string to_csv() const {
    std::string out = "step,loss,mean_implicit_reward,grad_norm,lr\n";
    for (const auto& r : records) {
      out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.mean_implicit_reward) + ',' +
             format_double(r.grad_norm) + ',' + format_double(r.lr) + '\n';
    }
    return out;
  }

  [[nodiscard]] std::string summary_csv() const {
    std::string out = "stage,steps,initial_loss,final_loss\n";
    for (const auto& s : stages) {
      out += s.name + ',' + std::to_string(s.steps) + ',' + format_double(s.initial_loss) + ',' +
             format_double(s.final_loss) + '\n';
    }
    return out;
  }

  friend bool operator==(const MetricsLog&, const MetricsLog&) = default;
};

/// Adam moments for every trainable parameter plus the update count.
struct OptimizerState {
  std::size_t step = 0;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

inline Container to_container(const OptimizerState& state) {
  Container c;
  c.kind = "optimizer";
  c.meta["step"] = std::to_string(state.step);
  for (const auto& [name, t] : state.m) c.tensors["m/" + name] = t;
  for (const auto& [name, t] : state.v) c.tensors["v/" + name] = t;
  return c;
}

inline OptimizerState optimizer_from_container(const Container& c) {
  if (c.kind != "optimizer") throw IoError("checkpoint holds '" + c.kind + "', expected optimizer state");
  OptimizerState s;
  s.step = detail::meta_size(c, "step");
  for (const auto& [key, t] : c.tensors) {
    if (key.starts_with("m/")) s.m.emplace(key.substr(2), t);
    else if (key.starts_with("v/")) s.v.emplace(key.substr(2), t);
    else throw IoError("unexpected optimizer tensor '" + key + "'");
  }
  return s;
}

/// Called after every update; returning false stops the stage early.
using StepCallback = std::function<bool(const StepRecord&, const PolicyModel&)>;

inline double global_grad_norm(const Gradients& grads, const BoundNetwork& bound) {
  double sq = 0.0;
  for (const auto& name : bound.network().trainable()) {
    for (const double g : grads.at(bound.var(name).id()).data()) sq += g * g;
  }
  return std::sqrt(sq);
}

/// One bias-corrected Adam update of every trainable parameter of `net`,
/// with gradients multiplied by `clip` first.
inline void adam_step(Transformer& net, const Gradients& grads, const BoundNetwork& bound, OptimizerState& state,
                      const AdamParams& a, double lr, double clip) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(a.beta1, t);
  const double bc2 = 1.0 - std::pow(a.beta2, t);
  for (const auto& name : net.trainable()) {
    const auto gd = grads.at(bound.var(name).id()).data();
    Tensor& p = net.mutable_param(name);
    auto m = state.m.try_emplace(name, Tensor::zeros(p.shape())).first->second.mutable_data();
    auto v = state.v.try_emplace(name, Tensor::zeros(p.shape())).first->second.mutable_data();
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = gd[i] * clip;
      m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * gi;
      v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * gi * gi;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + a.epsilon);
    }
  }
}

inline double clip_factor(double norm, double limit) { return (limit > 0.0 && norm > limit) ? limit / norm : 1.0; }

/// One optimisation stage. Examples are pre-encoded; reference log-probs are
/// computed once per sequence on first use and reused.
class Trainer {
 public:
  Trainer(PolicyModel model, ReferenceModel reference, const RecordList& data, TrainingConfig config,
          OptimizerState state = {})
      : model_(std::move(model)), reference_(std::move(reference)), config_(std::move(config)), state_(std::move(state)) {
    config_.validate();
    const Schema want = required_schema(config_.objective);
    const Schema got = schema_of(data);
    if (want != got) {
      throw DataError(DataError::Kind::schema_mismatch, 0, "",
                      std::string(objective_name(config_.objective)) + " needs " + std::string(schema_name(want)) +
                          " records, got " + std::string(schema_name(got)));
    }
    if (reference_.config().vocab_size != model_.config().vocab_size ||
        reference_.context_length() != model_.context_length()) {
      throw UsageError("reference model shape differs from the policy");
    }

    Transformer& net = model_.mutable_network();
    if (config_.objective == Objective::reward_model) net.add_reward_head();
    if (config_.lora_rank && !net.has_adapters()) {
      ModelConfig cfg = net.config();
      cfg.lora_rank = config_.lora_rank;
      net.set_config(cfg);
      model_ = apply_lora(std::move(model_), mix_seed(config_.seed, 0x10a));
    }
    if (model_.network().trainable().empty()) throw NotTrainableError("model has no trainable parameters");

    encode(data);
    if (items_ == 0) throw EmptyBatchError("train_stage");
    reference_lp_.assign(sequences_.size(), std::nullopt);

    total_steps_ = config_.steps;
    if (config_.epochs > 0) {
      const std::size_t cap = (config_.epochs * items_ + config_.batch_size - 1) / config_.batch_size;
      total_steps_ = std::min(total_steps_, cap);
    }
    if (state_.step > total_steps_) throw UsageError("optimizer state is past the end of this stage");
  }

  [[nodiscard]] bool finished() const noexcept { return state_.step >= total_steps_; }
  [[nodiscard]] std::size_t total_steps() const noexcept { return total_steps_; }
  [[nodiscard]] std::size_t steps_done() const noexcept { return state_.step; }
  [[nodiscard]] const PolicyModel& model() const noexcept { return model_; }
  [[nodiscard]] PolicyModel take_model() { return std::move(model_); }
  [[nodiscard]] const ReferenceModel& reference() const noexcept { return reference_; }
  [[nodiscard]] const OptimizerState& optimizer_state() const noexcept { return state_; }
  [[nodiscard]] const TrainingConfig& config() const noexcept { return config_; }

  /// Example indices of the minibatch for update `step` (0-based). Each epoch
  /// is an independent seeded permutation; batches may straddle epochs.
  [[nodiscard]] std::vector<std::size_t> batch_indices(std::size_t step) {
    std::vector<std::size_t> out;
    out.reserve(config_.batch_size);
    for (std::size_t i = 0; i < config_.batch_size; ++i) {
      const std::size_t pos = step * config_.batch_size + i;
      const std::size_t epoch = pos / items_;
      if (epoch != order_epoch_ || order_.empty()) {
        order_.resize(items_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        Rng rng(mix_seed(config_.seed, epoch));
        rng.shuffle(std::span<std::size_t>(order_));
        order_epoch_ = epoch;
      }
      out.push_back(order_[pos % items_]);
    }
    return out;
  }

  StepRecord step() {
    if (finished()) throw UsageError("train_stage: no steps left");
    const std::vector<std::size_t> batch = batch_indices(state_.step);
    const Transformer& net = model_.network();
    const double beta = config_.beta.value();

    Tape tape(true);
    const BoundNetwork bound(net, tape, true);
    std::vector<Var> outputs;
    std::vector<double> ref;
    std::vector<double> scores;
    for (const std::size_t item : batch) {
      for (std::size_t s = first_[item]; s < first_[item + 1]; ++s) {
        const EncodedExample& ex = sequences_[s];
        if (config_.objective == Objective::reward_model) {
          outputs.push_back(bound.reward(ex.prompt, ex.response));
        } else {
          outputs.push_back(bound.sequence_logprob(ex.prompt, ex.response));
        }
        if (uses_reference()) ref.push_back(reference_logprob(s));
        scores.push_back(scores_[s]);
      }
    }

    Var loss;
    double mean_reward = 0.0;
    switch (config_.objective) {
      case Objective::sft:
        loss = ag::scale(ag::mean(ag::stack(outputs)), -1.0);
        break;
      case Objective::uft_sft:
        loss = objectives::feedback_loss_from_logprobs(outputs, ref, scores, config_.beta, GFunction::sigmoid_mse);
        break;
      case Objective::una:
        loss = objectives::feedback_loss_from_logprobs(outputs, ref, scores, config_.beta, config_.g);
        break;
      case Objective::dpo:
        loss = objectives::dpo_loss_from_logprobs(outputs, ref, config_.beta);
        break;
      case Objective::reward_model: {
        std::vector<Var> terms;
        for (std::size_t i = 0; i + 1 < outputs.size(); i += 2) {
          terms.push_back(ag::scale(ag::log_sigmoid(ag::sub(outputs[i], outputs[i + 1])), -1.0));
        }
        loss = ag::mean(ag::stack(terms));
        break;
      }
    }
    // The reward column holds implicit rewards, or head outputs when training a reward model.
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const double o = outputs[i].item();
      mean_reward += uses_reference() ? beta * (o - ref[i]) : (config_.objective == Objective::sft ? 0.0 : o);
    }
    mean_reward /= static_cast<double>(outputs.size());

    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) throw NonFiniteLossError(state_.step + 1, loss_value);

    const Gradients grads = tape.backward(loss.id());
    const double norm = global_grad_norm(grads, bound);
    if (!std::isfinite(norm)) throw NonFiniteLossError(state_.step + 1, norm);
    adam_step(model_.mutable_network(), grads, bound, state_, config_.adam, config_.learning_rate,
              clip_factor(norm, config_.grad_clip));

    StepRecord rec;
    rec.step = state_.step;
    rec.loss = loss_value;
    rec.mean_implicit_reward = mean_reward;
    rec.grad_norm = norm;
    rec.lr = config_.learning_rate;
    return rec;
  }

  MetricsLog run(const StepCallback& on_step = {}, std::string stage_name = "stage") {
    MetricsLog log;
    while (!finished()) {
      const StepRecord rec = step();
      log.append(rec);
      if (on_step && !on_step(rec, model_)) break;
    }
    StageSummary summary;
    summary.name = std::move(stage_name);
    summary.steps = log.records.size();
    if (!log.records.empty()) {
      summary.initial_loss = log.records.front().loss;
      summary.final_loss = log.records.back().loss;
    }
    log.stages.push_back(summary);
    return log;
  }

  /// Reference log-prob of the s-th encoded sequence.
  double reference_logprob(std::size_t s) {
    auto& slot = reference_lp_[s];
    if (!slot) slot = reference_.network().sequence_logprob(sequences_[s].prompt, sequences_[s].response);
    return *slot;
  }

 private:
  [[nodiscard]] bool uses_reference() const {
    return config_.objective == Objective::dpo || config_.objective == Objective::una ||
           config_.objective == Objective::uft_sft;
  }

  void encode(const RecordList& data) {
    const std::size_t ctx = model_.context_length();
    first_.push_back(0);
    auto add = [&](const std::string& prompt, const std::string& response, double score) {
      sequences_.push_back(encode_example(prompt, response, ctx));
      scores_.push_back(score);
    };
    std::visit(
        [&](const auto& list) {
          using T = typename std::decay_t<decltype(list)>::value_type;
          for (const auto& ex : list) {
            if constexpr (std::is_same_v<T, InstructionExample>) {
              add(ex.prompt, ex.response, 1.0);
            } else if constexpr (std::is_same_v<T, PairwiseExample>) {
              add(ex.prompt, ex.chosen, 1.0);
              add(ex.prompt, ex.rejected, 0.0);
            } else if constexpr (std::is_same_v<T, ScoredExample>) {
              if (!(ex.score >= 0.0 && ex.score <= 1.0)) throw ScoreRangeError(ex.score);
              add(ex.prompt, ex.response, ex.score);
            }
            first_.push_back(sequences_.size());
          }
        },
        data);
    items_ = first_.size() - 1;
  }

  PolicyModel model_;
  ReferenceModel reference_;
  TrainingConfig config_;
  OptimizerState state_;

  std::vector<EncodedExample> sequences_;
  std::vector<double> scores_;
  std::vector<std::size_t> first_;
  std::size_t items_ = 0;
  std::vector<std::optional<double>> reference_lp_;
  std::size_t total_steps_ = 0;

  std::vector<std::size_t> order_;
  std::size_t order_epoch_ = 0;
};

struct StageResult {
  PolicyModel model;
  MetricsLog log;
};

inline StageResult train_stage(PolicyModel model, const ReferenceModel& reference, const RecordList& data,
                               const TrainingConfig& config, const StepCallback& on_step = {}) {
  Trainer trainer(std::move(model), reference, data, config);
  MetricsLog log = trainer.run(on_step);
  return {trainer.take_model(), std::move(log)};
}

// ---- toy pretraining ----

struct PretrainConfig {
  double learning_rate = 3e-3;
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  // Window length in bytes; 0 uses context_length - 1.
  std::size_t window = 0;
  std::uint64_t seed = 0;
  AdamParams adam;
  double grad_clip = 1.0;
};

/// Next-token cross-entropy over windows drawn from a byte corpus. Each
/// window is predicted after a BOS token. Loss is the mean per-token NLL.
inline StageResult pretrain(PolicyModel model, std::string_view corpus, const PretrainConfig& config) {
  const std::size_t ctx = model.context_length();
  const std::size_t window = config.window == 0 ? ctx - 1 : config.window;
  if (window + 1 > ctx) throw OverflowError(window + 1, ctx);
  if (corpus.size() < window) {
    throw DataError(DataError::Kind::empty_file, 0, "", "corpus shorter than one window");
  }
  if (config.steps < 1 || config.batch_size < 1) throw UsageError("pretrain: steps and batch_size must be > 0");

  const std::size_t starts = corpus.size() - window + 1;
  Rng rng(mix_seed(config.seed, 0x9e7));
  const Tokens bos{special::kBos};
  OptimizerState state;
  MetricsLog log;
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t step = 0; step < config.steps; ++step) {
    Tape tape(true);
    const BoundNetwork bound(model.network(), tape, true);
    std::vector<Var> terms;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::size_t at = rng.below(starts);
      Tokens ys;
      ys.reserve(window);
      for (std::size_t i = 0; i < window; ++i) ys.push_back(static_cast<unsigned char>(corpus[at + i]));
      terms.push_back(bound.sequence_logprob(bos, ys));
    }
    const Var loss = ag::scale(ag::mean(ag::stack(terms)), -inv);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NonFiniteLossError(step + 1, value);
    const Gradients grads = tape.backward(loss.id());
    const double norm = global_grad_norm(grads, bound);
    if (!std::isfinite(norm)) throw NonFiniteLossError(step + 1, norm);
    adam_step(model.mutable_network(), grads, bound, state, config.adam, config.learning_rate,
              clip_factor(norm, config.grad_clip));
    log.append({step + 1, value, 0.0, norm, config.learning_rate});
  }
  log.stages.push_back({"pretrain", log.records.size(), log.records.front().loss, log.records.back().loss});
  return {std::move(model), std::move(log)};
}

// ---- sweeps ----

struct SweepPoint {
  double learning_rate = 0.0;
  double beta = 0.0;
};

inline const std::vector<double>& default_learning_rates() {
  static const std::vector<double> lrs{3e-6, 1e-5, 3e-5, 1e-4, 3e-4};
  return lrs;
}

inline const std::vector<double>& default_betas() {
  static const std::vector<double> betas{0.01, 0.03, 0.1, 0.3};
  return betas;
}

/// Cartesian learning-rate x beta grid, learning rate outermost.
inline std::vector<TrainingConfig> sweep_configs(const TrainingConfig& base,
                                                 std::span<const double> lrs = default_learning_rates(),
                                                 std::span<const double> betas = default_betas()) {
  std::vector<TrainingConfig> out;
  for (const double lr : lrs) {
    for (const double b : betas) {
      TrainingConfig c = base;
      c.learning_rate = lr;
      c.beta = Beta(b);
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace uftlab
