// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uftlab/autograd.hpp"
#include "uftlab/error.hpp"
#include "uftlab/rng.hpp"
#include "uftlab/tensor.hpp"
#include "uftlab/tokenizer.hpp"

namespace uftlab {

struct ModelConfig {
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t model_dim = 16;
  std::size_t context_length = 64;
  std::size_t vocab_size = kByteVocabSize;
  std::size_t mlp_ratio = 4;
  std::optional<std::size_t> lora_rank;

  [[nodiscard]] std::size_t head_dim() const { return model_dim / heads; }

  void validate() const {
    if (layers < 1) throw UsageError("model config: layers must be >= 1");
    if (heads < 1) throw UsageError("model config: heads must be >= 1");
    if (model_dim < 1 || model_dim % heads != 0) {
      throw UsageError("model config: model_dim must be a positive multiple of heads");
    }
    if (context_length < 2) throw UsageError("model config: context_length must be >= 2");
    if (vocab_size < 2) throw UsageError("model config: vocab_size must be >= 2");
    if (mlp_ratio < 1) throw UsageError("model config: mlp_ratio must be >= 1");
    if (lora_rank && *lora_rank < 1) throw UsageError("model config: lora_rank must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace param_names {
inline std::string layer(std::size_t l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }
inline std::string lora_a(const std::string& w) { return w + ".lora_a"; }
inline std::string lora_b(const std::string& w) { return w + ".lora_b"; }
inline constexpr const char* kAttended[] = {"wq", "wk", "wv", "wo"};
inline const std::string kRewardHead = "reward_head";
}  // namespace param_names

/// Weights of a decoder-only transformer: learned positions, pre-RMS-norm
/// blocks with causal multi-head attention and a SiLU MLP, untied output.
class Transformer {
 public:
  using ParamMap = std::map<std::string, Tensor>;

  Transformer() = default;

  /// All-zero weights (unit norm gains). Every next-token distribution is uniform.
  static Transformer zeros(const ModelConfig& config) {
    config.validate();
    Transformer net;
    net.config_ = config;
    const std::size_t d = config.model_dim, h = d * config.mlp_ratio;
    net.params_["tok_emb"] = Tensor::zeros({config.vocab_size, d});
    net.params_["pos_emb"] = Tensor::zeros({config.context_length, d});
    for (std::size_t l = 0; l < config.layers; ++l) {
      net.params_[param_names::layer(l, "ln1")] = Tensor::filled({d}, 1.0);
      for (const char* w : param_names::kAttended) net.params_[param_names::layer(l, w)] = Tensor::zeros({d, d});
      net.params_[param_names::layer(l, "ln2")] = Tensor::filled({d}, 1.0);
      net.params_[param_names::layer(l, "w1")] = Tensor::zeros({d, h});
      net.params_[param_names::layer(l, "w2")] = Tensor::zeros({h, d});
    }
    net.params_["ln_f"] = Tensor::filled({d}, 1.0);
    net.params_["w_out"] = Tensor::zeros({d, config.vocab_size});
    for (const auto& [name, _] : net.params_) net.trainable_.insert(name);
    return net;
  }

  static Transformer random(const ModelConfig& config, std::uint64_t seed) {
    Transformer net = zeros(config);
    Rng rng(seed);
    const double d = static_cast<double>(config.model_dim);
    const double residual = 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers));
    for (auto& [name, t] : net.params_) {
      double std_dev = 0.0;
      if (name == "tok_emb" || name == "pos_emb") std_dev = 0.5;
      else if (name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f") continue;
      else if (name.ends_with("w2")) std_dev = residual / std::sqrt(static_cast<double>(t.shape()[0]));
      else if (name.ends_with("wo")) std_dev = residual / std::sqrt(d);
      else std_dev = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
      for (double& v : t.mutable_data()) v = std_dev * rng.normal();
    }
    return net;
  }

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::size_t context_length() const noexcept { return config_.context_length; }
  [[nodiscard]] std::size_t vocab_size() const noexcept { return config_.vocab_size; }

  [[nodiscard]] const ParamMap& params() const noexcept { return params_; }
  [[nodiscard]] ParamMap& mutable_params() noexcept { return params_; }
  [[nodiscard]] const std::set<std::string>& trainable() const noexcept { return trainable_; }

  [[nodiscard]] const Tensor& param(const std::string& name) const {
    const auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("no parameter named '" + name + "'");
    return it->second;
  }

  [[nodiscard]] Tensor& mutable_param(const std::string& name) {
    const auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("no parameter named '" + name + "'");
    return it->second;
  }

  [[nodiscard]] bool has_param(const std::string& name) const { return params_.contains(name); }

  /// Inserts or replaces a tensor; `trainable` controls whether the
  /// optimizer may update it.
  void set_param(const std::string& name, Tensor value, bool trainable) {
    params_.insert_or_assign(name, std::move(value));
    if (trainable) trainable_.insert(name);
    else trainable_.erase(name);
  }

  void set_trainable(std::set<std::string> names) {
    for (const auto& n : names) {
      if (!params_.contains(n)) throw UsageError("no parameter named '" + n + "'");
    }
    trainable_ = std::move(names);
  }

  void set_config(const ModelConfig& config) { config_ = config; }

  [[nodiscard]] bool has_adapters() const { return params_.contains(param_names::lora_a(param_names::layer(0, "wq"))); }
  [[nodiscard]] bool has_reward_head() const { return params_.contains(param_names::kRewardHead); }

  /// Adds a zero-initialised scalar head read at the last sequence position.
  void add_reward_head() {
    if (has_reward_head()) return;
    set_param(param_names::kRewardHead, Tensor::zeros({config_.model_dim, 1}), true);
  }

  /// Logits for every position, without recording gradients.
  [[nodiscard]] Tensor forward_logits(std::span<const Token> tokens) const;

  /// Logits of the distribution over the token following `tokens`.
  [[nodiscard]] std::vector<double> next_token_logits(std::span<const Token> tokens) const;

  /// log pi(response | prompt), without recording gradients.
  [[nodiscard]] double sequence_logprob(std::span<const Token> prompt, std::span<const Token> response) const;

  friend bool operator==(const Transformer&, const Transformer&) = default;

 private:
  ModelConfig config_;
  ParamMap params_;
  std::set<std::string> trainable_;
};

/// Parameters of one Transformer placed on a tape. Trainable leaves are the
/// network's trainable set when `trainable` is true, none otherwise.
class BoundNetwork {
 public:
  BoundNetwork(const Transformer& net, Tape& tape, bool trainable) : net_(&net), tape_(&tape) {
    for (const auto& [name, value] : net.params()) {
      const bool learn = trainable && net.trainable().contains(name);
      vars_.emplace(name, ag::leaf(tape, value, learn));
    }
  }

  [[nodiscard]] const Transformer& network() const noexcept { return *net_; }
  [[nodiscard]] Tape& tape() const noexcept { return *tape_; }
  [[nodiscard]] const std::map<std::string, Var>& vars() const noexcept { return vars_; }

  [[nodiscard]] Var var(const std::string& name) const {
    const auto it = vars_.find(name);
    if (it == vars_.end()) throw UsageError("no parameter named '" + name + "'");
    return it->second;
  }

  /// Final normalised hidden states [T, D].
  [[nodiscard]] Var hidden(std::span<const Token> tokens) const {
    const ModelConfig& cfg = net_->config();
    if (tokens.empty()) throw UsageError("forward on empty token sequence");
    if (tokens.size() > cfg.context_length) throw OverflowError(tokens.size(), cfg.context_length);
    std::vector<std::size_t> ids(tokens.begin(), tokens.end());
    for (const auto id : ids) {
      if (id >= cfg.vocab_size) throw UsageError("token " + std::to_string(id) + " outside vocabulary");
    }
    std::vector<std::size_t> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;

    Var x = ag::add(ag::embed(var("tok_emb"), std::move(ids)), ag::embed(var("pos_emb"), std::move(positions)));
    const std::size_t dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const Var h = ag::rms_norm(x, var(param_names::layer(l, "ln1")));
      const Var q = project(h, param_names::layer(l, "wq"));
      const Var k = project(h, param_names::layer(l, "wk"));
      const Var v = project(h, param_names::layer(l, "wv"));
      Var attended;
      if (cfg.heads == 1) {
        attended = ag::matmul(ag::softmax(ag::attention_scores(q, k, scale), true), v);
      } else {
        std::vector<Var> heads;
        heads.reserve(cfg.heads);
        for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
          const Var qh = ag::slice_columns(q, hd * dh, dh);
          const Var kh = ag::slice_columns(k, hd * dh, dh);
          const Var vh = ag::slice_columns(v, hd * dh, dh);
          heads.push_back(ag::matmul(ag::softmax(ag::attention_scores(qh, kh, scale), true), vh));
        }
        attended = ag::concat_columns(heads);
      }
      x = ag::add(x, project(attended, param_names::layer(l, "wo")));
      const Var u = ag::matmul(ag::rms_norm(x, var(param_names::layer(l, "ln2"))), var(param_names::layer(l, "w1")));
      x = ag::add(x, ag::matmul(ag::mul(u, ag::sigmoid(u)), var(param_names::layer(l, "w2"))));
    }
    return ag::rms_norm(x, var("ln_f"));
  }

  [[nodiscard]] Var logits(std::span<const Token> tokens) const { return ag::matmul(hidden(tokens), var("w_out")); }

  /// Logits row for the last position only [1, V].
  [[nodiscard]] Var last_logits(std::span<const Token> tokens) const {
    const Var h = hidden(tokens);
    return ag::matmul(ag::embed(h, {tokens.size() - 1}), var("w_out"));
  }

  /// Sum over response tokens of log pi(token | everything before it).
  [[nodiscard]] Var sequence_logprob(std::span<const Token> prompt, std::span<const Token> response) const {
    if (prompt.empty()) throw UsageError("sequence_logprob: prompt must hold at least BOS");
    if (response.empty()) throw UsageError("sequence_logprob: empty response");
    Tokens all(prompt.begin(), prompt.end());
    all.insert(all.end(), response.begin(), response.end());
    const Var lp = ag::log_softmax(logits(all));
    std::vector<std::size_t> rows(response.size()), cols(response.size());
    for (std::size_t i = 0; i < response.size(); ++i) {
      rows[i] = prompt.size() - 1 + i;
      cols[i] = response[i];
    }
    return ag::sum(ag::gather(lp, std::move(rows), std::move(cols)));
  }

  /// Scalar reward head applied to the final position of prompt ++ response.
  [[nodiscard]] Var reward(std::span<const Token> prompt, std::span<const Token> response) const {
    if (!net_->has_reward_head()) throw NotTrainableError("network has no reward head");
    Tokens all(prompt.begin(), prompt.end());
    all.insert(all.end(), response.begin(), response.end());
    const Var h = hidden(all);
    const Var r = ag::matmul(ag::embed(h, {all.size() - 1}), var(param_names::kRewardHead));
    return ag::sum(r);
  }

 private:
  Var project(Var x, const std::string& weight) const {
    Var y = ag::matmul(x, var(weight));
    const auto a = vars_.find(param_names::lora_a(weight));
    if (a != vars_.end()) {
      y = ag::add(y, ag::matmul(ag::matmul(x, a->second), var(param_names::lora_b(weight))));
    }
    return y;
  }

  const Transformer* net_;
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

inline Tensor Transformer::forward_logits(std::span<const Token> tokens) const {
  Tape tape(false);
  return BoundNetwork(*this, tape, false).logits(tokens).value();
}

inline std::vector<double> Transformer::next_token_logits(std::span<const Token> tokens) const {
  Tape tape(false);
  return BoundNetwork(*this, tape, false).last_logits(tokens).value().values();
}

inline double Transformer::sequence_logprob(std::span<const Token> prompt, std::span<const Token> response) const {
  Tape tape(false);
  return BoundNetwork(*this, tape, false).sequence_logprob(prompt, response).item();
}

/// Trainable policy pi_theta.
class PolicyModel {
 public:
  PolicyModel() = default;
  explicit PolicyModel(Transformer net) : net_(std::move(net)) {}

  [[nodiscard]] const Transformer& network() const noexcept { return net_; }
  [[nodiscard]] Transformer& mutable_network() noexcept { return net_; }
  [[nodiscard]] const ModelConfig& config() const noexcept { return net_.config(); }

  [[nodiscard]] std::size_t context_length() const noexcept { return net_.context_length(); }
  [[nodiscard]] std::vector<double> next_token_logits(std::span<const Token> tokens) const {
    return net_.next_token_logits(tokens);
  }

  friend bool operator==(const PolicyModel&, const PolicyModel&) = default;

 private:
  Transformer net_;
};

/// Frozen snapshot pi_ref. Shares one immutable copy of the weights.
class ReferenceModel {
 public:
  explicit ReferenceModel(Transformer net) : net_(std::make_shared<const Transformer>(std::move(net))) {}

  [[nodiscard]] const Transformer& network() const noexcept { return *net_; }
  [[nodiscard]] const ModelConfig& config() const noexcept { return net_->config(); }
  [[nodiscard]] std::size_t context_length() const noexcept { return net_->context_length(); }
  [[nodiscard]] std::vector<double> next_token_logits(std::span<const Token> tokens) const {
    return net_->next_token_logits(tokens);
  }

 private:
  std::shared_ptr<const Transformer> net_;
};

inline ReferenceModel snapshot_reference(const PolicyModel& model) { return ReferenceModel(model.network()); }

template <typename M>
concept LanguageModel = requires(const M& m, std::span<const Token> tokens) {
  { m.next_token_logits(tokens) } -> std::convertible_to<std::vector<double>>;
  { m.context_length() } -> std::convertible_to<std::size_t>;
};

template <typename M>
concept HasNetwork = requires(const M& m) {
  { m.network() } -> std::convertible_to<const Transformer&>;
};

/// Attaches adapter pairs (A random, B zero) to every attention projection
/// and restricts training to them.
inline PolicyModel apply_lora(PolicyModel model, std::uint64_t seed) {
  Transformer& net = model.mutable_network();
  const auto rank = net.config().lora_rank;
  if (!rank) throw UsageError("apply_lora: lora_rank is not set in the model config");
  if (net.has_adapters()) throw AdapterStateError("apply_lora: adapters already applied");
  Rng rng(seed);
  const std::size_t d = net.config().model_dim;
  std::set<std::string> adapters;
  for (std::size_t l = 0; l < net.config().layers; ++l) {
    for (const char* w : param_names::kAttended) {
      const std::string base = param_names::layer(l, w);
      Tensor a = Tensor::zeros({d, *rank});
      const double std_dev = 1.0 / std::sqrt(static_cast<double>(d));
      for (double& v : a.mutable_data()) v = std_dev * rng.normal();
      net.set_param(param_names::lora_a(base), std::move(a), true);
      net.set_param(param_names::lora_b(base), Tensor::zeros({*rank, d}), true);
      adapters.insert(param_names::lora_a(base));
      adapters.insert(param_names::lora_b(base));
    }
  }
  if (net.has_reward_head()) adapters.insert(param_names::kRewardHead);
  net.set_trainable(std::move(adapters));
  return model;
}

/// Folds W += A B into every adapted projection and drops the adapters.
inline PolicyModel merge_lora(PolicyModel model) {
  Transformer& net = model.mutable_network();
  if (!net.has_adapters()) throw AdapterStateError("merge_lora: no adapters applied");
  auto& params = net.mutable_params();
  for (std::size_t l = 0; l < net.config().layers; ++l) {
    for (const char* w : param_names::kAttended) {
      const std::string base = param_names::layer(l, w);
      const Tensor& a = params.at(param_names::lora_a(base));
      const Tensor& b = params.at(param_names::lora_b(base));
      const Tensor delta = forward(OpKind::matmul, {&a, &b});
      Tensor& weight = params.at(base);
      for (std::size_t i = 0; i < weight.size(); ++i) weight[i] += delta[i];
      params.erase(param_names::lora_a(base));
      params.erase(param_names::lora_b(base));
    }
  }
  std::set<std::string> all;
  for (const auto& [name, _] : params) all.insert(name);
  net.set_trainable(std::move(all));
  return model;
}

/// Autoregressive sampling until EOS (kept in the output) or `max_len` tokens.
template <LanguageModel M>
Tokens sample_response(const M& model, std::span<const Token> prompt, std::size_t max_len, double temperature,
                       std::uint64_t seed) {
  if (!(temperature > 0.0)) throw UsageError("sample_response: temperature must be positive");
  if (max_len < 1) throw UsageError("sample_response: max_len must be >= 1");
  if (prompt.size() + max_len > model.context_length()) {
    throw OverflowError(prompt.size() + max_len, model.context_length());
  }
  Rng rng(seed);
  Tokens context(prompt.begin(), prompt.end());
  Tokens out;
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::vector<double> logits = model.next_token_logits(context);
    std::vector<double> probs(logits.size());
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      probs[i] = std::exp((logits[i] - peak) / temperature);
      total += probs[i];
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    Token pick = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] == 0.0) continue;
      acc += probs[i];
      pick = static_cast<Token>(i);
      if (u < acc) break;
    }
    out.push_back(pick);
    context.push_back(pick);
    if (pick == special::kEos) break;
  }
  return out;
}

/// Argmax decoding (lowest id wins ties).
template <LanguageModel M>
Tokens greedy_response(const M& model, std::span<const Token> prompt, std::size_t max_len) {
  if (max_len < 1) throw UsageError("greedy_response: max_len must be >= 1");
  if (prompt.size() + max_len > model.context_length()) {
    throw OverflowError(prompt.size() + max_len, model.context_length());
  }
  Tokens context(prompt.begin(), prompt.end());
  Tokens out;
  for (std::size_t step = 0; step < max_len; ++step) {
    const std::vector<double> logits = model.next_token_logits(context);
    const auto pick = static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(pick);
    context.push_back(pick);
    if (pick == special::kEos) break;
  }
  return out;
}

}  // namespace uftlab
