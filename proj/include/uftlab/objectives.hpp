// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "uftlab/autograd.hpp"
#include "uftlab/datasets.hpp"
#include "uftlab/error.hpp"
#include "uftlab/model.hpp"
#include "uftlab/rng.hpp"
#include "uftlab/tokenizer.hpp"

namespace uftlab {

/// KL trade-off coefficient; strictly positive.
class Beta {
 public:
  explicit Beta(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) throw UsageError("beta must be a positive finite number");
  }
  [[nodiscard]] double value() const noexcept { return value_; }
  friend bool operator==(const Beta&, const Beta&) = default;

 private:
  double value_;
};

/// Difference measure between the implicit reward and an explicit score.
enum class GFunction { sigmoid_mse, raw_mse, bce };

inline std::string_view g_name(GFunction g) {
  switch (g) {
    case GFunction::sigmoid_mse: return "sigmoid-mse";
    case GFunction::raw_mse: return "raw-mse";
    case GFunction::bce: return "bce";
  }
  return "?";
}

inline GFunction parse_g(std::string_view name) {
  for (const GFunction g : {GFunction::sigmoid_mse, GFunction::raw_mse, GFunction::bce}) {
    if (g_name(g) == name) return g;
  }
  throw UsageError("unknown g function '" + std::string(name) + "'");
}

/// Scores are clamped to this margin before taking a logit in raw-mse.
inline constexpr double kRawMseClamp = 1e-6;

inline double score_logit(double score) {
  const double s = std::clamp(score, kRawMseClamp, 1.0 - kRawMseClamp);
  return std::log(s) - std::log1p(-s);
}

struct ImplicitRewardValue {
  double value = 0.0;
  Beta beta{1.0};
  double policy_logprob = 0.0;
  double reference_logprob = 0.0;
};

/// r(x, y) = beta * (log pi_theta(y|x) - log pi_ref(y|x)).
template <HasNetwork P, HasNetwork R>
ImplicitRewardValue implicit_reward(const P& policy, const R& reference, std::span<const Token> prompt,
                                    std::span<const Token> response, Beta beta) {
  ImplicitRewardValue out;
  out.beta = beta;
  out.policy_logprob = policy.network().sequence_logprob(prompt, response);
  out.reference_logprob = reference.network().sequence_logprob(prompt, response);
  out.value = beta.value() * (out.policy_logprob - out.reference_logprob);
  return out;
}

inline ImplicitRewardValue implicit_reward_from_logprobs(double policy_logprob, double reference_logprob, Beta beta) {
  return {beta.value() * (policy_logprob - reference_logprob), beta, policy_logprob, reference_logprob};
}

/// Explicit reward r_phi: a pure scorer, or a network with a reward head.
class RewardFunction {
 public:
  using Scorer = std::function<double(std::span<const Token> prompt, std::span<const Token> response)>;

  static RewardFunction stub(Scorer scorer) { return RewardFunction(std::move(scorer)); }
  static RewardFunction head(Transformer net) {
    if (!net.has_reward_head()) throw UsageError("reward head network has no head parameter");
    return RewardFunction(std::make_shared<const Transformer>(std::move(net)));
  }

  [[nodiscard]] bool is_trainable() const noexcept { return std::holds_alternative<HeadPtr>(impl_); }

  [[nodiscard]] const Transformer& network() const {
    if (!is_trainable()) throw NotTrainableError("stub scorer has no network");
    return *std::get<HeadPtr>(impl_);
  }

  [[nodiscard]] double operator()(std::span<const Token> prompt, std::span<const Token> response) const {
    if (const auto* s = std::get_if<Scorer>(&impl_)) return (*s)(prompt, response);
    Tape tape(false);
    return BoundNetwork(*std::get<HeadPtr>(impl_), tape, false).reward(prompt, response).item();
  }

 private:
  using HeadPtr = std::shared_ptr<const Transformer>;
  explicit RewardFunction(Scorer s) : impl_(std::move(s)) {}
  explicit RewardFunction(HeadPtr h) : impl_(std::move(h)) {}
  std::variant<Scorer, HeadPtr> impl_;
};

/// Deterministic scorer in [0, 1] from a hash of the token sequences.
inline RewardFunction::Scorer hash_scorer(std::uint64_t salt) {
  return [salt](std::span<const Token> prompt, std::span<const Token> response) {
    std::uint64_t h = mix_seed(salt, 0);
    for (const Token t : prompt) h = mix_seed(h, t);
    h = mix_seed(h, 0xffffffffULL);
    for (const Token t : response) h = mix_seed(h, t);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  };
}

namespace objectives {

inline void require_batch(std::size_t n, const char* where) {
  if (n == 0) throw EmptyBatchError(where);
}

inline void require_scores(std::span<const double> scores) {
  for (const double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) throw ScoreRangeError(s);
  }
}

template <typename Range, typename F>
std::vector<EncodedExample> encode_all(const Range& batch, std::size_t context, F&& response_of) {
  std::vector<EncodedExample> out;
  out.reserve(std::size(batch));
  for (const auto& ex : batch) out.push_back(encode_example(ex.prompt, response_of(ex), context));
  return out;
}

inline std::vector<EncodedExample> encode_batch(std::span<const InstructionExample> batch, std::size_t context) {
  return encode_all(batch, context, [](const InstructionExample& e) -> const std::string& { return e.response; });
}

inline std::vector<EncodedExample> encode_batch(std::span<const ScoredExample> batch, std::size_t context) {
  return encode_all(batch, context, [](const ScoredExample& e) -> const std::string& { return e.response; });
}

struct EncodedPair {
  EncodedExample chosen;
  EncodedExample rejected;
};

inline std::vector<EncodedPair> encode_pairs(std::span<const PairwiseExample> batch, std::size_t context) {
  std::vector<EncodedPair> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) {
    out.push_back({encode_example(ex.prompt, ex.chosen, context), encode_example(ex.prompt, ex.rejected, context)});
  }
  return out;
}

inline double reference_logprob(const Transformer& reference, const EncodedExample& ex) {
  return reference.sequence_logprob(ex.prompt, ex.response);
}

inline std::vector<double> reference_logprobs(const Transformer& reference, std::span<const EncodedExample> xs) {
  std::vector<double> out;
  out.reserve(xs.size());
  for (const auto& ex : xs) out.push_back(reference_logprob(reference, ex));
  return out;
}

/// Implicit reward as a graph node.
inline Var implicit_reward_var(Var policy_logprob, double reference_logprob, Beta beta) {
  return ag::scale(ag::shift(policy_logprob, -reference_logprob), beta.value());
}

/// g(score, r) for one example.
inline Var feedback_term(Var reward, double score, GFunction g) {
  switch (g) {
    case GFunction::sigmoid_mse: return ag::square(ag::shift(ag::sigmoid(reward), -score));
    case GFunction::raw_mse: return ag::square(ag::shift(reward, -score_logit(score)));
    case GFunction::bce: {
      const Var pos = ag::scale(ag::log_sigmoid(reward), -score);
      const Var neg = ag::scale(ag::log_sigmoid(ag::scale(reward, -1.0)), -(1.0 - score));
      return ag::add(pos, neg);
    }
  }
  throw UsageError("unknown g function");
}

/// Mean feedback loss given per-example policy log-prob nodes.
inline Var feedback_loss_from_logprobs(std::span<const Var> policy_logprobs, std::span<const double> reference_lp,
                                       std::span<const double> scores, Beta beta, GFunction g) {
  require_batch(policy_logprobs.size(), "una_feedback_loss");
  require_scores(scores);
  std::vector<Var> terms;
  terms.reserve(policy_logprobs.size());
  for (std::size_t i = 0; i < policy_logprobs.size(); ++i) {
    terms.push_back(feedback_term(implicit_reward_var(policy_logprobs[i], reference_lp[i], beta), scores[i], g));
  }
  return ag::mean(ag::stack(terms));
}

// ---- graph-level losses (trainer, gradient checks) ----

inline Var sft_loss(const BoundNetwork& policy, std::span<const EncodedExample> batch) {
  require_batch(batch.size(), "sft_loss");
  std::vector<Var> terms;
  terms.reserve(batch.size());
  for (const auto& ex : batch) terms.push_back(policy.sequence_logprob(ex.prompt, ex.response));
  return ag::scale(ag::mean(ag::stack(terms)), -1.0);
}

inline Var una_feedback_loss(const BoundNetwork& policy, std::span<const EncodedExample> batch,
                             std::span<const double> reference_lp, std::span<const double> scores, Beta beta,
                             GFunction g) {
  require_batch(batch.size(), "una_feedback_loss");
  require_scores(scores);
  std::vector<Var> lps;
  lps.reserve(batch.size());
  for (const auto& ex : batch) lps.push_back(policy.sequence_logprob(ex.prompt, ex.response));
  return feedback_loss_from_logprobs(lps, reference_lp, scores, beta, g);
}

/// Log-prob nodes and reference values are ordered (chosen_0, rejected_0, chosen_1, ...).
inline Var dpo_loss_from_logprobs(std::span<const Var> policy_logprobs, std::span<const double> reference_lp,
                                  Beta beta) {
  require_batch(policy_logprobs.size() / 2, "dpo_loss");
  std::vector<Var> terms;
  terms.reserve(policy_logprobs.size() / 2);
  for (std::size_t i = 0; i + 1 < policy_logprobs.size(); i += 2) {
    const Var rw = implicit_reward_var(policy_logprobs[i], reference_lp[i], beta);
    const Var rl = implicit_reward_var(policy_logprobs[i + 1], reference_lp[i + 1], beta);
    terms.push_back(ag::scale(ag::log_sigmoid(ag::sub(rw, rl)), -1.0));
  }
  return ag::mean(ag::stack(terms));
}

inline Var dpo_loss(const BoundNetwork& policy, std::span<const EncodedPair> batch,
                    std::span<const double> reference_lp, Beta beta) {
  require_batch(batch.size(), "dpo_loss");
  std::vector<Var> lps;
  lps.reserve(2 * batch.size());
  for (const auto& p : batch) {
    lps.push_back(policy.sequence_logprob(p.chosen.prompt, p.chosen.response));
    lps.push_back(policy.sequence_logprob(p.rejected.prompt, p.rejected.response));
  }
  return dpo_loss_from_logprobs(lps, reference_lp, beta);
}

inline Var reward_model_loss(const BoundNetwork& head, std::span<const EncodedPair> batch) {
  require_batch(batch.size(), "reward_model_loss");
  std::vector<Var> terms;
  terms.reserve(batch.size());
  for (const auto& p : batch) {
    const Var rw = head.reward(p.chosen.prompt, p.chosen.response);
    const Var rl = head.reward(p.rejected.prompt, p.rejected.response);
    terms.push_back(ag::scale(ag::log_sigmoid(ag::sub(rw, rl)), -1.0));
  }
  return ag::mean(ag::stack(terms));
}

inline std::vector<double> pair_reference_logprobs(const Transformer& reference, std::span<const EncodedPair> pairs) {
  std::vector<double> out;
  out.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    out.push_back(reference_logprob(reference, p.chosen));
    out.push_back(reference_logprob(reference, p.rejected));
  }
  return out;
}

inline std::vector<double> scores_of(std::span<const ScoredExample> batch) {
  std::vector<double> out;
  out.reserve(batch.size());
  for (const auto& ex : batch) out.push_back(ex.score);
  return out;
}

// ---- model-level losses, bound to a caller-supplied tape ----

inline Var sft_loss(const BoundNetwork& policy, std::span<const InstructionExample> batch) {
  require_batch(batch.size(), "sft_loss");
  const auto encoded = encode_batch(batch, policy.network().context_length());
  return sft_loss(policy, encoded);
}

inline Var una_feedback_loss(const BoundNetwork& policy, const ReferenceModel& reference,
                             std::span<const ScoredExample> batch, Beta beta, GFunction g) {
  require_batch(batch.size(), "una_feedback_loss");
  const auto scores = scores_of(batch);
  require_scores(scores);
  const auto encoded = encode_batch(batch, policy.network().context_length());
  return una_feedback_loss(policy, encoded, reference_logprobs(reference.network(), encoded), scores, beta, g);
}

inline Var uft_sft_loss(const BoundNetwork& policy, const ReferenceModel& reference,
                        std::span<const InstructionExample> batch, Beta beta) {
  require_batch(batch.size(), "uft_sft_loss");
  return una_feedback_loss(policy, reference, instruction_to_scored(batch), beta, GFunction::sigmoid_mse);
}

inline Var pairwise_una_loss(const BoundNetwork& policy, const ReferenceModel& reference,
                             std::span<const PairwiseExample> batch, Beta beta, GFunction g) {
  require_batch(batch.size(), "pairwise_una_loss");
  return una_feedback_loss(policy, reference, pairwise_to_scored(batch), beta, g);
}

inline Var dpo_loss(const BoundNetwork& policy, const ReferenceModel& reference,
                    std::span<const PairwiseExample> batch, Beta beta) {
  require_batch(batch.size(), "dpo_loss");
  const auto pairs = encode_pairs(batch, policy.network().context_length());
  return dpo_loss(policy, pairs, pair_reference_logprobs(reference.network(), pairs), beta);
}

inline Var reward_model_loss(const BoundNetwork& head, std::span<const PairwiseExample> batch) {
  require_batch(batch.size(), "reward_model_loss");
  return reward_model_loss(head, encode_pairs(batch, head.network().context_length()));
}

}  // namespace objectives

// ---- value-level losses ----

namespace detail {
template <typename F>
double evaluate_loss(const Transformer& net, F&& build) {
  Tape tape(false);
  const BoundNetwork bound(net, tape, false);
  return build(bound).item();
}
}  // namespace detail

/// Mean over examples of -log pi(y|x).
inline double sft_loss(const PolicyModel& policy, std::span<const InstructionExample> batch) {
  return detail::evaluate_loss(policy.network(), [&](const BoundNetwork& b) { return objectives::sft_loss(b, batch); });
}

inline double una_feedback_loss(const PolicyModel& policy, const ReferenceModel& reference,
                                std::span<const ScoredExample> batch, Beta beta,
                                GFunction g = GFunction::sigmoid_mse) {
  return detail::evaluate_loss(policy.network(), [&](const BoundNetwork& b) {
    return objectives::una_feedback_loss(b, reference, batch, beta, g);
  });
}

/// Mean of [sigmoid(r) - 1]^2: instruction data treated as score-1 feedback.
inline double uft_sft_loss(const PolicyModel& policy, const ReferenceModel& reference,
                           std::span<const InstructionExample> batch, Beta beta) {
  return detail::evaluate_loss(policy.network(), [&](const BoundNetwork& b) {
    return objectives::uft_sft_loss(b, reference, batch, beta);
  });
}

inline double pairwise_una_loss(const PolicyModel& policy, const ReferenceModel& reference,
                                std::span<const PairwiseExample> batch, Beta beta,
                                GFunction g = GFunction::sigmoid_mse) {
  return detail::evaluate_loss(policy.network(), [&](const BoundNetwork& b) {
    return objectives::pairwise_una_loss(b, reference, batch, beta, g);
  });
}

/// Mean of -log sigmoid(r_w - r_l) over implicit rewards. The log-partition
/// term is shared by both responses to one prompt and cancels, so it never
/// appears.
inline double dpo_loss(const PolicyModel& policy, const ReferenceModel& reference,
                       std::span<const PairwiseExample> batch, Beta beta) {
  return detail::evaluate_loss(policy.network(), [&](const BoundNetwork& b) {
    return objectives::dpo_loss(b, reference, batch, beta);
  });
}

/// Same loss written over the four raw log-probabilities:
/// -log sigmoid(beta [(lp_w - lp_l) - (ref_w - ref_l)]).
inline double dpo_loss_expanded(const PolicyModel& policy, const ReferenceModel& reference,
                                std::span<const PairwiseExample> batch, Beta beta) {
  objectives::require_batch(batch.size(), "dpo_loss");
  const auto pairs = objectives::encode_pairs(batch, policy.network().context_length());
  double total = 0.0;
  for (const auto& p : pairs) {
    const double pw = policy.network().sequence_logprob(p.chosen.prompt, p.chosen.response);
    const double pl = policy.network().sequence_logprob(p.rejected.prompt, p.rejected.response);
    const double rw = reference.network().sequence_logprob(p.chosen.prompt, p.chosen.response);
    const double rl = reference.network().sequence_logprob(p.rejected.prompt, p.rejected.response);
    total += -detail::stable_log_sigmoid(beta.value() * ((pw - pl) - (rw - rl)));
  }
  return total / static_cast<double>(pairs.size());
}

/// Bradley-Terry loss of an explicit reward head.
inline double reward_model_loss(const RewardFunction& reward, std::span<const PairwiseExample> batch) {
  if (!reward.is_trainable()) throw NotTrainableError("reward_model_loss: stub scorers are not trainable");
  return detail::evaluate_loss(reward.network(), [&](const BoundNetwork& b) {
    return objectives::reward_model_loss(b, batch);
  });
}

struct KlObjectiveRecord {
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double objective = 0.0;
  std::size_t samples = 0;
};

/// Seed for sample j of a prompt; depends on prompt content, not position.
inline std::uint64_t sample_seed(std::uint64_t seed, std::span<const Token> prompt, std::size_t j) {
  std::uint64_t h = mix_seed(seed, 0x5eed);
  for (const Token t : prompt) h = mix_seed(h, t);
  return mix_seed(h, j);
}

/// Monte-Carlo estimate of E_y~pi[r(x,y)] - beta KL(pi || pi_ref) with the
/// single-sample log-ratio KL estimator. Diagnostic only.
template <HasNetwork P, HasNetwork R>
KlObjectiveRecord kl_regularized_objective(const P& policy, const R& reference, const RewardFunction& scorer,
                                           std::span<const Tokens> prompts, double beta, std::size_t n_samples,
                                           std::uint64_t seed, std::size_t max_len = 16) {
  if (n_samples < 1) throw UsageError("kl_regularized_objective: n_samples must be >= 1");
  if (!(beta >= 0.0)) throw UsageError("kl_regularized_objective: beta must be >= 0");
  KlObjectiveRecord out;
  for (const auto& prompt : prompts) {
    for (std::size_t j = 0; j < n_samples; ++j) {
      const Tokens y = sample_response(policy.network(), prompt, max_len, 1.0, sample_seed(seed, prompt, j));
      const double r = scorer(prompt, y);
      const double kl = policy.network().sequence_logprob(prompt, y) - reference.network().sequence_logprob(prompt, y);
      out.mean_reward += r;
      out.mean_kl += kl;
      out.objective += r - beta * kl;
      ++out.samples;
    }
  }
  if (out.samples > 0) {
    const auto n = static_cast<double>(out.samples);
    out.mean_reward /= n;
    out.mean_kl /= n;
    out.objective /= n;
  }
  return out;
}

}  // namespace uftlab
