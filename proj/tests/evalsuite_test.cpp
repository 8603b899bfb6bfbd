// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "uftlab/evalsuite.hpp"

using namespace uftlab;

namespace {

// Answers every echo prompt perfectly: copies what follows "e:" then stops.
struct EchoOracle {
  std::size_t context_length() const { return 32; }
  std::vector<double> next_token_logits(std::span<const Token> ctx) const {
    std::vector<double> logits(kByteVocabSize, 0.0);
    std::size_t close = 0;
    while (ctx[close] != special::kInstClose) ++close;
    const std::size_t emitted = ctx.size() - close - 1;
    const std::size_t src = 4 + emitted;  // BOS, INST_OPEN, 'e', ':'
    logits[src < close ? ctx[src] : special::kEos] = 1.0;
    return logits;
  }
};

// Emits a fixed token forever.
struct Constant {
  Token token;
  std::size_t context_length() const { return 64; }
  std::vector<double> next_token_logits(std::span<const Token>) const {
    std::vector<double> logits(kByteVocabSize, 0.0);
    logits[token] = 1.0;
    return logits;
  }
};

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 1;
  c.heads = 1;
  c.model_dim = 16;
  c.context_length = 16;
  return c;
}

EvalReport report(std::string id, std::vector<std::pair<std::string, std::size_t>> passes) {
  EvalReport r;
  r.checkpoint_id = std::move(id);
  for (auto& [name, p] : passes) r.tasks.push_back({name, TaskFamily::instruction_following, p, 10});
  return r;
}

}  // namespace

TEST(Tasks, GeneratorsAreDeterministicAndWellFormed) {
  for (const auto& task : tasks::standard_suite()) {
    EXPECT_EQ(task.example(3, 7), task.example(3, 7)) << task.name;
    EXPECT_NE(task.example(3, 7), task.example(4, 7)) << task.name;
  }
  const auto e = tasks::echo().example(1, 0);
  EXPECT_EQ(e.prompt, "e:" + e.gold);
  const auto u = tasks::upper().example(1, 0);
  for (std::size_t i = 0; i < e.gold.size(); ++i) EXPECT_TRUE(std::isupper(static_cast<unsigned char>(u.gold[i])));
  const auto a = tasks::addition().example(1, 0);
  const auto plus = a.prompt.find('+');
  EXPECT_EQ((std::stoi(a.prompt.substr(0, plus)) + std::stoi(a.prompt.substr(plus + 1))) % 10, std::stoi(a.gold));
  EXPECT_EQ(tasks::refusal().example(1, 0).gold, kRefusal);
  EXPECT_EQ(tasks::by_name("refuse").family, TaskFamily::safety);
  EXPECT_THROW(tasks::by_name("chess"), UsageError);
}

TEST(EvalTasks, OracleScoresPerfectly) {
  const std::vector<SyntheticTask> suite{tasks::echo()};
  const EvalReport r = eval_tasks(EchoOracle{}, suite, 40, 2, "oracle");
  EXPECT_EQ(r.task("echo").accuracy(), 1.0);
  EXPECT_EQ(r.mean_length, 4.0);  // three letters and EOS
  EXPECT_TRUE(std::isnan(r.mean_kl));
}

TEST(EvalTasks, RandomModelFailsArithmetic) {
  const PolicyModel m(Transformer::random(tiny(), 3));
  const std::vector<SyntheticTask> suite{tasks::addition()};
  EXPECT_LE(eval_tasks(m, suite, 50, 4).task("add").accuracy(), 0.15);
}

TEST(EvalTasks, SameSeedSameReport) {
  const PolicyModel m(Transformer::random(tiny(), 5));
  const auto suite = tasks::standard_suite();
  const EvalReport a = eval_tasks(m, suite, 10, 6, "x");
  const EvalReport b = eval_tasks(m, suite, 10, 6, "x");
  EXPECT_EQ(report_csv(a), report_csv(b));
  EXPECT_EQ(a.tasks, b.tasks);
}

TEST(EvalTasks, FamilyAccuracyPoolsTasks) {
  EvalReport r = report("r", {{"echo", 10}, {"upper", 0}});
  EXPECT_EQ(r.family_accuracy(TaskFamily::instruction_following), 0.5);
  EXPECT_THROW((void)r.family_accuracy(TaskFamily::safety), UsageError);
}

TEST(Kl, ModelAgainstItselfIsExactlyZero) {
  const PolicyModel m(Transformer::random(tiny(), 7));
  const ReferenceModel ref = snapshot_reference(m);
  const auto prompts = suite_prompts(tasks::standard_suite(), 3, 1);
  const KlEstimate k = kl_estimate(m, ref, prompts, 4, 9, 6);
  EXPECT_EQ(k.mean, 0.0);
  EXPECT_EQ(k.samples, prompts.size() * 4);
}

TEST(Kl, MatchesEnumerationOnVocabTwo) {
  ModelConfig c;
  c.vocab_size = 2;
  c.model_dim = 4;
  c.context_length = 4;
  const PolicyModel p(Transformer::random(c, 11));
  const ReferenceModel q(Transformer::random(c, 12));
  const Tokens prompt{0};
  double exact = 0.0;
  for (Token a = 0; a < 2; ++a) {
    for (Token b = 0; b < 2; ++b) {
      const Tokens y{a, b};
      const double lp = p.network().sequence_logprob(prompt, y);
      exact += std::exp(lp) * (lp - q.network().sequence_logprob(prompt, y));
    }
  }
  const std::vector<Tokens> prompts{prompt};
  const KlEstimate k = kl_estimate(p, q, prompts, 4000, 13, 2);
  EXPECT_GT(k.standard_error, 0.0);
  EXPECT_LT(std::abs(k.mean - exact), 3.0 * k.standard_error) << k.mean << " vs " << exact;
}

TEST(Kl, IgnoresPromptOrder) {
  const PolicyModel p(Transformer::random(tiny(), 14));
  const ReferenceModel q(Transformer::random(tiny(), 15));
  auto prompts = suite_prompts(tasks::standard_suite(), 2, 3);
  const double forward = kl_to_reference(p, q, prompts, 3, 4, 6);
  std::reverse(prompts.begin(), prompts.end());
  EXPECT_EQ(kl_to_reference(p, q, prompts, 3, 4, 6), forward);
}

TEST(Degradation, IdenticalReportsHaveZeroDeltas) {
  const std::vector<EvalReport> rs{report("a", {{"echo", 7}, {"add", 3}}), report("b", {{"echo", 7}, {"add", 3}}),
                                   report("c", {{"echo", 7}, {"add", 3}})};
  const auto t = degradation_report(rs, 0.05);
  EXPECT_EQ(t.rows.size(), 6u);
  for (const auto& row : t.rows) {
    EXPECT_EQ(row.delta_previous, 0.0);
    EXPECT_EQ(row.delta_base, 0.0);
    EXPECT_FALSE(row.flagged);
  }
}

TEST(Degradation, FlagsLargeDrop) {
  const std::vector<EvalReport> rs{report("base", {{"echo", 9}}), report("sft", {{"echo", 4}})};
  const auto t = degradation_report(rs, 0.1);
  ASSERT_EQ(t.flagged().size(), 1u);
  EXPECT_EQ(t.flagged()[0].checkpoint_id, "sft");
  EXPECT_NEAR(t.flagged()[0].delta_previous, -0.5, 1e-12);
  EXPECT_TRUE(degradation_report(rs, 0.6).flagged().empty());
}

TEST(Degradation, DeltasAreAntisymmetric) {
  const EvalReport a = report("a", {{"echo", 2}, {"add", 8}});
  const EvalReport b = report("b", {{"echo", 6}, {"add", 5}});
  const std::vector<EvalReport> ab{a, b}, ba{b, a};
  const auto f = degradation_report(ab, 0.05);
  const auto r = degradation_report(ba, 0.05);
  for (std::size_t i = 0; i < f.rows.size(); ++i) {
    if (f.rows[i].stage != 1) continue;
    EXPECT_EQ(f.rows[i].delta_previous, -r.rows[i].delta_previous);
  }
}

TEST(Degradation, MismatchedTaskSetsAreRejected) {
  const std::vector<EvalReport> rs{report("a", {{"echo", 1}}), report("b", {{"add", 1}})};
  EXPECT_THROW(degradation_report(rs), UsageError);
}

TEST(Degradation, CsvHeader) {
  const std::vector<EvalReport> rs{report("a", {{"echo", 1}}), report("b", {{"echo", 1}})};
  const std::string csv = degradation_csv(degradation_report(rs));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "task,stage,checkpoint,accuracy,delta_previous,delta_base,flagged");
  const std::string rep = report_csv(rs[0]);
  EXPECT_EQ(rep.substr(0, rep.find('\n')), "checkpoint,task,family,passed,total,accuracy,mean_kl,mean_length");
}

TEST(LengthStats, ImmediateEosAndNeverEos) {
  const std::vector<Tokens> prompts{encode_prompt("a"), encode_prompt("bb"), encode_prompt("ccc")};
  const LengthStats stop = length_stats(Constant{special::kEos}, prompts, 10, 0);
  EXPECT_EQ(stop.mean, 1.0);
  EXPECT_EQ(stop.max, 1u);
  const LengthStats never = length_stats(Constant{'x'}, prompts, 10, 0);
  EXPECT_EQ(never.mean, 10.0);
  EXPECT_EQ(never.median, 10.0);
  EXPECT_EQ(length_stats(Constant{'x'}, prompts, 10, 0, 1.0).max, 10u);
}
