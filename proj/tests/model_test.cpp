// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "uftlab/checkpoint.hpp"
#include "uftlab/model.hpp"
#include "uftlab/tokenizer.hpp"

using namespace uftlab;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.model_dim = 8;
  c.context_length = 12;
  return c;
}

// log-softmax computed independently of the autograd ops.
double log_prob_of(const std::vector<double>& logits, Token t) {
  double peak = logits[0];
  for (const double l : logits) peak = std::max(peak, l);
  double total = 0.0;
  for (const double l : logits) total += std::exp(l - peak);
  return logits[t] - peak - std::log(total);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("uftlab_model_test_" + name);
}

}  // namespace

TEST(Tokenizer, ByteRoundTrip) {
  const std::string text = "hello, \xc3\xa9t\xc3\xa9!";
  const Tokens t = Tokenizer::encode(text, Framing::plain);
  EXPECT_EQ(t.size(), text.size());
  EXPECT_EQ(Tokenizer::decode(t), text);
}

TEST(Tokenizer, PromptFramingAndSpecials) {
  const Tokens p = encode_prompt("ab");
  EXPECT_EQ(p, (Tokens{special::kBos, special::kInstOpen, 'a', 'b', special::kInstClose}));
  const Tokens r = encode_response("c");
  EXPECT_EQ(r, (Tokens{'c', special::kEos}));
  EXPECT_EQ(Tokenizer::decode(p), "ab");
  EXPECT_EQ(decode_response(Tokens{'x', special::kEos, 'y'}), "x");
}

TEST(Tokenizer, OverflowIsReported) {
  EXPECT_THROW(Tokenizer::encode("abcdef", Framing::plain, 4), OverflowError);
  EXPECT_THROW(encode_example("abcdef", "ghijkl", 8), OverflowError);
  try {
    (void)encode_example("abcdef", "ghijkl", 8);
  } catch (const OverflowError& e) {
    EXPECT_EQ(e.limit(), 8u);
  }
}

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  c.model_dim = 9;
  EXPECT_THROW(c.validate(), UsageError);
  c = small_config();
  c.lora_rank = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Transformer, ZeroWeightsGiveUniformDistribution) {
  const Transformer net = Transformer::zeros(small_config());
  const Tokens prompt{special::kBos, 'a'};
  const Tokens resp{'b', 'c', special::kEos};
  EXPECT_NEAR(net.sequence_logprob(prompt, resp), -3.0 * std::log(260.0), 1e-12);
}

TEST(Transformer, SequenceLogprobMatchesPrefixByPrefixOracle) {
  const Transformer net = Transformer::random(small_config(), 3);
  const Tokens prompt{special::kBos, special::kInstOpen, 'q', special::kInstClose};
  const Tokens resp{'x', 'y', special::kEos};
  double want = 0.0;
  Tokens ctx = prompt;
  for (const Token t : resp) {
    want += log_prob_of(net.next_token_logits(ctx), t);
    ctx.push_back(t);
  }
  EXPECT_NEAR(net.sequence_logprob(prompt, resp), want, 1e-10);
}

TEST(Transformer, IsCausal) {
  const Transformer net = Transformer::random(small_config(), 4);
  const Tensor a = net.forward_logits(Tokens{special::kBos, 'a', 'b', 'c'});
  const Tensor b = net.forward_logits(Tokens{special::kBos, 'a', 'z', 'q'});
  for (std::size_t c = 0; c < a.cols(); ++c) {
    EXPECT_EQ(a.at(0, c), b.at(0, c));
    EXPECT_EQ(a.at(1, c), b.at(1, c));
  }
}

TEST(Transformer, RejectsOverlongAndOutOfVocab) {
  const Transformer net = Transformer::random(small_config(), 5);
  EXPECT_THROW((void)net.forward_logits(Tokens(13, 'a')), OverflowError);
  EXPECT_THROW((void)net.forward_logits(Tokens{999}), UsageError);
}

TEST(Transformer, VocabTwoEnumerationIsNormalised) {
  ModelConfig c;
  c.vocab_size = 2;
  c.model_dim = 4;
  c.context_length = 4;
  const Transformer net = Transformer::random(c, 6);
  const Tokens prompt{0};
  for (std::size_t len = 1; len <= 2; ++len) {
    double mass = 0.0;
    for (Token y0 = 0; y0 < 2; ++y0) {
      if (len == 1) {
        mass += std::exp(net.sequence_logprob(prompt, Tokens{y0}));
        continue;
      }
      for (Token y1 = 0; y1 < 2; ++y1) mass += std::exp(net.sequence_logprob(prompt, Tokens{y0, y1}));
    }
    EXPECT_NEAR(mass, 1.0, 1e-12);
  }
}

TEST(Lora, FreshAdaptersLeaveOutputsUnchanged) {
  ModelConfig c = small_config();
  c.lora_rank = 2;
  const PolicyModel base(Transformer::random(c, 7));
  const PolicyModel adapted = apply_lora(base, 1);
  const Tokens t{special::kBos, 'h', 'i'};
  EXPECT_EQ(adapted.network().forward_logits(t), base.network().forward_logits(t));
  for (const auto& name : adapted.network().trainable()) {
    EXPECT_TRUE(name.ends_with(".lora_a") || name.ends_with(".lora_b")) << name;
  }
  EXPECT_EQ(adapted.network().trainable().size(), 2u * 4u * 2u);
}

TEST(Lora, MergeFoldsAdaptersIntoWeights) {
  ModelConfig c = small_config();
  c.lora_rank = 2;
  PolicyModel adapted = apply_lora(PolicyModel(Transformer::random(c, 8)), 2);
  Rng rng(9);
  for (auto& [name, t] : adapted.mutable_network().mutable_params()) {
    if (name.ends_with(".lora_b")) {
      for (double& v : t.mutable_data()) v = 0.2 * rng.normal();
    }
  }
  const Tokens t{special::kBos, 'a', 'b', 'c'};
  const Tensor before = adapted.network().forward_logits(t);
  const PolicyModel merged = merge_lora(adapted);
  EXPECT_FALSE(merged.network().has_adapters());
  const Tensor after = merged.network().forward_logits(t);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before[i], after[i], 1e-12);
}

TEST(Lora, StateErrors) {
  ModelConfig c = small_config();
  EXPECT_THROW(apply_lora(PolicyModel(Transformer::random(c, 1)), 0), UsageError);
  c.lora_rank = 1;
  const PolicyModel once = apply_lora(PolicyModel(Transformer::random(c, 1)), 0);
  EXPECT_THROW(apply_lora(once, 0), AdapterStateError);
  EXPECT_THROW(merge_lora(PolicyModel(Transformer::random(c, 1))), AdapterStateError);
}

TEST(Reference, SnapshotIsIndependentOfSource) {
  PolicyModel policy(Transformer::random(small_config(), 10));
  const ReferenceModel ref = snapshot_reference(policy);
  const Tokens t{special::kBos, 'a'};
  const auto before = ref.next_token_logits(t);
  EXPECT_EQ(before, policy.next_token_logits(t));
  policy.mutable_network().mutable_param("w_out")[0] += 1.0;
  EXPECT_EQ(ref.next_token_logits(t), before);
}

TEST(Generation, GreedyIsArgmaxAndDeterministic) {
  const PolicyModel m(Transformer::random(small_config(), 11));
  const Tokens prompt{special::kBos, 'a'};
  const Tokens y = greedy_response(m, prompt, 5);
  ASSERT_FALSE(y.empty());
  const auto logits = m.next_token_logits(prompt);
  EXPECT_EQ(y[0], static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
  EXPECT_EQ(sample_response(m, prompt, 5, 1.0, 3), sample_response(m, prompt, 5, 1.0, 3));
  EXPECT_THROW(greedy_response(m, prompt, 11), OverflowError);
  EXPECT_THROW(sample_response(m, prompt, 3, 0.0, 1), UsageError);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  ModelConfig c = small_config();
  c.lora_rank = 2;
  PolicyModel m = apply_lora(PolicyModel(Transformer::random(c, 12)), 4);
  m.mutable_network().add_reward_head();
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(path, m);
  const PolicyModel back = load_policy(path);
  EXPECT_EQ(back, m);
  save_checkpoint(temp_path("roundtrip2.ckpt"), back);
  EXPECT_EQ(read_file(path), read_file(temp_path("roundtrip2.ckpt")));
}

TEST(Checkpoint, ReferenceRoundTrip) {
  const ReferenceModel ref(Transformer::random(small_config(), 13));
  const auto path = temp_path("ref.ckpt");
  save_checkpoint(path, ref);
  const ReferenceModel back = load_reference(path);
  EXPECT_EQ(back.network(), ref.network());
  EXPECT_EQ(from_container(load_container(path)).frozen, true);
}

TEST(Checkpoint, RejectsCorruptInput) {
  const Container c = to_container(Transformer::random(small_config(), 14), false);
  std::string bytes = serialize(c);
  EXPECT_EQ(deserialize(bytes), c);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), IoError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize(bad), IoError);
  EXPECT_THROW(deserialize(bytes + "xx"), IoError);
  Container wrong = c;
  wrong.tensors.erase("w_out");
  EXPECT_THROW(from_container(wrong), IoError);
  EXPECT_THROW(load_container(temp_path("does_not_exist.ckpt")), IoError);
}
