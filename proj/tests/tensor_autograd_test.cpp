// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "uftlab/autograd.hpp"
#include "uftlab/grad_check.hpp"
#include "uftlab/rng.hpp"
#include "uftlab/tensor.hpp"

using namespace uftlab;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// Contract an arbitrary-shaped output with fixed random weights so every
// output coordinate contributes with a distinct coefficient.
Var contract(Var y, std::uint64_t seed = 99) {
  const Var w = ag::leaf(y.tape(), random_tensor(y.value().shape(), seed));
  return ag::sum(ag::mul(y, w));
}

constexpr double kTol = 1e-6;

}  // namespace

TEST(Tensor, ShapeAndAccess) {
  Tensor t = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.at(1, 2), 6.0);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor::scalar(4.5).item(), 4.5);
  EXPECT_EQ(Tensor::scalar(1.0).rank(), 0u);
}

TEST(OpNames, RoundTrip) {
  for (const auto& [kind, name] : kOpNames) EXPECT_EQ(parse_op_kind(name), kind);
  EXPECT_THROW(parse_op_kind("conv2d"), UnknownOpError);
}

TEST(Forward, MatmulByHand) {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor b = Tensor::matrix(2, 1, {5, 6});
  const Tensor c = forward(OpKind::matmul, {&a, &b});
  EXPECT_EQ(c.values(), (std::vector<double>{17, 39}));
  const Tensor bad = Tensor::matrix(3, 1, {1, 2, 3});
  EXPECT_THROW(forward(OpKind::matmul, {&a, &bad}), ShapeError);
}

TEST(Forward, ElementwiseShapeMismatch) {
  const Tensor a = Tensor::vector({1, 2});
  const Tensor b = Tensor::vector({1, 2, 3});
  EXPECT_THROW(forward(OpKind::add, {&a, &b}), ShapeError);
  EXPECT_THROW(forward(OpKind::add, {&a}), ShapeError);
}

TEST(Forward, SoftmaxIsStableForHugeLogits) {
  const Tensor x = Tensor::vector({1000.0, 1000.0, -1000.0});
  const Tensor p = forward(OpKind::softmax, {&x});
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
  EXPECT_EQ(p[2], 0.0);
  const Tensor lp = forward(OpKind::log_softmax, {&x});
  EXPECT_NEAR(lp[0], -std::log(2.0), 1e-12);
  EXPECT_TRUE(std::isfinite(lp[2]));
}

TEST(Forward, SigmoidFamilyIsStable) {
  const Tensor x = Tensor::vector({-800.0, 0.0, 800.0});
  const Tensor s = forward(OpKind::sigmoid, {&x});
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 0.5);
  EXPECT_EQ(s[2], 1.0);
  const Tensor ls = forward(OpKind::log_sigmoid, {&x});
  EXPECT_NEAR(ls[0], -800.0, 1e-12);
  EXPECT_EQ(ls[1], -std::log(2.0));
  EXPECT_EQ(ls[2], 0.0 * 1.0 - std::log1p(std::exp(-800.0)));
}

TEST(Forward, CausalScoresAndSoftmax) {
  const Tensor q = random_tensor({3, 2}, 1);
  const Tensor k = random_tensor({3, 2}, 2);
  OpAttrs attrs;
  attrs.scalar = 0.5;
  const Tensor s = forward(OpKind::causal_attention_score, {&q, &k}, attrs);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      const double want = j <= i ? 0.5 * (q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) : 0.0;
      EXPECT_NEAR(s.at(i, j), want, 1e-15);
    }
  }
  OpAttrs causal;
  causal.causal = true;
  const Tensor p = forward(OpKind::softmax, {&s}, causal);
  EXPECT_EQ(p.at(0, 0), 1.0);
  EXPECT_EQ(p.at(0, 1), 0.0);
  EXPECT_EQ(p.at(1, 2), 0.0);
  EXPECT_NEAR(p.at(2, 0) + p.at(2, 1) + p.at(2, 2), 1.0, 1e-15);
}

TEST(Forward, RmsNormByHand) {
  const Tensor x = Tensor::matrix(1, 2, {3.0, 4.0});
  const Tensor g = Tensor::vector({1.0, 2.0});
  OpAttrs attrs;
  attrs.epsilon = 0.0;
  const Tensor y = forward(OpKind::rms_norm, {&x, &g}, attrs);
  const double rms = std::sqrt(12.5);
  EXPECT_NEAR(y[0], 3.0 / rms, 1e-15);
  EXPECT_NEAR(y[1], 8.0 / rms, 1e-15);
}

TEST(Forward, GatherAndEmbed) {
  const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  OpAttrs attrs;
  attrs.rows = {1, 0};
  attrs.cols = {2, 1};
  EXPECT_EQ(forward(OpKind::gather_index, {&x}, attrs).values(), (std::vector<double>{6, 2}));
  OpAttrs emb;
  emb.rows = {1, 1, 0};
  EXPECT_EQ(forward(OpKind::embed_lookup, {&x}, emb).values(), (std::vector<double>{4, 5, 6, 4, 5, 6, 1, 2, 3}));
  emb.rows = {2};
  EXPECT_THROW(forward(OpKind::embed_lookup, {&x}, emb), ShapeError);
}

TEST(Tape, NonScalarLossIsRejected) {
  Tape tape;
  const Var x = ag::leaf(tape, Tensor::vector({1, 2}), true);
  EXPECT_THROW((void)tape.backward(ag::square(x).id()), NonScalarLossError);
}

TEST(Tape, LossWithoutTrainableLeavesIsDetached) {
  Tape tape;
  const Var x = ag::leaf(tape, Tensor::vector({1, 2}), false);
  EXPECT_THROW((void)tape.backward(ag::sum(x).id()), DetachedNodeError);
}

TEST(Tape, UnreachedLeavesGetZeroGradient) {
  Tape tape;
  const Var x = ag::leaf(tape, Tensor::vector({1, 2}), true);
  const Var unused = ag::leaf(tape, Tensor::vector({3}), true);
  const Gradients g = tape.backward(ag::sum(ag::square(x)).id());
  EXPECT_EQ(g.at(x.id()).values(), (std::vector<double>{2, 4}));
  EXPECT_EQ(g.at(unused.id()).values(), (std::vector<double>{0}));
}

TEST(Tape, FanOutAccumulates) {
  Tape tape;
  const Var x = ag::leaf(tape, Tensor::scalar(3.0), true);
  const Var y = ag::add(ag::mul(x, x), x);  // x^2 + x
  EXPECT_EQ(tape.backward(y.id()).at(x.id()).item(), 7.0);
}

TEST(Tape, NoGradTapeKeepsNoHistory) {
  Tape tape(false);
  const Var x = ag::leaf(tape, Tensor::scalar(2.0), true);
  EXPECT_FALSE(tape.requires_grad(x.id()));
  EXPECT_THROW((void)tape.backward(ag::square(x).id()), DetachedNodeError);
}

// ---- per-op gradient checks against central differences ----

TEST(GradCheck, Matmul) {
  const Tensor b = random_tensor({4, 3}, 5);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::matmul(x, ag::leaf(x.tape(), b))); }, random_tensor({2, 4}, 1)),
            kTol);
  const Tensor a = random_tensor({2, 4}, 6);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::matmul(ag::leaf(x.tape(), a), x)); }, random_tensor({4, 3}, 2)),
            kTol);
}

TEST(GradCheck, Elementwise) {
  const Tensor other = random_tensor({3, 2}, 7);
  const Tensor p = random_tensor({3, 2}, 3);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::add(x, ag::leaf(x.tape(), other))); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::sub(ag::leaf(x.tape(), other), x)); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::mul(x, ag::leaf(x.tape(), other))); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::mul(x, x)); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::square(x)); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::scale(x, -2.5)); }, p), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::shift(x, 0.75)); }, p), kTol);
}

TEST(GradCheck, Sigmoids) {
  const Tensor p = random_tensor({5}, 4, 3.0);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::sigmoid(x)); }, p), kTol);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::log_sigmoid(x)); }, p), kTol);
}

TEST(GradCheck, Softmaxes) {
  const Tensor p = random_tensor({3, 4}, 8);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::softmax(x)); }, p), kTol);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::log_softmax(x)); }, p), kTol);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::softmax(x, true)); }, random_tensor({4, 4}, 9)), kTol);
}

TEST(GradCheck, RmsNormInputAndGain) {
  const Tensor gain = random_tensor({4}, 10);
  const Tensor x0 = random_tensor({3, 4}, 11);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::rms_norm(x, ag::leaf(x.tape(), gain))); }, x0), kTol);
  EXPECT_LT(grad_check([&](Var g) { return contract(ag::rms_norm(ag::leaf(g.tape(), x0), g)); }, gain), kTol);
}

TEST(GradCheck, AttentionScores) {
  const Tensor k = random_tensor({4, 3}, 12);
  const Tensor q = random_tensor({4, 3}, 13);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::attention_scores(x, ag::leaf(x.tape(), k), 0.7)); }, q), kTol);
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::attention_scores(ag::leaf(x.tape(), q), x, 0.7)); }, k), kTol);
  // Self-attention: the same node feeds both sides.
  EXPECT_LT(grad_check([&](Var x) { return contract(ag::attention_scores(x, x, 0.7)); }, q), kTol);
}

TEST(GradCheck, IndexingOps) {
  const Tensor table = random_tensor({5, 3}, 14);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::embed(x, {4, 0, 4, 2})); }, table), kTol);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::gather(x, {0, 1, 4, 4}, {2, 0, 1, 1})); }, table), kTol);
  EXPECT_LT(grad_check([](Var x) { return contract(ag::slice_columns(x, 1, 2)); }, table), kTol);
}

TEST(GradCheck, Reductions) {
  const Tensor p = random_tensor({2, 3}, 15);
  EXPECT_LT(grad_check([](Var x) { return ag::sum(ag::square(x)); }, p), kTol);
  EXPECT_LT(grad_check([](Var x) { return ag::mean(ag::square(x)); }, p), kTol);
}

TEST(GradCheck, ConcatAndStack) {
  const Tensor p = random_tensor({3, 2}, 16);
  EXPECT_LT(grad_check([](Var x) {
    const std::vector<Var> parts{x, ag::square(x), ag::slice_columns(x, 0, 1)};
    return contract(ag::concat_columns(parts));
  }, p), kTol);
  EXPECT_LT(grad_check([](Var x) {
    const std::vector<Var> parts{ag::sum(x), ag::mean(ag::square(x)), ag::sum(ag::sigmoid(x))};
    return contract(ag::stack(parts));
  }, p), kTol);
}

TEST(GradCheck, ComposedAttentionBlock) {
  // softmax(causal(q k^T)) v with q = k = v = x w.
  const Tensor w = random_tensor({3, 3}, 17);
  EXPECT_LT(grad_check([&](Var x) {
    const Var h = ag::matmul(x, ag::leaf(x.tape(), w));
    return contract(ag::matmul(ag::softmax(ag::attention_scores(h, h, 0.5), true), h));
  }, random_tensor({4, 3}, 18)), kTol);
}

TEST(GradCheck, RelativeErrorIsSymmetricAndZeroForEqual) {
  EXPECT_EQ(relative_error(1.5, 1.5), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1.0, 2.0), relative_error(2.0, 1.0));
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.below(7), 7u);
    (void)b.below(7);
  }
  EXPECT_NE(mix_seed(1, 0), mix_seed(1, 1));
  EXPECT_EQ(mix_seed(5, 3), mix_seed(5, 3));
}

TEST(Rng, ShuffleIsAPermutation) {
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng rng(3);
  rng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
}
