#include <gtest/gtest.h>

#include <cmath>

#include "syncbn/optim_schedule.hpp"

using namespace syncbn;

namespace {

Params one_weight(double w, bool decay = true) { return {{"w", new_tensor({1}, w), decay}}; }
Grads one_grad(double g) { return {new_tensor({1}, g)}; }

}  // namespace

TEST(ScaledTargetLr, BaseAndScaled) {
  EXPECT_EQ(scaled_target_lr(LRPolicy::normal(0.02, 16, 16)), 0.02);
  EXPECT_DOUBLE_EQ(scaled_target_lr(LRPolicy::normal(0.02, 16, 256)), 0.32);
  auto half = LRPolicy::normal(0.02, 16, 64);
  half.half_lr = true;
  EXPECT_DOUBLE_EQ(scaled_target_lr(half), 0.04);
}

TEST(ScaledTargetLr, RejectsNonPositiveBatches) {
  auto p = LRPolicy::normal();
  p.actual_batch = 0;
  EXPECT_THROW(scaled_target_lr(p), InvalidArgument);
  p.actual_batch = 16;
  p.base_batch = -16;
  EXPECT_THROW(scaled_target_lr(p), InvalidArgument);
}

TEST(LrAt, WarmupStartsAtBaseAndEndsAtTarget) {
  auto p = LRPolicy::normal(0.02, 16, 256);
  p.warmup_iters = 100;
  EXPECT_EQ(lr_at(p, 0, 0, 50), 0.02);
  EXPECT_EQ(lr_at(p, 2, 0, 50), scaled_target_lr(p));
  EXPECT_DOUBLE_EQ(lr_at(p, 1, 0, 50), 0.02 + (0.32 - 0.02) * 0.5);
}

TEST(LrAt, NormalPolicyBreakpoints) {
  auto p = LRPolicy::normal(0.02, 16, 16);
  EXPECT_EQ(lr_at(p, 7, 0, 10), 0.02);
  EXPECT_EQ(lr_at(p, 7, 9, 10), 0.02);
  EXPECT_EQ(lr_at(p, 8, 0, 10), 0.02 * 0.1);
  EXPECT_EQ(lr_at(p, 9, 5, 10), 0.02 * 0.1);
  EXPECT_EQ(lr_at(p, 10, 0, 10), 0.02 * 0.1 * 0.1);
  EXPECT_DOUBLE_EQ(lr_at(p, 8, 0, 10), 0.002);
  EXPECT_DOUBLE_EQ(lr_at(p, 10, 0, 10), 0.0002);
  EXPECT_EQ(p.end_epoch, 11);
}

TEST(LrAt, LongPolicyBreakpoints) {
  auto p = LRPolicy::long_policy(0.02, 16, 16);
  EXPECT_EQ(lr_at(p, 10, 0, 10), 0.02);
  EXPECT_EQ(lr_at(p, 11, 0, 10), 0.02 * 0.1);
  EXPECT_EQ(lr_at(p, 14, 0, 10), 0.02 * 0.1 * 0.1);
  EXPECT_EQ(lr_at(p, 17, 0, 10), 0.02 * 0.1 * 0.1 * 0.5);
  EXPECT_EQ(p.end_epoch, 18);
}

TEST(LrAt, ContinuousAtWarmupJunctionAndNonIncreasingAfter) {
  for (std::int64_t batch : {16, 32, 128, 256}) {
    auto p = LRPolicy::long_policy(0.02, 16, batch);
    p.warmup_iters = 37;
    const std::int64_t ipe = 20;
    EXPECT_EQ(lr_at(p, 0, 37, ipe), scaled_target_lr(p));
    double prev = INFINITY;
    for (std::int64_t gi = p.warmup_iters; gi < p.end_epoch * ipe; ++gi) {
      const double lr = lr_at(p, gi / ipe, gi % ipe, ipe);
      EXPECT_LE(lr, prev);
      prev = lr;
    }
  }
}

TEST(LrAt, LinearInBatchSize) {
  // With warmup from r to k*r the schedule is affine in k; after warmup it is
  // proportional to k.
  auto p16 = LRPolicy::normal(0.02, 16, 16);
  for (std::int64_t batch : {32, 64, 256}) {
    auto pk = LRPolicy::normal(0.02, 16, batch);
    const double k = batch / 16.0;
    for (std::int64_t e = 0; e < 11; ++e) {
      EXPECT_NEAR(lr_at(pk, e, 3, 7), k * lr_at(p16, e, 3, 7), 1e-15);
    }
  }
}

TEST(LrAt, ZeroWarmupStartsFlatAtTarget) {
  auto p = LRPolicy::normal(0.02, 16, 256);
  p.warmup_iters = 0;
  EXPECT_DOUBLE_EQ(lr_at(p, 0, 0, 10), 0.32);
}

TEST(LRPolicy, Validation) {
  auto p = LRPolicy::normal();
  p.milestones = {{8, 0.1}, {8, 0.1}};
  EXPECT_THROW(p.validate(), InvalidArgument);
  p.milestones = {{8, 1.5}};
  EXPECT_THROW(p.validate(), InvalidArgument);
  p.milestones = {{8, 0.0}};
  EXPECT_THROW(p.validate(), InvalidArgument);
  EXPECT_NO_THROW(LRPolicy::long_policy().validate());
  EXPECT_EQ(default_warmup_iters(30), 30);
  EXPECT_EQ(default_warmup_iters(7000), 500);
}

TEST(SgdStep, FixedPointAndPlainSgd) {
  auto p = one_weight(2.0);
  auto s = SGDState::zeros_like(p, 0.9, 0.0);
  sgd_step(p, one_grad(0.0), s, 0.1);
  EXPECT_EQ(p[0].value[0], 2.0);

  auto q = one_weight(2.0);
  auto s0 = SGDState::zeros_like(q, 0.0, 0.0);
  sgd_step(q, one_grad(0.5), s0, 0.1);
  EXPECT_DOUBLE_EQ(q[0].value[0], 2.0 - 0.1 * 0.5);
}

TEST(SgdStep, MomentumTwoSteps) {
  // v1 = g, v2 = 0.9 g + g = 1.9 g: total decrease lr g (1 + 1.9)
  auto p = one_weight(1.0);
  auto s = SGDState::zeros_like(p, 0.9, 0.0);
  sgd_step(p, one_grad(0.3), s, 0.05);
  sgd_step(p, one_grad(0.3), s, 0.05);
  EXPECT_NEAR(p[0].value[0], 1.0 - 0.05 * 0.3 * 2.9, 1e-15);
}

TEST(SgdStep, WeightDecayOnlyOnWeights) {
  Params p{{"w", new_tensor({1}, 2.0), true}, {"b", new_tensor({1}, 2.0), false}};
  auto s = SGDState::zeros_like(p, 0.0, 0.5);
  sgd_step(p, {new_tensor({1}, 0.0), new_tensor({1}, 0.0)}, s, 0.1);
  EXPECT_DOUBLE_EQ(p[0].value[0], 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_EQ(p[1].value[0], 2.0);
}

TEST(SgdStep, ZeroLrKeepsParamsButUpdatesVelocity) {
  auto p = one_weight(1.5);
  auto s = SGDState::zeros_like(p, 0.9, 0.1);
  s.velocity[0][0] = 0.2;
  sgd_step(p, one_grad(0.4), s, 0.0);
  EXPECT_EQ(p[0].value[0], 1.5);
  EXPECT_EQ(s.velocity[0][0], 0.9 * 0.2 + (0.4 + 0.1 * 1.5));
}

TEST(SgdStep, ErrorsAndDivergence) {
  auto p = one_weight(1.0);
  auto s = SGDState::zeros_like(p, 0.0, 0.0);
  EXPECT_THROW(sgd_step(p, {new_tensor({2}, 0.0)}, s, 0.1), InvalidArgument);
  EXPECT_THROW(sgd_step(p, {}, s, 0.1), InvalidArgument);
  EXPECT_THROW(sgd_step(p, one_grad(1e308), s, 1e10), DivergenceError);
}

TEST(AccumulateEquivalence, SingleStepIsIdentical) {
  auto p = one_weight(0.7);
  auto r = accumulate_equivalence(p, {one_grad(0.3)}, 0.1);
  EXPECT_EQ(r.accumulated[0].value[0], r.single[0].value[0]);
}

TEST(AccumulateEquivalence, FrozenGradientsMatchWithoutMomentum) {
  Rng rng(1);
  Params p{{"w", new_tensor({10}, 0.0), true}};
  for (auto& v : p[0].value.data()) v = rng.normal();
  std::vector<Grads> gs(4);
  for (auto& g : gs) {
    g = {new_tensor({10}, 0.0)};
    for (auto& v : g[0].data()) v = rng.normal();
  }
  auto r = accumulate_equivalence(p, gs, 0.01);
  EXPECT_LT(r.max_rel_gap, 1e-12);
}

TEST(AccumulateEquivalence, MomentumBreaksTheIdentity) {
  Rng rng(2);
  Params p{{"w", new_tensor({10}, 0.0), true}};
  for (auto& v : p[0].value.data()) v = rng.normal();
  std::vector<Grads> gs(4);
  for (auto& g : gs) {
    g = {new_tensor({10}, 0.0)};
    for (auto& v : g[0].data()) v = rng.normal();
  }
  auto r = accumulate_equivalence(p, gs, 0.01, 0.9);
  EXPECT_GT(r.max_rel_gap, 1e-4);
}

TEST(SgdStep, IdenticalReplicasStayBitwiseIdentical) {
  Rng rng(3);
  Params a{{"w", new_tensor({6}, 0.0), true}, {"b", new_tensor({2}, 0.1), false}};
  for (auto& v : a[0].value.data()) v = rng.normal();
  Params b = a;
  auto sa = SGDState::zeros_like(a, 0.9, 1e-4);
  auto sb = SGDState::zeros_like(b, 0.9, 1e-4);
  for (int step = 0; step < 50; ++step) {
    Grads g{new_tensor({6}, 0.0), new_tensor({2}, 0.0)};
    for (auto& t : g)
      for (auto& v : t.data()) v = rng.normal();
    sgd_step(a, g, sa, 0.01);
    sgd_step(b, g, sb, 0.01);
  }
  EXPECT_EQ(a[0].value, b[0].value);
  EXPECT_EQ(a[1].value, b[1].value);
}
