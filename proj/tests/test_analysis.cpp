#include <gtest/gtest.h>

#include <cmath>

#include "syncbn/analysis.hpp"

using namespace syncbn;

namespace {

GradientSource random_mlp_source(std::uint64_t seed, std::int64_t in, std::int64_t hid, std::int64_t k) {
  ModelSpec spec;
  spec.input_shape = {in};
  spec.layers = {LayerSpec::dense(in, hid), LayerSpec::relu(), LayerSpec::dense(hid, k), LayerSpec::softmax_xent()};
  auto params = init_params(spec, seed);
  BatchSampler sampler = [in, k](std::int64_t n, Rng& rng) {
    Tensor x = new_tensor({n, in}, 0.0);
    for (auto& v : x.data()) v = rng.normal();
    std::vector<std::int64_t> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(k)));
    return std::pair{std::move(x), std::move(y)};
  };
  return model_source(spec, params, sampler);
}

}  // namespace

TEST(GradVariance, ConstantDatasetHasZeroVariance) {
  auto rep = estimate_grad_variance(constant_source({1.5, -2.0, 0.25}), 8, 100, 3);
  EXPECT_EQ(rep.aggregate, 0.0);
  EXPECT_EQ(rep.ci_half_width, 0.0);
  ASSERT_EQ(rep.block_variance.size(), 1u);
  EXPECT_EQ(rep.block_variance[0], 0.0);
}

TEST(GradVariance, LinearModelFollowsOneOverN) {
  const auto src = linear_scalar_source();
  for (std::int64_t n : {1, 2, 4, 8, 16}) {
    auto rep = estimate_grad_variance(src, n, 1000, 7);
    const double expect = 1.0 / static_cast<double>(n);
    EXPECT_GT(rep.ci_half_width, 0.0);
    EXPECT_NEAR(rep.aggregate, expect, 2.0 * rep.ci_half_width) << "N=" << n;
    EXPECT_NEAR(rep.aggregate * static_cast<double>(n), 1.0, 0.15) << "N=" << n;
  }
}

TEST(GradVariance, SeedDeterministic) {
  const auto src = linear_scalar_source();
  auto a = estimate_grad_variance(src, 4, 200, 99);
  auto b = estimate_grad_variance(src, 4, 200, 99);
  auto c = estimate_grad_variance(src, 4, 200, 100);
  EXPECT_EQ(a.aggregate, b.aggregate);
  EXPECT_EQ(a.ci_half_width, b.ci_half_width);
  EXPECT_NE(a.aggregate, c.aggregate);
}

TEST(GradVariance, RejectsBadArguments) {
  const auto src = linear_scalar_source();
  EXPECT_THROW(estimate_grad_variance(src, 0, 200, 1), InvalidArgument);
  EXPECT_THROW(estimate_grad_variance(src, 4, 99, 1), InvalidArgument);
  EXPECT_THROW(estimate_grad_variance(constant_source({}), 4, 100, 1), InvalidArgument);

  GradientSource ragged = linear_scalar_source();
  ragged.batch_gradient = [](std::int64_t n, Rng&) { return std::vector<double>(static_cast<std::size_t>(n), 0.0); };
  EXPECT_THROW(estimate_grad_variance(ragged, 3, 100, 1), InvalidArgument);
}

TEST(GradVariance, OneOverNLawForRandomMlps) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto src = random_mlp_source(seed, 3, 5, 3);
    auto r1 = estimate_grad_variance(src, 1, 400, seed + 10, 300);
    auto r8 = estimate_grad_variance(src, 8, 400, seed + 20, 300);
    ASSERT_EQ(r1.block_variance.size(), 4u);
    const double a = r1.aggregate, b = 8.0 * r8.aggregate;
    EXPECT_GT(a, 0.0);
    EXPECT_LE(std::abs(a - b), 2.0 * (r1.ci_half_width + 8.0 * r8.ci_half_width)) << "seed " << seed;
  }
}

TEST(VarianceEquivalence, ScaledRuleKeepsUpdateVariance) {
  const auto src = linear_scalar_source();
  for (std::int64_t k : {2, 4}) {
    auto rep = variance_equivalence_ratio(src, 8, k, 0.1, 1000, 5);
    EXPECT_GE(rep.ratio, 0.85) << "k=" << k;
    EXPECT_LE(rep.ratio, 1.15) << "k=" << k;
    EXPECT_NEAR(rep.accumulated_variance, 0.01 * static_cast<double>(k) / 8.0,
                0.15 * 0.01 * static_cast<double>(k) / 8.0);
  }
}

TEST(VarianceEquivalence, UnscaledShrinksByKSquared) {
  const auto src = linear_scalar_source();
  for (std::int64_t k : {2, 4}) {
    auto rep = variance_equivalence_ratio(src, 8, k, 0.1, 1000, 6, LrScaling::unscaled);
    const double expect = 1.0 / static_cast<double>(k * k);
    EXPECT_NEAR(rep.ratio, expect, 0.2 * expect) << "k=" << k;
  }
}

TEST(VarianceEquivalence, DegenerateKIsOne) {
  auto rep = variance_equivalence_ratio(linear_scalar_source(), 4, 1, 0.5, 1000, 7);
  EXPECT_NEAR(rep.ratio, 1.0, 0.15);
}

TEST(VarianceEquivalence, ZeroVarianceRejected) {
  EXPECT_THROW(variance_equivalence_ratio(constant_source({1.0}), 4, 2, 0.1, 100, 1), InvalidArgument);
  EXPECT_THROW(variance_equivalence_ratio(linear_scalar_source(), 4, 0, 0.1, 100, 1), InvalidArgument);
  EXPECT_THROW(variance_equivalence_ratio(linear_scalar_source(), 4, 2, 0.0, 100, 1), InvalidArgument);
}

TEST(CountDistribution, SampleMeans) {
  std::mt19937_64 eng(1);
  auto mean_of = [&](const CountDistribution& d) {
    double s = 0;
    for (int i = 0; i < 20000; ++i) s += static_cast<double>(d.sample(eng));
    return s / 20000.0;
  };
  EXPECT_EQ(CountDistribution::fixed(7).sample(eng), 7);
  EXPECT_NEAR(mean_of(CountDistribution::poisson(12)), 12.0, 0.2);
  EXPECT_NEAR(mean_of(CountDistribution::negative_binomial(20, 0.5)), 20.0, 1.5);
  EXPECT_NEAR(mean_of(CountDistribution::categorical({0.5, 0.0, 0.5})), 1.0, 0.05);
}

TEST(CountDistribution, DriftInterpolatesParameters) {
  SamplerSpec s;
  s.positives_early = CountDistribution::poisson(10);
  s.positives_late = CountDistribution::poisson(30);
  s.total_epochs = 11;
  EXPECT_DOUBLE_EQ(s.positives_at(1).mean, 10.0);
  EXPECT_DOUBLE_EQ(s.positives_at(6).mean, 20.0);
  EXPECT_DOUBLE_EQ(s.positives_at(11).mean, 30.0);
  s.positives_late = CountDistribution::fixed(30);
  EXPECT_THROW(s.positives_at(3), InvalidArgument);
}

TEST(RatioStudy, DeterministicCountsHaveZeroStd) {
  SamplerSpec s;
  s.positives_early = s.positives_late = CountDistribution::fixed(3);
  s.negatives = CountDistribution::fixed(12);
  s.quota.reset();
  s.batch_sizes = {1, 16};
  s.epochs = {1};
  s.batches_per_point = 50;
  for (const auto& r : posneg_ratio_study(s)) {
    EXPECT_DOUBLE_EQ(r.mean_ratio_pct, 25.0);
    EXPECT_DOUBLE_EQ(r.std_ratio_pct, 0.0);
    EXPECT_DOUBLE_EQ(r.mean_pos_total_pct, 20.0);
    EXPECT_EQ(r.undefined_batches, 0);
  }
}

TEST(RatioStudy, StdFollowsClt) {
  SamplerSpec s;
  s.positives_early = s.positives_late = CountDistribution::negative_binomial(20, 0.5);
  s.negatives = CountDistribution::poisson(300);
  s.quota.reset();
  s.batch_sizes = {16, 64, 256};
  s.epochs = {1};
  s.batches_per_point = 4000;
  auto rows = posneg_ratio_study(s);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_GT(rows[0].std_ratio_pct, rows[1].std_ratio_pct);
  EXPECT_GT(rows[1].std_ratio_pct, rows[2].std_ratio_pct);
  EXPECT_NEAR(rows[0].std_ratio_pct / rows[2].std_ratio_pct, 4.0, 1.0);
}

TEST(RatioStudy, LargerBatchMoreBalancedEarly) {
  SamplerSpec s;  // default drift + pooled quota
  s.epochs = {1, 12};
  auto rows = posneg_ratio_study(s);
  const auto nb = s.batch_sizes.size();
  ASSERT_EQ(rows.size(), 2 * nb);
  const double late = rows[2 * nb - 1].mean_ratio_pct;
  for (std::size_t i = 1; i < nb; ++i) {
    EXPECT_GT(rows[i].mean_ratio_pct, rows[i - 1].mean_ratio_pct) << "batch " << rows[i].batch_size;
    EXPECT_LT(rows[i].mean_ratio_pct, late);
  }
}

TEST(RatioStudy, UndefinedBatchesCounted) {
  SamplerSpec s;
  s.positives_early = s.positives_late = CountDistribution::fixed(2);
  s.negatives = CountDistribution::categorical({0.5, 0.5});
  s.quota.reset();
  s.batch_sizes = {1};
  s.epochs = {1};
  s.batches_per_point = 400;
  auto r = posneg_ratio_study(s).at(0);
  EXPECT_GT(r.undefined_batches, 100);
  EXPECT_LT(r.undefined_batches, 300);
  EXPECT_DOUBLE_EQ(r.mean_ratio_pct, 200.0);
  EXPECT_EQ(r.batches, 400);
}

TEST(RatioStudy, Validation) {
  SamplerSpec s;
  s.batch_sizes = {0};
  EXPECT_THROW(posneg_ratio_study(s), InvalidArgument);
  s = SamplerSpec{};
  s.epochs = {13};
  EXPECT_THROW(posneg_ratio_study(s), InvalidArgument);
  s = SamplerSpec{};
  s.quota = RoiQuota{512, 1.5};
  EXPECT_THROW(posneg_ratio_study(s), InvalidArgument);
}
