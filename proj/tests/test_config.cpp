#include <gtest/gtest.h>

#include "syncbn/config.hpp"

using namespace syncbn;

TEST(Config, DefaultsResolve) {
  auto c = parse_config_text("{}");
  EXPECT_EQ(c.world_size, 1);
  EXPECT_EQ(c.policy, PolicyName::normal);
  EXPECT_EQ(c.num_epochs(), 11);
  EXPECT_EQ(c.iters_per_epoch(), 512 / 8);
  EXPECT_EQ(c.resolved_lr().warmup_iters, 64);
  EXPECT_EQ(c.resolved_lr().actual_batch, 8);
  EXPECT_EQ(c.model().layers.size(), 6u);
  EXPECT_EQ(c.model().weight_decay, 1e-4);
}

TEST(Config, ParsesSections) {
  auto c = parse_config_text(R"({
    "world_size": 8, "per_device_batch": 2, "bn_group_size": 4, "epochs": 3, "seed": 9,
    "lr": {"policy": "long", "base_lr": 0.01, "base_batch": 8, "warmup_iters": 0, "half_lr": true},
    "bn": {"eps": 1e-3, "variance": "one_pass"},
    "dataset": {"classes": 3, "size": 96, "height": 6, "width": 6},
    "model": {"layers": [{"type": "conv3x3", "in": 1, "out": 4}, {"type": "bn", "sync": "local"},
                         {"type": "relu"}, {"type": "global_mean_pool"}, {"type": "dense", "in": 4, "out": 3},
                         {"type": "softmax_xent"}]},
    "ratio_study": {"quota": null, "negatives": {"kind": "fixed", "mean": 10}}
  })");
  EXPECT_EQ(c.total_batch(), 16);
  EXPECT_EQ(c.num_epochs(), 3);
  EXPECT_EQ(c.policy, PolicyName::long_);
  EXPECT_EQ(c.lr.milestones.size(), 3u);
  EXPECT_TRUE(c.lr.half_lr);
  EXPECT_EQ(c.resolved_lr().warmup_iters, 0);
  EXPECT_DOUBLE_EQ(scaled_target_lr(c.resolved_lr()), 0.01);
  EXPECT_EQ(c.bn_variance, VarianceAlgorithm::one_pass);
  EXPECT_EQ(c.model().layers[1].sync, BNSync::local);
  EXPECT_FALSE(c.ratio_study.quota.has_value());
  EXPECT_EQ(c.ratio_study.seed, 9u);
}

TEST(Config, CustomPolicy) {
  auto c = parse_config_text(R"({"lr": {"policy": "custom", "milestones": [{"epoch": 2, "multiplier": 0.1}],
                                        "end_epoch": 3}})");
  EXPECT_EQ(c.num_epochs(), 3);
  ASSERT_EQ(c.lr.milestones.size(), 1u);
  EXPECT_EQ(c.lr.milestones[0].epoch, 2);
  EXPECT_THROW(parse_config_text(R"({"lr": {"policy": "custom"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"lr": {"milestones": []}})"), ConfigError);
  EXPECT_NO_THROW(parse_config_text(R"({"lr": {"end_epoch": 11}})"));
}

TEST(Config, RejectsInvalid) {
  EXPECT_THROW(parse_config_text("{"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"wrold_size": 2})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"lr": {"warmup": 3}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"world_size": 6, "bn_group_size": 4})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"world_size": "two"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"lr": {"policy": "cosine"}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"dataset": {"size": 4}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"dataset": {"classes": 1}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"dataset": {"classes": 3}, "model": {"layers": [
      {"type": "dense", "in": 64, "out": 4}, {"type": "softmax_xent"}]}})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"momentum": 1.0})"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ResolvedJsonRoundTrips) {
  auto c = parse_config_text(R"({"world_size": 2, "per_device_batch": 4, "bn_group_size": 2,
                                 "lr": {"policy": "long"}})");
  const auto j = resolved_json(c);
  EXPECT_EQ(j["lr"]["warmup_iters"], 64);
  EXPECT_EQ(j["epochs"], 18);
  auto back = parse_config(j);
  EXPECT_EQ(resolved_json(back).dump(), j.dump());
}
