#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "errors.hpp"
#include "nn_model.hpp"
#include "tensor.hpp"

namespace syncbn {

struct SGDState {
  std::vector<Tensor> velocity;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  static SGDState zeros_like(const Params& params, double momentum, double weight_decay) {
    SGDState s;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    for (const auto& p : params) s.velocity.push_back(new_tensor(p.value.shape(), 0.0));
    return s;
  }
};

struct Milestone {
  std::int64_t epoch = 0;
  double multiplier = 1.0;
};

enum class PolicyName { normal, long_, custom };

inline const char* to_string(PolicyName p) {
  switch (p) {
    case PolicyName::normal: return "normal";
    case PolicyName::long_: return "long";
    case PolicyName::custom: return "custom";
  }
  return "?";
}

// Linearly scaled learning rate with linear warmup and step decay.
struct LRPolicy {
  double base_lr = 0.02;
  std::int64_t base_batch = 16;
  std::int64_t actual_batch = 16;
  bool half_lr = false;  // halve the scaled target
  std::int64_t warmup_iters = 0;
  std::vector<Milestone> milestones;
  std::int64_t end_epoch = 11;

  // x0.1 at epochs 8 and 10, 11 epochs.
  static LRPolicy normal(double base_lr = 0.02, std::int64_t base_batch = 16, std::int64_t actual_batch = 16) {
    return {base_lr, base_batch, actual_batch, false, 0, {{8, 0.1}, {10, 0.1}}, 11};
  }
  // x0.1 at epochs 11 and 14, x0.5 at 17, 18 epochs.
  static LRPolicy long_policy(double base_lr = 0.02, std::int64_t base_batch = 16, std::int64_t actual_batch = 16) {
    return {base_lr, base_batch, actual_batch, false, 0, {{11, 0.1}, {14, 0.1}, {17, 0.5}}, 18};
  }

  void validate() const {
    if (base_batch <= 0 || actual_batch <= 0) throw InvalidArgument("LR policy batch sizes must be positive");
    if (!(base_lr > 0) || !std::isfinite(base_lr)) throw InvalidArgument("LR policy base_lr must be positive");
    if (warmup_iters < 0) throw InvalidArgument("LR policy warmup_iters must be >= 0");
    if (end_epoch < 1) throw InvalidArgument("LR policy end_epoch must be >= 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i].epoch <= milestones[i - 1].epoch) {
        throw InvalidArgument("LR milestones must have strictly increasing epochs");
      }
      if (!(milestones[i].multiplier > 0 && milestones[i].multiplier <= 1)) {
        throw InvalidArgument("LR milestone multipliers must lie in (0, 1]");
      }
    }
  }
};

// Default warmup length when the policy does not set one: min(500, one epoch).
inline std::int64_t default_warmup_iters(std::int64_t iters_per_epoch) {
  return std::min<std::int64_t>(500, iters_per_epoch);
}

// k * r with k = actual_batch / base_batch (halved when half_lr is set).
inline double scaled_target_lr(const LRPolicy& p) {
  if (p.base_batch <= 0 || p.actual_batch <= 0) throw InvalidArgument("scaled_target_lr: batch sizes must be positive");
  const double k = static_cast<double>(p.actual_batch) / static_cast<double>(p.base_batch);
  const double target = k * p.base_lr;
  return p.half_lr ? 0.5 * target : target;
}

inline double lr_at(const LRPolicy& p, std::int64_t epoch, std::int64_t iter_in_epoch, std::int64_t iters_per_epoch) {
  const double target = scaled_target_lr(p);
  const std::int64_t global_iter = epoch * iters_per_epoch + iter_in_epoch;
  if (global_iter < p.warmup_iters) {
    return p.base_lr + (target - p.base_lr) * static_cast<double>(global_iter) / static_cast<double>(p.warmup_iters);
  }
  double lr = target;
  for (const auto& m : p.milestones) {
    if (m.epoch <= epoch) lr *= m.multiplier;
  }
  return lr;
}

inline void check_same_shapes(const Params& params, const Grads& grads, const char* where) {
  if (grads.size() != params.size()) throw InvalidArgument(std::string(where) + ": gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape()) {
      throw InvalidArgument(std::string(where) + ": gradient shape mismatch for " + params[i].name);
    }
  }
}

// g' = grad + lambda * w (weights only); v <- m * v + g'; w <- w - lr * v
inline void sgd_step(Params& params, const Grads& grads, SGDState& state, double lr) {
  check_same_shapes(params, grads, "sgd_step");
  if (state.velocity.size() != params.size()) throw InvalidArgument("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    auto v = state.velocity[i].data();
    const auto g = grads[i].data();
    if (v.size() != w.size()) throw InvalidArgument("sgd_step: velocity shape mismatch for " + params[i].name);
    const double decay = params[i].decay ? state.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] + decay * w[j];
      v[j] = state.momentum * v[j] + gj;
      const double next = w[j] - lr * v[j];
      if (!std::isfinite(next) || !std::isfinite(v[j])) {
        throw DivergenceError("sgd_step: non-finite update in " + params[i].name, -1);
      }
      w[j] = next;
    }
  }
}

struct AccumulationComparison {
  Params accumulated;  // k steps with lr r and gradient g_t
  Params single;       // one step with lr k*r and the mean gradient
  double max_rel_gap = 0;
};

// Compares k small steps against one large step with the mean gradient and
// k times the learning rate, holding the gradients fixed at the start point.
inline AccumulationComparison accumulate_equivalence(const Params& params, const std::vector<Grads>& per_step,
                                                     double lr, double momentum = 0.0) {
  if (per_step.empty()) throw InvalidArgument("accumulate_equivalence: need at least one gradient");
  const auto k = per_step.size();
  AccumulationComparison out{params, params, 0.0};

  auto small = SGDState::zeros_like(params, momentum, 0.0);
  for (const auto& g : per_step) sgd_step(out.accumulated, g, small, lr);

  Grads mean(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    mean[i] = new_tensor(params[i].value.shape(), 0.0);
    for (const auto& g : per_step) {
      check_same_shapes(params, g, "accumulate_equivalence");
      for (std::size_t j = 0; j < mean[i].size(); ++j) mean[i][j] += g[i][j];
    }
    for (auto& v : mean[i].data()) v /= static_cast<double>(k);
  }
  auto large = SGDState::zeros_like(params, momentum, 0.0);
  sgd_step(out.single, mean, large, lr * static_cast<double>(k));

  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].value.size(); ++j) {
      const double a = out.accumulated[i].value[j];
      const double b = out.single[i].value[j];
      const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
      out.max_rel_gap = std::max(out.max_rel_gap, std::abs(a - b) / scale);
    }
  }
  return out;
}

}  // namespace syncbn
