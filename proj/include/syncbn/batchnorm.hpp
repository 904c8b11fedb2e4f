#pragma once

// Batch normalization, local and synchronized across a BN sub-group of
// devices. The synchronized forward follows the two-round statistics flow:
//
//   s_i = per-device channel sums          -> reduce to group root -> mu
//   broadcast mu
//   v_i = per-device sum of (x - mu)^2     -> reduce to group root -> var
//   broadcast var
//   y = gamma * (x - mu) / sqrt(var + eps) + beta   (locally)
//
// The element count m is reduced together with the sums so that shards with
// unequal batch extents still produce exact means.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "collectives.hpp"
#include "errors.hpp"
#include "tensor.hpp"

namespace syncbn {

enum class BNMode { train, eval };

enum class VarianceAlgorithm {
  two_pass,  // explicit sum of squared deviations, two collective rounds
  one_pass,  // sum and sum of squares in a single round
};

template <typename T>
struct BNLayerState {
  std::vector<T> gamma;
  std::vector<T> beta;
  T eps = T(1e-5);
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T running_momentum = T(0.1);

  static BNLayerState with_channels(std::size_t c, T eps = T(1e-5), T momentum = T(0.1)) {
    BNLayerState s;
    s.gamma.assign(c, T(1));
    s.beta.assign(c, T(0));
    s.eps = eps;
    s.running_mean.assign(c, T(0));
    s.running_var.assign(c, T(1));
    s.running_momentum = momentum;
    return s;
  }

  std::size_t channels() const noexcept { return gamma.size(); }

  void validate(std::size_t c) const {
    if (!(eps > 0)) throw InvalidArgument("BN eps must be > 0");
    if (!(running_momentum >= 0 && running_momentum <= 1)) {
      throw InvalidArgument("BN running momentum must lie in [0, 1]");
    }
    if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c) {
      throw InvalidArgument("BN state vectors must all have length C = " + std::to_string(c));
    }
    for (auto v : running_var) {
      if (!(v >= 0)) throw InvalidArgument("BN running variance must be >= 0");
    }
  }
};

// Identifies the group a forward pass was synchronized over.
struct BNGroupTag {
  int world_size = 1;
  int bn_group_size = 1;
  int rank = 0;
  friend bool operator==(const BNGroupTag&, const BNGroupTag&) = default;
};

template <typename T>
struct BNForwardCache {
  BasicTensor<T> x_hat;
  std::vector<T> mu;
  std::vector<T> var;
  std::int64_t total_count = 0;
  BNMode mode = BNMode::train;
  BNGroupTag group;
};

template <typename T>
struct BNForwardResult {
  BasicTensor<T> y;
  BNForwardCache<T> cache;
};

template <typename T>
struct BNBackwardResult {
  BasicTensor<T> dx;
  std::vector<T> dgamma;  // summed over the BN group, identical on every member
  std::vector<T> dbeta;
  std::vector<T> dgamma_local;  // this device's share of the sums above
  std::vector<T> dbeta_local;
};

struct BNOptions {
  VarianceAlgorithm variance = VarianceAlgorithm::two_pass;
  bool update_running = true;
};

// running <- (1 - rho) * running + rho * batch, with the batch variance
// rescaled by m / (m - 1).
template <typename T>
BNLayerState<T> bn_update_running(BNLayerState<T> state, std::span<const T> mu, std::span<const T> var,
                                  std::int64_t count) {
  if (count <= 1) throw InvalidArgument("bn_update_running: reduce count must exceed 1, got " + std::to_string(count));
  const auto c = state.channels();
  if (mu.size() != c || var.size() != c) throw InvalidArgument("bn_update_running: stat length mismatch");
  const T rho = state.running_momentum;
  const T unbias = static_cast<T>(count) / static_cast<T>(count - 1);
  for (std::size_t i = 0; i < c; ++i) {
    state.running_mean[i] = (T(1) - rho) * state.running_mean[i] + rho * mu[i];
    state.running_var[i] = (T(1) - rho) * state.running_var[i] + rho * var[i] * unbias;
  }
  return state;
}

namespace detail {

// Statistics exchange for the local (single device) case.
struct LocalSync {
  template <typename T, typename Finalize>
  std::vector<T> reduce_finalize_broadcast(std::vector<T> local, Finalize&& finalize) {
    return finalize(std::move(local));
  }
  template <typename T>
  std::vector<T> allreduce(std::vector<T> local) {
    return local;
  }
  BNGroupTag tag() const { return {}; }
};

// Statistics exchange over the caller's BN sub-group: reduce to the group root,
// finalize there, broadcast the result.
struct GroupSync {
  DeviceHandle& handle;

  template <typename T, typename Finalize>
  std::vector<T> reduce_finalize_broadcast(std::vector<T> local, Finalize&& finalize) {
    auto reduced = reduce_sum<T>(handle, Scope::bn_group, local);
    const int root = handle.scope_root(Scope::bn_group);
    if (reduced) return broadcast<T>(handle, Scope::bn_group, root, finalize(std::move(*reduced)));
    return broadcast<T>(handle, Scope::bn_group, root, std::span<const T>{});
  }
  template <typename T>
  std::vector<T> allreduce(std::vector<T> local) {
    return allreduce_sum<T>(handle, Scope::bn_group, local);
  }
  BNGroupTag tag() const { return {handle.world_size(), handle.bn_group_size(), handle.rank()}; }
};

template <typename T>
BasicTensor<T> normalize(const BasicTensor<T>& x, const std::vector<T>& mu, const std::vector<T>& var, T eps) {
  const auto l = channel_layout(x.shape());
  BasicTensor<T> x_hat = x;
  auto d = x_hat.data();
  std::vector<T> inv_std(l.channels);
  for (std::size_t c = 0; c < l.channels; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + eps);
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = l.index(n, c, 0);
      for (std::size_t s = 0; s < l.spatial; ++s) d[base + s] = (d[base + s] - mu[c]) * inv_std[c];
    }
  }
  return x_hat;
}

template <typename T, typename Sync>
BNForwardResult<T> bn_forward_train(Sync& sync, const BasicTensor<T>& x, BNLayerState<T>& state,
                                    const BNOptions& opt) {
  const auto l = channel_layout(x.shape());
  const auto c = l.channels;

  std::vector<T> mu;
  std::vector<T> var;
  T m = 0;
  if (opt.variance == VarianceAlgorithm::two_pass) {
    auto st = channel_sum(x);
    std::vector<T> packed = st.sum;
    packed.push_back(static_cast<T>(st.count));
    auto mean_pack = sync.reduce_finalize_broadcast(std::move(packed), [c](std::vector<T> s) {
      const T count = s[c];
      for (std::size_t i = 0; i < c; ++i) s[i] = count > 0 ? s[i] / count : T(0);
      return s;
    });
    m = mean_pack[c];
    mu.assign(mean_pack.begin(), mean_pack.begin() + static_cast<std::ptrdiff_t>(c));

    std::vector<T> dev(c, T(0));
    const auto d = x.data();
    for (std::size_t n = 0; n < l.batch; ++n) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = l.index(n, ch, 0);
        T& acc = dev[ch];
        for (std::size_t s = 0; s < l.spatial; ++s) {
          const T diff = d[base + s] - mu[ch];
          acc += diff * diff;
        }
      }
    }
    var = sync.reduce_finalize_broadcast(std::move(dev), [m](std::vector<T> v) {
      for (auto& e : v) e = m > 0 ? e / m : T(0);
      return v;
    });
  } else {
    auto st = channel_sum(x, /*with_sum_sq=*/true);
    std::vector<T> packed = st.sum;
    packed.insert(packed.end(), st.sum_sq->begin(), st.sum_sq->end());
    packed.push_back(static_cast<T>(st.count));
    auto pack = sync.reduce_finalize_broadcast(std::move(packed), [c](std::vector<T> s) {
      const T count = s[2 * c];
      for (std::size_t i = 0; i < c; ++i) {
        const T mean = count > 0 ? s[i] / count : T(0);
        const T msq = count > 0 ? s[c + i] / count : T(0);
        s[i] = mean;
        s[c + i] = std::max(msq - mean * mean, T(0));
      }
      return s;
    });
    m = pack[2 * c];
    mu.assign(pack.begin(), pack.begin() + static_cast<std::ptrdiff_t>(c));
    var.assign(pack.begin() + static_cast<std::ptrdiff_t>(c), pack.begin() + static_cast<std::ptrdiff_t>(2 * c));
  }

  const auto count = static_cast<std::int64_t>(m);
  if (count < 2) {
    throw InvalidArgument("batch norm reduce count is " + std::to_string(count) + "; train mode needs at least 2");
  }

  BNForwardResult<T> out;
  out.cache.x_hat = normalize(x, mu, var, state.eps);
  out.y = channel_affine(out.cache.x_hat, state.gamma, state.beta);
  out.cache.mu = std::move(mu);
  out.cache.var = std::move(var);
  out.cache.total_count = count;
  out.cache.mode = BNMode::train;
  out.cache.group = sync.tag();
  if (opt.update_running) {
    state = bn_update_running<T>(std::move(state), out.cache.mu, out.cache.var, count);
  }
  return out;
}

template <typename T>
BNForwardResult<T> bn_forward_eval(const BasicTensor<T>& x, const BNLayerState<T>& state, BNGroupTag tag) {
  BNForwardResult<T> out;
  out.cache.x_hat = normalize(x, state.running_mean, state.running_var, state.eps);
  out.y = channel_affine(out.cache.x_hat, state.gamma, state.beta);
  out.cache.mu = state.running_mean;
  out.cache.var = state.running_var;
  out.cache.total_count = static_cast<std::int64_t>(channel_layout(x.shape()).count_per_channel());
  out.cache.mode = BNMode::eval;
  out.cache.group = tag;
  return out;
}

template <typename T, typename Sync>
BNBackwardResult<T> bn_backward_impl(Sync& sync, const BasicTensor<T>& dy, const BNForwardCache<T>& cache,
                                     const BNLayerState<T>& state) {
  if (dy.shape() != cache.x_hat.shape()) {
    throw InvalidArgument("BN backward: dy shape " + shape_str(dy.shape()) + " does not match cached " +
                          shape_str(cache.x_hat.shape()));
  }
  if (cache.group != sync.tag()) throw InvalidArgument("BN backward: cache was produced on a different device group");
  require_finite<T>(dy.data(), "bn backward dy");
  const auto l = channel_layout(dy.shape());
  const auto c = l.channels;
  state.validate(c);

  std::vector<T> local(2 * c, T(0));
  const auto g = dy.data();
  const auto xh = cache.x_hat.data();
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = l.index(n, ch, 0);
      for (std::size_t s = 0; s < l.spatial; ++s) {
        local[ch] += g[base + s];
        local[c + ch] += g[base + s] * xh[base + s];
      }
    }
  }

  BNBackwardResult<T> out;
  out.dbeta_local.assign(local.begin(), local.begin() + static_cast<std::ptrdiff_t>(c));
  out.dgamma_local.assign(local.begin() + static_cast<std::ptrdiff_t>(c), local.end());

  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(cache.var[ch] + state.eps);

  out.dx = dy;
  auto dx = out.dx.data();
  if (cache.mode == BNMode::eval) {
    out.dbeta = out.dbeta_local;
    out.dgamma = out.dgamma_local;
    for (std::size_t n = 0; n < l.batch; ++n) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = l.index(n, ch, 0);
        for (std::size_t s = 0; s < l.spatial; ++s) dx[base + s] = state.gamma[ch] * inv_std[ch] * g[base + s];
      }
    }
    return out;
  }

  auto total = sync.allreduce(std::move(local));
  out.dbeta.assign(total.begin(), total.begin() + static_cast<std::ptrdiff_t>(c));
  out.dgamma.assign(total.begin() + static_cast<std::ptrdiff_t>(c), total.end());

  const T m = static_cast<T>(cache.total_count);
  for (std::size_t n = 0; n < l.batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = l.index(n, ch, 0);
      const T k = state.gamma[ch] * inv_std[ch];
      const T mean_dy = out.dbeta[ch] / m;
      const T mean_dyx = out.dgamma[ch] / m;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        dx[base + s] = k * (g[base + s] - mean_dy - xh[base + s] * mean_dyx);
      }
    }
  }
  require_finite<T>(out.dx.data(), "bn backward dx");
  return out;
}

}  // namespace detail

// Single-device batch normalization. Train mode normalizes with the biased
// batch variance and updates the running statistics in `state`; eval mode
// uses the running statistics.
template <typename T>
BNForwardResult<T> bn_forward_local(const BasicTensor<T>& x, BNLayerState<T>& state, BNMode mode,
                                    const BNOptions& opt = {}) {
  const auto l = channel_layout(x.shape());
  state.validate(l.channels);
  require_finite<T>(x.data(), "bn_forward_local input");
  if (mode == BNMode::eval) return detail::bn_forward_eval(x, state, BNGroupTag{});
  detail::LocalSync sync;
  return detail::bn_forward_train(sync, x, state, opt);
}

// Cross-device batch normalization over the caller's BN sub-group. Must be
// called by every member of the sub-group, from the member's own worker.
template <typename T>
BNForwardResult<T> cgbn_forward(DeviceHandle& handle, const BasicTensor<T>& x_local, BNLayerState<T>& state,
                                const BNOptions& opt = {}) {
  const auto l = channel_layout(x_local.shape());
  state.validate(l.channels);
  require_finite<T>(x_local.data(), "cgbn_forward input");
  detail::GroupSync sync{handle};
  return detail::bn_forward_train(sync, x_local, state, opt);
}

template <typename T>
BNBackwardResult<T> bn_backward_local(const BasicTensor<T>& dy, const BNForwardCache<T>& cache,
                                      const BNLayerState<T>& state) {
  detail::LocalSync sync;
  return detail::bn_backward_impl(sync, dy, cache, state);
}

// Backward of cgbn_forward. The per-channel sums of dy and dy * x_hat are
// summed over the BN sub-group so that dx is the adjoint of the synchronized
// forward.
template <typename T>
BNBackwardResult<T> cgbn_backward(DeviceHandle& handle, const BasicTensor<T>& dy_local,
                                  const BNForwardCache<T>& cache, const BNLayerState<T>& state) {
  detail::GroupSync sync{handle};
  return detail::bn_backward_impl(sync, dy_local, cache, state);
}

}  // namespace syncbn
