#pragma once

// Monte-Carlo checks of the statistical arguments behind large mini-batch
// training:
//  * Var(mean gradient over N i.i.d. samples) = sigma^2 / N
//  * one step of lr k*r on a batch of kN has the same update variance as k
//    accumulated steps of lr r on batches of N
//  * the per-batch positive/negative sample ratio concentrates as the batch grows.
//
// Trials draw from independent RNG streams derived from (seed, trial index)
// and are reduced in trial order, so reports are seed-deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "nn_model.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace syncbn {

struct VarianceReport {
  std::int64_t batch_size = 0;
  std::int64_t trials = 0;
  std::vector<std::string> block_names;
  std::vector<double> block_variance;  // mean elementwise variance per block
  double aggregate = 0;                // mean over blocks
  double ci_half_width = 0;            // 95% bootstrap half-width of `aggregate`
};

// Produces the mean gradient over a batch of `n` i.i.d. samples drawn from `rng`.
struct GradientSource {
  std::function<std::vector<double>(std::int64_t n, Rng& rng)> batch_gradient;
  std::vector<std::string> block_names;
  std::vector<std::size_t> block_sizes;
};

// l(w; x, y) = (w x - y)^2 / 2 with x, y ~ N(0, 1) independent. At w = 0 the
// per-sample gradient is -x y, whose variance is exactly 1.
inline GradientSource linear_scalar_source(double w = 0.0) {
  GradientSource s;
  s.block_names = {"w"};
  s.block_sizes = {1};
  s.batch_gradient = [w](std::int64_t n, Rng& rng) {
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double x = rng.normal();
      const double y = rng.normal();
      acc += (w * x - y) * x;
    }
    return std::vector<double>{acc / static_cast<double>(n)};
  };
  return s;
}

// Every sample identical: the mini-batch gradient has no sampling noise.
inline GradientSource constant_source(std::vector<double> gradient) {
  GradientSource s;
  s.block_names = {"g"};
  s.block_sizes = {gradient.size()};
  s.batch_gradient = [g = std::move(gradient)](std::int64_t, Rng&) { return g; };
  return s;
}

using BatchSampler = std::function<std::pair<Tensor, std::vector<std::int64_t>>(std::int64_t n, Rng& rng)>;

// Task-loss gradient of a model without cross-device layers at a fixed
// parameter point, one block per parameter tensor.
inline GradientSource model_source(ModelSpec spec, Params params, BatchSampler sampler) {
  spec.weight_decay = 0.0;
  GradientSource s;
  for (const auto& p : params) {
    s.block_names.push_back(p.name);
    s.block_sizes.push_back(p.value.size());
  }
  s.batch_gradient = [spec = std::move(spec), params = std::move(params), sampler = std::move(sampler)](
                         std::int64_t n, Rng& rng) {
    auto [x, y] = sampler(n, rng);
    auto state = init_state(spec);
    auto f = forward(spec, params, state, x, y);
    auto g = backward(spec, params, f.cache);
    std::vector<double> flat;
    for (const auto& t : g) flat.insert(flat.end(), t.data().begin(), t.data().end());
    return flat;
  };
  return s;
}

namespace detail {

inline std::vector<double> draw_checked(const GradientSource& src, std::int64_t n, Rng& rng, std::size_t expect) {
  auto g = src.batch_gradient(n, rng);
  if (g.empty() || g.size() != expect) {
    throw InvalidArgument("degenerate gradient source: produced " + std::to_string(g.size()) +
                          " values, expected " + std::to_string(expect));
  }
  return g;
}

inline std::size_t total_size(const GradientSource& src) {
  std::size_t n = 0;
  for (auto b : src.block_sizes) n += b;
  return n;
}

// Aggregate (mean over blocks of mean elementwise unbiased variance) of the
// rows selected by `idx` from `samples` (trials x dim, row-major).
inline std::vector<double> block_variances(const std::vector<double>& samples, std::size_t dim,
                                           const std::vector<std::size_t>& idx,
                                           const std::vector<std::size_t>& block_sizes) {
  // Shifted by the first selected row so identical rows give exactly zero.
  const auto t = static_cast<double>(idx.size());
  const double* shift = samples.data() + idx.front() * dim;
  std::vector<double> mean(dim, 0.0);
  for (auto r : idx)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += samples[r * dim + j] - shift[j];
  for (auto& m : mean) m /= t;
  std::vector<double> var(dim, 0.0);
  for (auto r : idx)
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = samples[r * dim + j] - shift[j] - mean[j];
      var[j] += d * d;
    }
  for (auto& v : var) v /= (t - 1.0);
  std::vector<double> blocks;
  std::size_t at = 0;
  for (auto b : block_sizes) {
    double acc = 0;
    for (std::size_t j = 0; j < b; ++j) acc += var[at + j];
    blocks.push_back(b ? acc / static_cast<double>(b) : 0.0);
    at += b;
  }
  return blocks;
}

inline double mean_of(const std::vector<double>& v) {
  double acc = 0;
  for (double x : v) acc += x;
  return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

inline double bootstrap_half_width(const std::vector<double>& samples, std::size_t dim, std::size_t trials,
                                   const std::vector<std::size_t>& block_sizes, std::uint64_t seed,
                                   int resamples = 1000) {
  Rng rng(mix_seed(seed, 0xb0075ULL));
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(resamples));
  std::vector<std::size_t> idx(trials);
  for (int b = 0; b < resamples; ++b) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(trials));
    stats.push_back(mean_of(block_variances(samples, dim, idx, block_sizes)));
  }
  std::sort(stats.begin(), stats.end());
  const auto q = [&](double p) { return stats[static_cast<std::size_t>(p * static_cast<double>(stats.size() - 1))]; };
  return 0.5 * (q(0.975) - q(0.025));
}

}  // namespace detail

inline constexpr std::int64_t kMinVarianceTrials = 100;

// Empirical variance of the mini-batch gradient over `trials` independent
// batches of size `batch_size`, at the source's fixed parameter point.
inline VarianceReport estimate_grad_variance(const GradientSource& src, std::int64_t batch_size, std::int64_t trials,
                                             std::uint64_t seed, int bootstrap_resamples = 1000) {
  if (batch_size < 1) throw InvalidArgument("estimate_grad_variance: batch size must be >= 1");
  if (trials < kMinVarianceTrials) throw InvalidArgument("estimate_grad_variance: need at least 100 trials");
  const auto dim = detail::total_size(src);
  if (dim == 0) throw InvalidArgument("degenerate gradient source: no parameters");
  std::vector<double> samples;
  samples.reserve(dim * static_cast<std::size_t>(trials));
  for (std::int64_t t = 0; t < trials; ++t) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(t)));
    auto g = detail::draw_checked(src, batch_size, rng, dim);
    samples.insert(samples.end(), g.begin(), g.end());
  }
  std::vector<std::size_t> all(static_cast<std::size_t>(trials));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  VarianceReport rep;
  rep.batch_size = batch_size;
  rep.trials = trials;
  rep.block_names = src.block_names;
  rep.block_variance = detail::block_variances(samples, dim, all, src.block_sizes);
  rep.aggregate = detail::mean_of(rep.block_variance);
  rep.ci_half_width = bootstrap_resamples > 0 ? detail::bootstrap_half_width(samples, dim, all.size(),
                                                                             src.block_sizes, seed,
                                                                             bootstrap_resamples)
                                              : 0.0;
  return rep;
}

enum class LrScaling {
  linear,    // large batch uses k * r
  unscaled,  // large batch keeps r
};

struct EquivalenceReport {
  std::int64_t batch_size = 0;
  std::int64_t k = 1;
  double lr = 0;
  LrScaling scaling = LrScaling::linear;
  std::int64_t trials = 0;
  double accumulated_variance = 0;  // Var(r * sum_{t=1..k} g_N^t)
  double large_variance = 0;        // Var(r_hat * g_{kN})
  double ratio = 0;                 // large_variance / accumulated_variance
};

// Compares the update variance of one large-batch step against k accumulated
// small-batch steps, with gradients evaluated at the source's fixed point.
inline EquivalenceReport variance_equivalence_ratio(const GradientSource& src, std::int64_t batch_size,
                                                    std::int64_t k, double lr, std::int64_t trials,
                                                    std::uint64_t seed, LrScaling scaling = LrScaling::linear) {
  if (batch_size < 1 || k < 1) throw InvalidArgument("variance_equivalence_ratio: N and k must be >= 1");
  if (trials < kMinVarianceTrials) throw InvalidArgument("variance_equivalence_ratio: need at least 100 trials");
  if (!(lr > 0)) throw InvalidArgument("variance_equivalence_ratio: lr must be positive");
  const auto dim = detail::total_size(src);
  const double large_lr = scaling == LrScaling::linear ? static_cast<double>(k) * lr : lr;

  std::vector<double> acc_samples, large_samples;
  acc_samples.reserve(dim * static_cast<std::size_t>(trials));
  large_samples.reserve(dim * static_cast<std::size_t>(trials));
  for (std::int64_t t = 0; t < trials; ++t) {
    Rng small_rng(mix_seed(seed, 2 * static_cast<std::uint64_t>(t)));
    std::vector<double> sum(dim, 0.0);
    for (std::int64_t step = 0; step < k; ++step) {
      auto g = detail::draw_checked(src, batch_size, small_rng, dim);
      for (std::size_t j = 0; j < dim; ++j) sum[j] += g[j];
    }
    for (auto& v : sum) v *= lr;
    acc_samples.insert(acc_samples.end(), sum.begin(), sum.end());

    Rng large_rng(mix_seed(seed, 2 * static_cast<std::uint64_t>(t) + 1));
    auto g = detail::draw_checked(src, k * batch_size, large_rng, dim);
    for (auto& v : g) v *= large_lr;
    large_samples.insert(large_samples.end(), g.begin(), g.end());
  }
  std::vector<std::size_t> all(static_cast<std::size_t>(trials));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;

  EquivalenceReport rep;
  rep.batch_size = batch_size;
  rep.k = k;
  rep.lr = lr;
  rep.scaling = scaling;
  rep.trials = trials;
  rep.accumulated_variance = detail::mean_of(detail::block_variances(acc_samples, dim, all, src.block_sizes));
  rep.large_variance = detail::mean_of(detail::block_variances(large_samples, dim, all, src.block_sizes));
  if (!(rep.accumulated_variance > 0)) {
    throw InvalidArgument("degenerate sampler: zero gradient variance, ratio undefined");
  }
  rep.ratio = rep.large_variance / rep.accumulated_variance;
  return rep;
}

// ---------------------------------------------------------------------------
// Positive / negative sample ratio

struct CountDistribution {
  enum class Kind { fixed, poisson, negative_binomial, categorical };
  Kind kind = Kind::fixed;
  double mean = 0;        // fixed value, Poisson / NB mean
  double dispersion = 1;  // NB shape (variance = mean + mean^2 / dispersion)
  std::vector<double> pmf;  // categorical probabilities over 0..pmf.size()-1

  static CountDistribution fixed(double v) { return {Kind::fixed, v, 1, {}}; }
  static CountDistribution poisson(double mean) { return {Kind::poisson, mean, 1, {}}; }
  static CountDistribution negative_binomial(double mean, double dispersion) {
    return {Kind::negative_binomial, mean, dispersion, {}};
  }
  static CountDistribution categorical(std::vector<double> pmf) { return {Kind::categorical, 0, 1, std::move(pmf)}; }

  void validate() const {
    if (!(mean >= 0)) throw InvalidArgument("count distribution mean must be >= 0");
    if (kind == Kind::negative_binomial && !(dispersion > 0)) throw InvalidArgument("NB dispersion must be > 0");
    if (kind == Kind::categorical) {
      if (pmf.empty()) throw InvalidArgument("categorical pmf is empty");
      double s = 0;
      for (double p : pmf) {
        if (!(p >= 0)) throw InvalidArgument("categorical pmf entries must be >= 0");
        s += p;
      }
      if (!(s > 0)) throw InvalidArgument("categorical pmf must have positive mass");
    }
  }

  std::int64_t sample(std::mt19937_64& eng) const {
    switch (kind) {
      case Kind::fixed:
        return static_cast<std::int64_t>(std::llround(mean));
      case Kind::poisson:
        return mean > 0 ? std::poisson_distribution<std::int64_t>(mean)(eng) : 0;
      case Kind::negative_binomial: {
        if (mean <= 0) return 0;
        const double lambda = std::gamma_distribution<double>(dispersion, mean / dispersion)(eng);
        return lambda > 0 ? std::poisson_distribution<std::int64_t>(lambda)(eng) : 0;
      }
      case Kind::categorical:
        return std::discrete_distribution<std::int64_t>(pmf.begin(), pmf.end())(eng);
    }
    return 0;
  }

  // Parameter-wise linear interpolation between two distributions of one kind.
  static CountDistribution lerp(const CountDistribution& a, const CountDistribution& b, double t) {
    if (a.kind != b.kind) throw InvalidArgument("drift endpoints must use the same distribution kind");
    CountDistribution out = a;
    out.mean = a.mean + (b.mean - a.mean) * t;
    out.dispersion = a.dispersion + (b.dispersion - a.dispersion) * t;
    if (a.kind == Kind::categorical) {
      if (a.pmf.size() != b.pmf.size()) throw InvalidArgument("categorical drift endpoints must have equal support");
      for (std::size_t i = 0; i < out.pmf.size(); ++i) out.pmf[i] = a.pmf[i] + (b.pmf[i] - a.pmf[i]) * t;
    }
    return out;
  }
};

// Per-batch RoI budget: each image contributes `rois_per_image` sampled RoIs,
// at most `positive_fraction` of the batch budget may be positives, and the
// rest of the budget is filled with negatives. The budget is pooled over the
// whole mini-batch.
struct RoiQuota {
  std::int64_t rois_per_image = 512;
  double positive_fraction = 0.25;
};

struct SamplerSpec {
  // Early proposals: few positives per image with a heavy tail. Late: many,
  // concentrated, so the positive quota nearly always saturates.
  CountDistribution positives_early = CountDistribution::negative_binomial(70, 0.2);
  CountDistribution positives_late = CountDistribution::negative_binomial(120, 5);
  CountDistribution negatives = CountDistribution::poisson(2000);
  std::vector<std::int64_t> batch_sizes{16, 32, 64, 128, 256};
  std::vector<std::int64_t> epochs{1, 6, 12};  // 1-based
  std::int64_t total_epochs = 12;
  std::int64_t batches_per_point = 4000;
  std::optional<RoiQuota> quota = RoiQuota{512, 0.15};
  std::uint64_t seed = 0;

  void validate() const {
    positives_early.validate();
    positives_late.validate();
    negatives.validate();
    if (batch_sizes.empty() || epochs.empty()) throw InvalidArgument("sampler needs batch sizes and epochs");
    for (auto b : batch_sizes)
      if (b < 1) throw InvalidArgument("sampler batch sizes must be >= 1");
    for (auto e : epochs)
      if (e < 1 || e > total_epochs) throw InvalidArgument("sampler epochs must lie in [1, total_epochs]");
    if (batches_per_point < 2) throw InvalidArgument("sampler needs at least 2 batches per point");
    if (quota && (quota->rois_per_image < 1 || !(quota->positive_fraction > 0 && quota->positive_fraction < 1))) {
      throw InvalidArgument("RoI quota needs rois_per_image >= 1 and positive_fraction in (0, 1)");
    }
  }

  // Positive-count distribution at a 1-based epoch (linear drift early -> late).
  CountDistribution positives_at(std::int64_t epoch) const {
    const double t = total_epochs > 1
                         ? std::clamp(static_cast<double>(epoch - 1) / static_cast<double>(total_epochs - 1), 0.0, 1.0)
                         : 1.0;
    return CountDistribution::lerp(positives_early, positives_late, t);
  }
};

struct RatioRow {
  std::int64_t epoch = 0;
  std::int64_t batch_size = 0;
  std::int64_t batches = 0;
  std::int64_t undefined_batches = 0;     // no negatives: pos/neg undefined, excluded from pos/neg stats
  std::int64_t zero_positive_batches = 0; // every image without positives
  double mean_ratio_pct = 0;              // 100 * pos / neg
  double std_ratio_pct = 0;
  double mean_pos_total_pct = 0;          // 100 * pos / (pos + neg)
  double std_pos_total_pct = 0;
};

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {NAN, NAN};
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

// Simulates `batches_per_point` mini-batches for every (epoch, batch size) and
// reports the distribution of the per-batch positive/negative ratio.
inline std::vector<RatioRow> posneg_ratio_study(const SamplerSpec& spec) {
  spec.validate();
  std::vector<RatioRow> rows;
  for (auto epoch : spec.epochs) {
    const auto pos_dist = spec.positives_at(epoch);
    for (auto batch : spec.batch_sizes) {
      std::mt19937_64 eng(mix_seed(spec.seed, static_cast<std::uint64_t>(epoch) * 1000003ULL +
                                                  static_cast<std::uint64_t>(batch)));
      RatioRow row;
      row.epoch = epoch;
      row.batch_size = batch;
      row.batches = spec.batches_per_point;
      std::vector<double> ratios, fractions;
      for (std::int64_t b = 0; b < spec.batches_per_point; ++b) {
        std::int64_t pos = 0, neg = 0;
        for (std::int64_t i = 0; i < batch; ++i) {
          pos += pos_dist.sample(eng);
          neg += spec.negatives.sample(eng);
        }
        if (spec.quota) {
          const auto budget = spec.quota->rois_per_image * batch;
          const auto pos_cap = static_cast<std::int64_t>(std::floor(spec.quota->positive_fraction *
                                                                    static_cast<double>(budget)));
          pos = std::min(pos, pos_cap);
          neg = std::min(neg, budget - pos);
        }
        if (pos == 0) ++row.zero_positive_batches;
        if (pos + neg > 0) fractions.push_back(100.0 * static_cast<double>(pos) / static_cast<double>(pos + neg));
        if (neg == 0) {
          ++row.undefined_batches;
          continue;
        }
        ratios.push_back(100.0 * static_cast<double>(pos) / static_cast<double>(neg));
      }
      std::tie(row.mean_ratio_pct, row.std_ratio_pct) = detail::mean_std(ratios);
      std::tie(row.mean_pos_total_pct, row.std_pos_total_pct) = detail::mean_std(fractions);
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace syncbn
