#pragma once

// Self-checks behind `syncbn-lab verify`. Each suite runs a list of named
// checks on randomized inputs and reports pass/fail with a short detail line.

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "batchnorm.hpp"
#include "collectives.hpp"
#include "errors.hpp"
#include "gradcheck.hpp"
#include "nn_model.hpp"
#include "optim_schedule.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace syncbn {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;

  bool passed() const {
    for (const auto& c : checks)
      if (!c.passed) return false;
    return !checks.empty();
  }
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  // Mutation: backward passes use eps * 100 while forward uses eps.
  bool inject_eps_mismatch = false;
};

inline const std::vector<std::string>& verify_suites() {
  static const std::vector<std::string> names{"bn", "grad", "collectives", "schedule"};
  return names;
}

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double mean = 0.0, double sd = 1.0) {
  auto t = new_tensor(std::move(shape), 0.0);
  for (auto& v : t.data()) v = rng.normal(mean, sd);
  return t;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline double rel_gap(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0}); }

// Runs one check body, turning exceptions into failures.
inline CheckResult run_check(const std::string& name, const std::function<std::string(bool&)>& body) {
  CheckResult r{name, false, {}};
  try {
    bool ok = true;
    r.detail = body(ok);
    r.passed = ok;
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  return r;
}

struct ShardedCase {
  std::vector<Tensor> shards;
  BNLayerState<double> state;
};

inline ShardedCase random_shards(Rng& rng, int devices, std::int64_t max_n, std::int64_t max_c, std::int64_t max_hw) {
  ShardedCase c;
  const auto C = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_c)));
  const auto H = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_hw)));
  const auto W = 1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_hw)));
  for (int r = 0; r < devices; ++r) {
    // At least two values per channel on every device, so any group can normalize.
    const auto n = std::max<std::int64_t>(1 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_n))),
                                          H * W > 1 ? 1 : 2);
    c.shards.push_back(random_tensor({n, C, H, W}, rng, rng.normal(0, 3), rng.uniform(0.2, 3)));
  }
  c.state = BNLayerState<double>::with_channels(static_cast<std::size_t>(C));
  for (auto& v : c.state.gamma) v = rng.uniform(0.5, 2.0);
  for (auto& v : c.state.beta) v = rng.normal();
  return c;
}

inline std::vector<BNForwardResult<double>> forward_group(const ShardedCase& c, int group, const BNOptions& opt = {}) {
  DeviceGroup g(static_cast<int>(c.shards.size()), group);
  return g.run([&](DeviceHandle& h) {
    auto st = c.state;
    return cgbn_forward(h, c.shards[static_cast<std::size_t>(h.rank())], st, opt);
  });
}

inline SuiteReport verify_bn(const VerifyOptions& opt) {
  SuiteReport rep{"bn", {}};
  rep.checks.push_back(run_check("constant_channel_gives_beta", [&](bool& ok) {
    auto x = new_tensor({4, 2, 3, 3}, 5.0);
    auto s = BNLayerState<double>::with_channels(2);
    s.beta = {0.25, -1.5};
    auto y = bn_forward_local(x, s, BNMode::train).y;
    const auto L = channel_layout(y.shape());
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t c = 0; c < L.channels; ++c)
        for (std::size_t i = 0; i < L.spatial; ++i) ok = ok && y[L.index(n, c, i)] == s.beta[c];
    return std::string(ok ? "y == beta" : "y differs from beta");
  }));

  rep.checks.push_back(run_check("x_hat_moments", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 1));
    auto x = random_tensor({6, 3, 4, 4}, rng, 2.0, 1.5);
    auto s = BNLayerState<double>::with_channels(3);
    auto f = bn_forward_local(x, s, BNMode::train);
    auto st = channel_sum(f.cache.x_hat, true);
    double worst = 0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double m = st.sum[c] / static_cast<double>(st.count);
      const double v = (*st.sum_sq)[c] / static_cast<double>(st.count) - m * m;
      worst = std::max({worst, std::abs(m), std::abs(v - f.cache.var[c] / (f.cache.var[c] + s.eps))});
    }
    ok = worst <= 1e-9;
    return "max deviation " + num(worst);
  }));

  rep.checks.push_back(run_check("concat_equivalence", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 2));
    double worst = 0;
    int cases = 0;
    for (int g : {1, 2, 3, 4, 8}) {
      for (int t = 0; t < 8; ++t, ++cases) {
        const int groups = 1 + static_cast<int>(rng.below(2));
        auto c = random_shards(rng, g * groups, 4, 6, 5);
        auto res = forward_group(c, g);
        for (int grp = 0; grp < groups; ++grp) {
          std::vector<Tensor> part(c.shards.begin() + grp * g, c.shards.begin() + (grp + 1) * g);
          auto ref_state = c.state;
          auto ref = bn_forward_local(concat_batch<double>(part), ref_state, BNMode::train).y;
          std::vector<Tensor> ys;
          for (int r = grp * g; r < (grp + 1) * g; ++r) ys.push_back(res[static_cast<std::size_t>(r)].y);
          auto y = concat_batch<double>(ys);
          for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, rel_gap(y[i], ref[i]));
        }
      }
    }
    ok = worst <= 1e-9;
    return std::to_string(cases) + " cases, max rel gap " + num(worst);
  }));

  rep.checks.push_back(run_check("stats_identical_across_ranks", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 3));
    auto c = random_shards(rng, 4, 3, 4, 3);
    auto res = forward_group(c, 4);
    for (const auto& r : res) {
      ok = ok && std::memcmp(r.cache.mu.data(), res[0].cache.mu.data(), r.cache.mu.size() * sizeof(double)) == 0 &&
           std::memcmp(r.cache.var.data(), res[0].cache.var.data(), r.cache.var.size() * sizeof(double)) == 0;
    }
    return std::string(ok ? "bitwise identical" : "ranks disagree");
  }));

  rep.checks.push_back(run_check("single_device_bitwise", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 4));
    auto c = random_shards(rng, 1, 6, 4, 4);
    auto res = forward_group(c, 1);
    auto s = c.state;
    auto ref = bn_forward_local(c.shards[0], s, BNMode::train).y;
    ok = res[0].y == ref;
    return std::string(ok ? "identical" : "differs from local BN");
  }));

  rep.checks.push_back(run_check("one_pass_matches_two_pass", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 5));
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
      auto c = random_shards(rng, 4, 4, 4, 4);
      auto a = forward_group(c, 2);
      auto b = forward_group(c, 2, BNOptions{VarianceAlgorithm::one_pass, true});
      for (std::size_t r = 0; r < a.size(); ++r)
        for (std::size_t i = 0; i < a[r].y.size(); ++i) worst = std::max(worst, rel_gap(a[r].y[i], b[r].y[i]));
    }
    ok = worst <= 1e-9;
    return "max rel gap " + num(worst);
  }));

  rep.checks.push_back(run_check("running_stats_unbiased", [&](bool& ok) {
    auto x = new_tensor({4, 1}, 0.0);
    for (std::int64_t i = 0; i < 4; ++i) x[static_cast<std::size_t>(i)] = static_cast<double>(i);
    auto s = BNLayerState<double>::with_channels(1, 1e-5, 0.5);
    bn_forward_local(x, s, BNMode::train);
    // mean 1.5, biased var 1.25, unbiased 5/3
    ok = std::abs(s.running_mean[0] - 0.75) < 1e-15 && std::abs(s.running_var[0] - (0.5 + 0.5 * 5.0 / 3.0)) < 1e-15;
    return "running mean " + num(s.running_mean[0]) + ", var " + num(s.running_var[0]);
  }));
  return rep;
}

struct WorldStep {
  double mean_loss = 0;
  Grads mean_grads;
};

inline WorldStep world_step(const ModelSpec& spec, const Params& p, const std::vector<Tensor>& xs,
                            const std::vector<std::vector<std::int64_t>>& ys, int group,
                            std::optional<double> eps_override) {
  DeviceGroup g(static_cast<int>(xs.size()), group);
  auto per = g.run([&](DeviceHandle& h) {
    auto st = init_state(spec);
    ForwardContext ctx{BNMode::train, &h, eps_override};
    const auto r = static_cast<std::size_t>(h.rank());
    auto f = forward(spec, p, st, xs[r], ys[r], ctx);
    return std::make_pair(f.loss.total, backward(spec, p, f.cache, ctx));
  });
  WorldStep out{0, per[0].second};
  for (auto& t : out.mean_grads)
    for (auto& v : t.data()) v = 0;
  for (const auto& [loss, grads] : per) {
    out.mean_loss += loss;
    for (std::size_t k = 0; k < grads.size(); ++k)
      for (std::size_t j = 0; j < grads[k].size(); ++j) out.mean_grads[k][j] += grads[k][j];
  }
  const auto n = static_cast<double>(per.size());
  out.mean_loss /= n;
  for (auto& t : out.mean_grads)
    for (auto& v : t.data()) v /= n;
  return out;
}

inline CheckResult model_fd_check(const std::string& name, const ModelSpec& spec, int devices, int group,
                                  std::int64_t per_device, const VerifyOptions& opt, std::uint64_t salt) {
  return run_check(name, [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, salt));
    auto p = init_params(spec, mix_seed(opt.seed, salt + 1));
    for (auto& q : p)
      for (auto& v : q.value.data()) v += rng.normal(0, 0.2);
    const auto classes = spec.num_classes();
    std::vector<Tensor> xs;
    std::vector<std::vector<std::int64_t>> ys;
    for (int r = 0; r < devices; ++r) {
      Shape shape{per_device};
      shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
      xs.push_back(random_tensor(shape, rng));
      std::vector<std::int64_t> y(static_cast<std::size_t>(per_device));
      for (auto& v : y) v = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(classes)));
      ys.push_back(std::move(y));
    }
    std::optional<double> eps_override;
    if (opt.inject_eps_mismatch) eps_override = spec.bn_eps * 100;
    auto res = world_step(spec, p, xs, ys, group, eps_override);
    std::vector<double> analytic, numeric;
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto fd = central_difference(p[k].value.data(),
                                   [&] { return world_step(spec, p, xs, ys, group, std::nullopt).mean_loss; });
      analytic.insert(analytic.end(), res.mean_grads[k].data().begin(), res.mean_grads[k].data().end());
      numeric.insert(numeric.end(), fd.begin(), fd.end());
    }
    auto cmp = compare_gradients(analytic, numeric, 1e-3 * max_abs(numeric));
    ok = cmp.max_rel_error <= 1e-6;
    return "max rel error " + num(cmp.max_rel_error) + " over " + std::to_string(analytic.size()) + " entries";
  });
}

inline SuiteReport verify_grad(const VerifyOptions& opt) {
  SuiteReport rep{"grad", {}};
  const double eps_factor = opt.inject_eps_mismatch ? 100.0 : 1.0;

  rep.checks.push_back(run_check("bn_backward_finite_differences", [&](bool& ok) {
    Rng rng(mix_seed(opt.seed, 10));
    double worst = 0;
    for (int t = 0; t < 10; ++t) {
      const int g = 1 + static_cast<int>(rng.below(4));
      auto c = random_shards(rng, g, 3, 3, 3);
      std::vector<Tensor> w;
      for (const auto& s : c.shards) w.push_back(random_tensor(s.shape(), rng));
      auto loss = [&] {
        auto res = forward_group(c, g);
        double acc = 0;
        for (std::size_t r = 0; r < res.size(); ++r)
          for (std::size_t i = 0; i < res[r].y.size(); ++i) acc += w[r][i] * res[r].y[i];
        return acc;
      };
      DeviceGroup dg(g, g);
      auto back = dg.run([&](DeviceHandle& h) {
        const auto r = static_cast<std::size_t>(h.rank());
        auto st = c.state;
        auto f = cgbn_forward(h, c.shards[r], st);
        auto bs = c.state;
        bs.eps *= eps_factor;
        return cgbn_backward(h, w[r], f.cache, bs);
      });
      std::vector<double> analytic, numeric;
      for (std::size_t r = 0; r < c.shards.size(); ++r) {
        auto fd = central_difference(c.shards[r].data(), loss);
        analytic.insert(analytic.end(), back[r].dx.data().begin(), back[r].dx.data().end());
        numeric.insert(numeric.end(), fd.begin(), fd.end());
      }
      auto fg = central_difference(std::span<double>(c.state.gamma), loss);
      auto fb = central_difference(std::span<double>(c.state.beta), loss);
      analytic.insert(analytic.end(), back[0].dgamma.begin(), back[0].dgamma.end());
      analytic.insert(analytic.end(), back[0].dbeta.begin(), back[0].dbeta.end());
      numeric.insert(numeric.end(), fg.begin(), fg.end());
      numeric.insert(numeric.end(), fb.begin(), fb.end());
      worst = std::max(worst, compare_gradients(analytic, numeric, 1e-3 * max_abs(numeric)).max_rel_error);
    }
    ok = worst <= 1e-6;
    return "10 cases, max rel error " + num(worst);
  }));

  ModelSpec mlp;
  mlp.input_shape = {5};
  mlp.layers = {LayerSpec::dense(5, 6), LayerSpec::relu(), LayerSpec::dense(6, 3), LayerSpec::softmax_xent()};
  mlp.weight_decay = 0.01;
  rep.checks.push_back(model_fd_check("model_dense_relu", mlp, 1, 1, 6, opt, 20));

  ModelSpec local = ModelSpec::desk_default(2, 4, 4, 3, 3);
  local.layers[1] = LayerSpec::bn(BNSync::local);
  local.weight_decay = 0.01;
  rep.checks.push_back(model_fd_check("model_conv_bn_local", local, 1, 1, 4, opt, 30));

  ModelSpec cross = ModelSpec::desk_default(1, 4, 4, 3, 3);
  cross.weight_decay = 0.01;
  rep.checks.push_back(model_fd_check("model_cross_bn_multi_device", cross, 4, 2, 2, opt, 40));
  return rep;
}

inline SuiteReport verify_collectives(const VerifyOptions& opt) {
  SuiteReport rep{"collectives", {}};
  constexpr int world = 8;

  // 50 allreduce and 50 broadcast rounds on world 8; returns every rank's outputs.
  auto rounds = [&](std::uint64_t seed) {
    DeviceGroup g(world, 4, seed);
    return g.run([&](DeviceHandle& h) {
      std::vector<std::vector<double>> outs;
      for (int round = 0; round < 100; ++round) {
        Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(round)), static_cast<std::uint64_t>(h.rank())));
        std::vector<double> v(1 + round % 13);
        for (auto& e : v) e = rng.normal(0, std::pow(10.0, static_cast<double>(round % 7) - 3));
        if (round % 2 == 0) {
          outs.push_back(allreduce_sum(h, round % 4 == 0 ? Scope::world : Scope::bn_group, v));
        } else {
          outs.push_back(broadcast(h, Scope::world, round % world, v));
        }
      }
      return outs;
    });
  };

  const auto a = rounds(opt.seed);
  rep.checks.push_back(run_check("symmetry_world_8", [&](bool& ok) {
    for (std::size_t round = 0; round < 100; ++round) {
      const bool group_scope = round % 2 == 0 && round % 4 != 0;
      for (std::size_t r = 0; r < world; ++r) {
        const std::size_t ref = group_scope ? (r / 4) * 4 : 0;
        ok = ok && a[r][round] == a[ref][round];
      }
    }
    return std::string(ok ? "100 rounds bitwise identical within scope" : "ranks disagree");
  }));

  rep.checks.push_back(run_check("rank_ordered_sum", [&](bool& ok) {
    // Recompute round 0 (world allreduce) sequentially in rank order.
    std::vector<double> expect;
    for (int r = 0; r < world; ++r) {
      Rng rng(mix_seed(mix_seed(opt.seed, 0), static_cast<std::uint64_t>(r)));
      std::vector<double> v(1);
      for (auto& e : v) e = rng.normal(0, std::pow(10.0, -3.0));
      if (expect.empty()) expect = v;
      else
        for (std::size_t i = 0; i < v.size(); ++i) expect[i] += v[i];
    }
    ok = a[0][0] == expect;
    return std::string(ok ? "matches sequential sum bitwise" : "differs from sequential sum");
  }));

  rep.checks.push_back(run_check("repeat_determinism", [&](bool& ok) {
    ok = rounds(opt.seed) == a;
    return std::string(ok ? "repeat run bitwise identical" : "repeat run differs");
  }));

  rep.checks.push_back(run_check("timeout_names_missing_rank", [&](bool& ok) {
    DeviceGroup g(GroupOptions{3, 3, opt.seed, std::chrono::milliseconds(200)});
    std::string msg;
    try {
      g.run([&](DeviceHandle& h) {
        if (h.rank() != 2) allreduce_sum(h, Scope::world, std::vector<double>{1.0});
      });
    } catch (const CollectiveTimeout& e) {
      msg = e.what();
    }
    ok = msg.find("missing rank 2") != std::string::npos;
    return msg.empty() ? std::string("no timeout raised") : msg;
  }));
  return rep;
}

inline SuiteReport verify_schedule(const VerifyOptions&) {
  SuiteReport rep{"schedule", {}};
  constexpr std::int64_t ipe = 100;
  rep.checks.push_back(run_check("base_case_16_0.02", [&](bool& ok) {
    auto p = LRPolicy::normal(0.02, 16, 16);
    ok = scaled_target_lr(p) == 0.02 && lr_at(p, 0, 0, ipe) == 0.02 && lr_at(p, 7, ipe - 1, ipe) == 0.02;
    return "plateau " + num(lr_at(p, 3, 5, ipe));
  }));
  rep.checks.push_back(run_check("normal_breakpoints", [&](bool& ok) {
    auto p = LRPolicy::normal(0.02, 16, 16);
    const double r = 0.02;
    ok = lr_at(p, 7, ipe - 1, ipe) == r && lr_at(p, 8, 0, ipe) == r * 0.1 && lr_at(p, 9, ipe - 1, ipe) == r * 0.1 &&
         lr_at(p, 10, 0, ipe) == r * 0.1 * 0.1 && p.end_epoch == 11;
    return "x0.1 at 8 and 10, end 11";
  }));
  rep.checks.push_back(run_check("long_breakpoints", [&](bool& ok) {
    auto p = LRPolicy::long_policy(0.02, 16, 16);
    const double r = 0.02;
    ok = lr_at(p, 10, ipe - 1, ipe) == r && lr_at(p, 11, 0, ipe) == r * 0.1 && lr_at(p, 14, 0, ipe) == r * 0.1 * 0.1 &&
         lr_at(p, 17, 0, ipe) == r * 0.1 * 0.1 * 0.5 && p.end_epoch == 18;
    return "x0.1 at 11 and 14, x0.5 at 17, end 18";
  }));
  rep.checks.push_back(run_check("warmup_endpoints", [&](bool& ok) {
    auto p = LRPolicy::normal(0.02, 16, 256);
    p.warmup_iters = 500;
    ok = lr_at(p, 0, 0, 1000) == 0.02 && lr_at(p, 0, 500, 1000) == 0.32 && scaled_target_lr(p) == 0.32;
    return "start " + num(lr_at(p, 0, 0, 1000)) + ", end " + num(lr_at(p, 0, 500, 1000));
  }));
  rep.checks.push_back(run_check("zero_warmup_flat_start", [&](bool& ok) {
    auto p = LRPolicy::normal(0.02, 16, 256);
    ok = lr_at(p, 0, 0, ipe) == scaled_target_lr(p);
    return "first lr " + num(lr_at(p, 0, 0, ipe));
  }));
  rep.checks.push_back(run_check("accumulation_equivalence", [&](bool& ok) {
    Params p{{"w", new_tensor({3}, 1.0), true}};
    std::vector<Grads> gs;
    for (int i = 0; i < 4; ++i) {
      auto g = new_tensor({3}, 0.0);
      for (std::size_t j = 0; j < 3; ++j) g[j] = 0.1 * static_cast<double>(i + 1) * static_cast<double>(j + 1);
      gs.push_back({g});
    }
    auto cmp = accumulate_equivalence(p, gs, 0.05);
    ok = cmp.max_rel_gap <= 1e-12;
    return "max rel gap " + num(cmp.max_rel_gap);
  }));
  return rep;
}

}  // namespace detail

inline SuiteReport run_verify_suite(const std::string& suite, const VerifyOptions& opt = {}) {
  if (suite == "bn") return detail::verify_bn(opt);
  if (suite == "grad") return detail::verify_grad(opt);
  if (suite == "collectives") return detail::verify_collectives(opt);
  if (suite == "schedule") return detail::verify_schedule(opt);
  throw InvalidArgument("unknown verify suite '" + suite + "' (expected bn, grad, collectives or schedule)");
}

}  // namespace syncbn
