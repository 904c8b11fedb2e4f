#pragma once

// Data-parallel training on a simulated device group.
//
// Every rank holds a full replica of the parameters. Each epoch draws a
// seeded permutation of the training set and splits every global batch into
// contiguous per-rank shards. Per iteration a rank runs forward (with
// synchronized BN where the model asks for it) and backward on its shard,
// the gradients are averaged over the world with allreduce, and every rank
// applies the identical SGD step. Rank 0 records the metrics; the caller
// owns all file output.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "collectives.hpp"
#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "nn_model.hpp"
#include "optim_schedule.hpp"

namespace syncbn {

struct MetricsRow {
  std::int64_t epoch = 0;  // 0-based, as passed to lr_at
  std::int64_t iter = 0;   // iteration within the epoch; eval rows use iters_per_epoch
  double lr = 0;
  double task_loss = 0;
  double reg_loss = 0;
  double total_loss = 0;
  std::optional<double> eval_acc;  // eval rows only
  double wall_ms = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,iter,lr,task_loss,reg_loss,total_loss,eval_acc,wall_ms";

enum class RunStatus { completed, diverged };

struct TrainResult {
  RunStatus status = RunStatus::completed;
  std::vector<MetricsRow> rows;
  std::optional<std::int64_t> diverged_at;  // global iteration
  std::string divergence_reason;
  std::int64_t warmup_iters = 0;
  std::int64_t iters_per_epoch = 0;
  std::int64_t dropped_per_epoch = 0;
  std::int64_t iterations_run = 0;
  double final_eval_acc = NAN;
  double wall_ms_total = 0;
  Params params;  // rank 0 replica at the end of the run
  ModelState state;
  SGDState optimizer;
};

struct TrainOptions {
  std::function<void(const std::string&)> log;
  // Forwarded to the model (mutation testing of the BN backward).
  std::optional<double> backward_eps_override;
};

struct EvalResult {
  LossValue loss;
  double accuracy = 0;
};

// Eval-mode pass over `ds` in chunks; BN layers use their running statistics.
inline EvalResult evaluate(const ModelSpec& spec, const Params& params, ModelState state, const Dataset& ds,
                           std::int64_t chunk = 512) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
  std::iota(order.begin(), order.end(), 0);
  double task = 0;
  std::int64_t correct = 0;
  LossValue last;
  for (std::int64_t begin = 0; begin < ds.size(); begin += chunk) {
    const auto count = std::min(chunk, ds.size() - begin);
    auto [x, y] = gather_batch(ds, order, begin, count);
    auto f = forward(spec, params, state, x, y, ForwardContext{BNMode::eval, nullptr, std::nullopt});
    task += f.loss.task_loss * static_cast<double>(count);
    last = f.loss;
    const auto pred = predict(f.logits);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == y[i];
  }
  EvalResult r;
  r.loss.task_loss = task / static_cast<double>(ds.size());
  r.loss.reg_loss = last.reg_loss;
  r.loss.total = r.loss.task_loss + r.loss.reg_loss;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  return r;
}

inline std::vector<std::int64_t> epoch_permutation(std::uint64_t seed, std::int64_t epoch, std::int64_t size) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(size));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(mix_seed(seed, 0x5045524dULL), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order);
  return order;
}

inline std::uint64_t init_seed(std::uint64_t seed) { return mix_seed(seed, 0x494e4954ULL); }

namespace detail {

inline std::vector<double> flatten(const Grads& g) {
  std::vector<double> out;
  for (const auto& t : g) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

inline std::vector<double> flatten(const Params& p) {
  std::vector<double> out;
  for (const auto& t : p) out.insert(out.end(), t.value.data().begin(), t.value.data().end());
  return out;
}

inline void unflatten(const std::vector<double>& flat, Grads& g) {
  std::size_t at = 0;
  for (auto& t : g) {
    auto d = t.data();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), d.size(), d.begin());
    at += d.size();
  }
}

}  // namespace detail

inline TrainResult train(const ExperimentConfig& cfg, const DatasetPair& data, const TrainOptions& opt = {}) {
  cfg.validate();
  const auto spec = cfg.model();
  const auto lr_policy = cfg.resolved_lr();
  const auto n = cfg.world_size;
  const auto b = cfg.per_device_batch;
  const auto total_batch = cfg.total_batch();
  const auto ipe = cfg.iters_per_epoch();
  const auto epochs = cfg.num_epochs();
  if (data.train.size() != cfg.dataset.size) throw ConfigError("training set size does not match the config");

  TrainResult result;
  result.warmup_iters = lr_policy.warmup_iters;
  result.iters_per_epoch = ipe;
  result.dropped_per_epoch = cfg.dropped_samples();
  auto log = [&](const std::string& m) {
    if (opt.log) opt.log(m);
  };
  log("warmup_iters=" + std::to_string(lr_policy.warmup_iters) + " iters_per_epoch=" + std::to_string(ipe));
  if (result.dropped_per_epoch > 0) {
    log("dataset size " + std::to_string(cfg.dataset.size) + " is not divisible by total batch " +
        std::to_string(total_batch) + ": dropping the last " + std::to_string(result.dropped_per_epoch) +
        " samples of every epoch");
  }

  DeviceGroup group(GroupOptions{static_cast<int>(n), static_cast<int>(cfg.bn_group_size), cfg.seed,
                                 std::chrono::milliseconds{cfg.collective_timeout_ms}});
  const auto run_start = std::chrono::steady_clock::now();
  auto& rows = result.rows;  // written by rank 0 only

  struct Replica {
    Params params;
    ModelState state;
    SGDState optimizer;
    std::int64_t iterations = 0;
  };

  auto worker = [&](DeviceHandle& h) -> Replica {
    Replica rep;
    rep.params = init_params(spec, init_seed(cfg.seed));
    rep.state = init_state(spec);
    // Weight decay lives in the model loss, so the optimizer must not add it again.
    rep.optimizer = SGDState::zeros_like(rep.params, cfg.momentum, 0.0);
    const bool leader = h.rank() == 0;
    ForwardContext ctx{BNMode::train, &h, opt.backward_eps_override};
    std::optional<double> initial_loss;
    std::int64_t strikes = 0;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
      const auto order = epoch_permutation(cfg.seed, epoch, cfg.dataset.size);
      for (std::int64_t it = 0; it < ipe; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto global_iter = epoch * ipe + it;
        const double lr = lr_at(lr_policy, epoch, it, ipe);
        auto [x, y] = gather_batch(data.train, order, it * total_batch + h.rank() * b, b);

        ForwardResult f;
        Grads grads;
        try {
          f = forward(spec, rep.params, rep.state, x, y, ctx);
          grads = backward(spec, rep.params, f.cache, ctx);
        } catch (const NonFiniteError& e) {
          throw DivergenceError(std::string("non-finite value: ") + e.what(), global_iter);
        }
        const auto loss_sum = allreduce_sum(h, Scope::world, std::vector<double>{f.loss.task_loss});
        const double task = loss_sum[0] / static_cast<double>(n);
        const double total = task + f.loss.reg_loss;
        if (!std::isfinite(total)) throw DivergenceError("non-finite loss", global_iter);
        if (!initial_loss) initial_loss = total;
        strikes = total > cfg.divergence.factor * *initial_loss ? strikes + 1 : 0;

        auto flat = allreduce_sum(h, Scope::world, detail::flatten(grads));
        for (auto& v : flat) v /= static_cast<double>(n);
        detail::unflatten(flat, grads);
        try {
          sgd_step(rep.params, grads, rep.optimizer, lr);
        } catch (const DivergenceError& e) {
          throw DivergenceError(e.what(), global_iter);
        }
        ++rep.iterations;

        if (leader) {
          MetricsRow row{epoch, it, lr, task, f.loss.reg_loss, total, std::nullopt, 0.0};
          if (cfg.record_wall_time) {
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
          }
          rows.push_back(row);
        }
        if (strikes >= cfg.divergence.patience) {
          char factor[32];
          std::snprintf(factor, sizeof factor, "%g", cfg.divergence.factor);
          throw DivergenceError(std::string("loss above ") + factor + "x initial for " +
                                    std::to_string(strikes) + " iterations",
                                global_iter);
        }
        const bool check = cfg.replica_check_interval > 0 && (global_iter + 1) % cfg.replica_check_interval == 0;
        if (check || (epoch + 1 == epochs && it + 1 == ipe)) {
          const auto mine = detail::flatten(rep.params);
          const auto ref = broadcast(h, Scope::world, 0, mine);
          if (std::memcmp(ref.data(), mine.data(), mine.size() * sizeof(double)) != 0) {
            throw Error("replica divergence: rank " + std::to_string(h.rank()) +
                        " parameters differ from rank 0 after iteration " + std::to_string(global_iter));
          }
        }
      }
      if (leader) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto ev = evaluate(spec, rep.params, rep.state, data.eval);
        MetricsRow row{epoch, ipe, lr_at(lr_policy, epoch, ipe, ipe), ev.loss.task_loss, ev.loss.reg_loss,
                       ev.loss.total, ev.accuracy, 0.0};
        if (cfg.record_wall_time) {
          row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        }
        rows.push_back(row);
      }
    }
    return rep;
  };

  try {
    auto replicas = group.run(worker);
    auto& r0 = replicas.front();
    result.iterations_run = r0.iterations;
    result.params = std::move(r0.params);
    result.state = std::move(r0.state);
    result.optimizer = std::move(r0.optimizer);
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
      if (it->eval_acc) {
        result.final_eval_acc = *it->eval_acc;
        break;
      }
    }
  } catch (const DivergenceError& e) {
    result.status = RunStatus::diverged;
    result.diverged_at = e.global_iter();
    result.divergence_reason = e.what();
    result.iterations_run = e.global_iter();
    log("diverged at iteration " + std::to_string(e.global_iter()) + ": " + e.what());
  }
  result.wall_ms_total =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - run_start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Output files

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + std::to_string(r.iter) + "," + format_double(r.lr) + "," +
           format_double(r.task_loss) + "," + format_double(r.reg_loss) + "," + format_double(r.total_loss) + "," +
           (r.eval_acc ? format_double(*r.eval_acc) : std::string()) + "," + format_double(r.wall_ms) + "\n";
  }
  return out;
}

inline json checkpoint_json(const TrainResult& r) {
  json params = json::array();
  for (std::size_t i = 0; i < r.params.size(); ++i) {
    const auto& p = r.params[i];
    json entry{{"name", p.name},
               {"shape", p.value.shape()},
               {"decay", p.decay},
               {"value", std::vector<double>(p.value.data().begin(), p.value.data().end())}};
    if (i < r.optimizer.velocity.size()) {
      const auto v = r.optimizer.velocity[i].data();
      entry["velocity"] = std::vector<double>(v.begin(), v.end());
    }
    params.push_back(std::move(entry));
  }
  json bn = json::array();
  for (const auto& s : r.state.bn) bn.push_back({{"running_mean", s.mean}, {"running_var", s.var}});
  return json{{"iterations", r.iterations_run},
              {"momentum", r.optimizer.momentum},
              {"params", params},
              {"bn", bn},
              {"params_checksum", params_fingerprint(r.params)}};
}

inline json run_manifest(const ExperimentConfig& cfg, const TrainResult& r, const std::string& train_hash,
                         const std::string& eval_hash) {
  const auto samples = r.iterations_run * cfg.total_batch();
  return json{
      {"command", "train"},
      {"status", r.status == RunStatus::completed ? "completed" : "diverged"},
      {"diverged_at_iter", r.diverged_at ? json(*r.diverged_at) : json(nullptr)},
      {"divergence_reason", r.divergence_reason},
      {"config", resolved_json(cfg)},
      {"resolved",
       {{"total_batch", cfg.total_batch()},
        {"target_lr", scaled_target_lr(cfg.resolved_lr())},
        {"warmup_iters", r.warmup_iters},
        {"iters_per_epoch", r.iters_per_epoch},
        {"dropped_samples_per_epoch", r.dropped_per_epoch},
        {"iterations_run", r.iterations_run},
        {"samples_seen", samples},
        {"iterations_at_base_batch", samples / cfg.lr.base_batch}}},
      {"dataset", {{"format", "SBND v1"}, {"train_blob_sha1", train_hash}, {"eval_blob_sha1", eval_hash}}},
      {"final_eval_acc", std::isfinite(r.final_eval_acc) ? json(r.final_eval_acc) : json(nullptr)},
      {"params_checksum", r.status == RunStatus::completed ? json(params_fingerprint(r.params)) : json(nullptr)},
      {"outputs", {"metrics.csv", "checkpoint.json", "manifest.json"}},
  };
}

}  // namespace syncbn
