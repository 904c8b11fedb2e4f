// syncbn-lab: command-line front end for training runs, self-checks and the
// statistical studies.
//
// Exit codes: 0 success, 1 verification failure or runtime error,
// 2 invalid configuration or arguments, 3 training diverged.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "syncbn/analysis.hpp"
#include "syncbn/config.hpp"
#include "syncbn/dataset.hpp"
#include "syncbn/trainer.hpp"
#include "syncbn/verify.hpp"

namespace fs = std::filesystem;
using namespace syncbn;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config, "experiment config (JSON); defaults apply when omitted");
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--out", args.out, "output directory (default: config output_dir)");
}

ExperimentConfig load(const CommonArgs& args) {
  ExperimentConfig cfg = args.config.empty() ? parse_config_text("{}") : load_config(args.config);
  if (args.seed) {
    cfg.seed = *args.seed;
    cfg.ratio_study.seed = *args.seed;
  }
  if (!args.out.empty()) cfg.output_dir = args.out;
  return cfg;
}

fs::path prepare_out(const ExperimentConfig& cfg) {
  fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) { write_file(path.string(), j.dump(2) + "\n"); }

void log_line(const std::string& s) { std::cerr << "[syncbn-lab] " << s << "\n"; }

int cmd_train(const CommonArgs& args) {
  const auto cfg = load(args);
  const auto dir = prepare_out(cfg);
  const auto data = generate_dataset(cfg.dataset, cfg.seed);
  const auto train_hash = git_blob_hash(serialize_dataset(data.train));
  const auto eval_hash = git_blob_hash(serialize_dataset(data.eval));
  log_line("training n=" + std::to_string(cfg.world_size) + " g=" + std::to_string(cfg.bn_group_size) +
           " batch=" + std::to_string(cfg.total_batch()) + " epochs=" + std::to_string(cfg.num_epochs()));

  const auto result = train(cfg, data, TrainOptions{log_line, std::nullopt});
  write_file((dir / "metrics.csv").string(), metrics_csv(result.rows));
  if (result.status == RunStatus::completed) write_json(dir / "checkpoint.json", checkpoint_json(result));
  write_json(dir / "manifest.json", run_manifest(cfg, result, train_hash, eval_hash));
  if (cfg.record_wall_time) {
    write_json(dir / "timing.json", json{{"wall_ms_total", result.wall_ms_total},
                                         {"iterations", result.iterations_run},
                                         {"ms_per_iteration", result.iterations_run > 0
                                                                  ? result.wall_ms_total /
                                                                        static_cast<double>(result.iterations_run)
                                                                  : 0.0}});
  }
  if (result.status == RunStatus::diverged) {
    std::cout << "diverged at iteration " << *result.diverged_at << ": " << result.divergence_reason << "\n";
    return kExitDiverged;
  }
  std::cout << "completed " << result.iterations_run << " iterations, final eval accuracy "
            << format_double(result.final_eval_acc) << "\n";
  return kExitOk;
}

int cmd_verify(const std::string& suite, const std::string& inject, std::uint64_t seed, const std::string& out) {
  VerifyOptions opt;
  opt.seed = seed;
  if (inject == "eps-mismatch") {
    opt.inject_eps_mismatch = true;
  } else if (!inject.empty()) {
    throw ConfigError("unknown --inject value '" + inject + "' (expected eps-mismatch)");
  }
  std::vector<std::string> suites;
  if (suite == "all") {
    suites = verify_suites();
  } else {
    suites.push_back(suite);
  }
  bool all_ok = true;
  json report = json::array();
  for (const auto& name : suites) {
    SuiteReport rep;
    try {
      rep = run_verify_suite(name, opt);
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
    json checks = json::array();
    for (const auto& c : rep.checks) {
      std::cout << (c.passed ? "PASS " : "FAIL ") << rep.suite << "." << c.name << "  " << c.detail << "\n";
      checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    }
    all_ok = all_ok && rep.passed();
    report.push_back({{"suite", rep.suite}, {"passed", rep.passed()}, {"checks", checks}});
  }
  if (!out.empty()) {
    fs::create_directories(out);
    write_json(fs::path(out) / "verify.json", json{{"seed", seed}, {"inject", inject}, {"suites", report}});
  }
  std::cout << (all_ok ? "verify: all checks passed" : "verify: FAILED") << "\n";
  return all_ok ? kExitOk : kExitFailure;
}

GradientSource variance_source(const ExperimentConfig& cfg) {
  if (cfg.variance.source == "linear") return linear_scalar_source();
  // Per-sample i.i.d. gradients need a model without batch coupling: an MLP on
  // flattened images drawn from the dataset distribution.
  const auto& d = cfg.dataset;
  const auto flat = d.channels * d.height * d.width;
  ModelSpec spec;
  spec.input_shape = {flat};
  spec.layers = {LayerSpec::dense(flat, cfg.features), LayerSpec::relu(), LayerSpec::dense(cfg.features, d.classes),
                 LayerSpec::softmax_xent()};
  auto params = init_params(spec, init_seed(cfg.seed));
  auto templates = class_templates(d);
  BatchSampler sampler = [templates, d, flat](std::int64_t n, Rng& rng) {
    Tensor x = new_tensor({n, flat}, 0.0);
    std::vector<std::int64_t> y(static_cast<std::size_t>(n));
    const auto plane = static_cast<std::size_t>(flat);
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(d.classes)));
      for (std::size_t j = 0; j < plane; ++j) {
        x[i * plane + j] = templates[static_cast<std::size_t>(y[i]) * plane + j] + d.noise * rng.normal();
      }
    }
    return std::pair{std::move(x), std::move(y)};
  };
  return model_source(spec, params, sampler);
}

int cmd_variance(const CommonArgs& args) {
  const auto cfg = load(args);
  const auto dir = prepare_out(cfg);
  const auto& v = cfg.variance;
  const auto src = variance_source(cfg);

  json law = json::array();
  std::string csv = "batch_size,trials,variance,n_times_variance,ci_half_width\n";
  for (auto n : v.batch_sizes) {
    const auto rep = estimate_grad_variance(src, n, v.trials, cfg.seed, v.bootstrap_resamples);
    json blocks = json::object();
    for (std::size_t i = 0; i < rep.block_names.size(); ++i) blocks[rep.block_names[i]] = rep.block_variance[i];
    const double nv = static_cast<double>(n) * rep.aggregate;
    law.push_back({{"batch_size", n},
                   {"trials", rep.trials},
                   {"variance", rep.aggregate},
                   {"n_times_variance", nv},
                   {"ci_half_width", rep.ci_half_width},
                   {"blocks", blocks}});
    csv += std::to_string(n) + "," + std::to_string(rep.trials) + "," + format_double(rep.aggregate) + "," +
           format_double(nv) + "," + format_double(rep.ci_half_width) + "\n";
    std::cout << "N=" << n << "  Var=" << format_double(rep.aggregate) << "  N*Var=" << format_double(nv) << "\n";
  }

  json equivalence = json::array();
  for (auto k : v.k) {
    for (auto scaling : {LrScaling::linear, LrScaling::unscaled}) {
      const auto rep = variance_equivalence_ratio(src, v.equivalence_batch, k, v.lr, v.trials, cfg.seed, scaling);
      const char* name = scaling == LrScaling::linear ? "linear" : "unscaled";
      equivalence.push_back({{"k", k},
                             {"scaling", name},
                             {"batch_size", rep.batch_size},
                             {"lr", rep.lr},
                             {"accumulated_variance", rep.accumulated_variance},
                             {"large_variance", rep.large_variance},
                             {"ratio", rep.ratio},
                             {"expected", scaling == LrScaling::linear ? 1.0 : 1.0 / static_cast<double>(k * k)}});
      std::cout << "k=" << k << " " << name << "  ratio=" << format_double(rep.ratio) << "\n";
    }
  }
  write_json(dir / "variance.json",
             json{{"source", v.source},
                  {"seed", cfg.seed},
                  {"ratio_definition", "Var(one step of lr_hat on batch k*N) / Var(k accumulated steps of lr on batch N)"},
                  {"one_over_n_law", law},
                  {"equivalence", equivalence},
                  {"config", resolved_json(cfg)}});
  write_file((dir / "variance_law.csv").string(), csv);
  return kExitOk;
}

int cmd_ratio_study(const CommonArgs& args) {
  const auto cfg = load(args);
  const auto dir = prepare_out(cfg);
  const auto rows = posneg_ratio_study(cfg.ratio_study);
  std::string csv =
      "epoch,batch_size,batches,undefined_batches,zero_positive_batches,mean_ratio_pct,std_ratio_pct,"
      "mean_pos_total_pct,std_pos_total_pct\n";
  json table = json::array();
  for (const auto& r : rows) {
    csv += std::to_string(r.epoch) + "," + std::to_string(r.batch_size) + "," + std::to_string(r.batches) + "," +
           std::to_string(r.undefined_batches) + "," + std::to_string(r.zero_positive_batches) + "," +
           format_double(r.mean_ratio_pct) + "," + format_double(r.std_ratio_pct) + "," +
           format_double(r.mean_pos_total_pct) + "," + format_double(r.std_pos_total_pct) + "\n";
    table.push_back({{"epoch", r.epoch},
                     {"batch_size", r.batch_size},
                     {"batches", r.batches},
                     {"undefined_batches", r.undefined_batches},
                     {"zero_positive_batches", r.zero_positive_batches},
                     {"mean_ratio_pct", r.mean_ratio_pct},
                     {"std_ratio_pct", r.std_ratio_pct},
                     {"mean_pos_total_pct", r.mean_pos_total_pct},
                     {"std_pos_total_pct", r.std_pos_total_pct}});
    std::printf("epoch %2lld  batch %4lld  ratio %7.3f%% +- %6.3f  (pos/total %6.3f%%)\n",
                static_cast<long long>(r.epoch), static_cast<long long>(r.batch_size), r.mean_ratio_pct,
                r.std_ratio_pct, r.mean_pos_total_pct);
  }
  write_file((dir / "ratio_study.csv").string(), csv);
  write_json(dir / "ratio_study.json",
             json{{"ratio_definition", "100 * sum(positives) / sum(negatives) per mini-batch"},
                  {"pos_total_definition", "100 * sum(positives) / (sum(positives) + sum(negatives)) per mini-batch"},
                  {"undefined_batches", "batches with zero negatives; excluded from the pos/neg statistics"},
                  {"rows", table},
                  {"config", resolved_json(cfg)["ratio_study"]},
                  {"seed", cfg.seed}});
  return kExitOk;
}

int cmd_lr_preview(const CommonArgs& args) {
  const auto cfg = load(args);
  const auto p = cfg.resolved_lr();
  const auto ipe = cfg.iters_per_epoch();
  std::string csv = "iter,lr\n";
  for (std::int64_t e = 0; e < cfg.num_epochs(); ++e)
    for (std::int64_t i = 0; i < ipe; ++i) csv += std::to_string(e * ipe + i) + "," + format_double(lr_at(p, e, i, ipe)) + "\n";
  if (args.out.empty()) {
    std::cout << csv;
  } else {
    fs::create_directories(args.out);
    write_file((fs::path(args.out) / "lr_preview.csv").string(), csv);
  }
  return kExitOk;
}

int cmd_gen_data(const CommonArgs& args) {
  const auto cfg = load(args);
  const auto dir = prepare_out(cfg);
  const auto data = generate_dataset(cfg.dataset, cfg.seed);
  const auto train_bytes = serialize_dataset(data.train);
  const auto eval_bytes = serialize_dataset(data.eval);
  write_file((dir / "train.sbnd").string(), train_bytes);
  write_file((dir / "eval.sbnd").string(), eval_bytes);
  const auto dropped = cfg.dropped_samples();
  if (dropped > 0) {
    log_line("size " + std::to_string(cfg.dataset.size) + " is not divisible by total batch " +
             std::to_string(cfg.total_batch()) + ": training drops the last " + std::to_string(dropped) +
             " samples of every epoch");
  }
  write_json(dir / "dataset.json", json{{"seed", cfg.seed},
                                        {"format", "SBND v1"},
                                        {"dataset", resolved_json(cfg)["dataset"]},
                                        {"train_blob_sha1", git_blob_hash(train_bytes)},
                                        {"eval_blob_sha1", git_blob_hash(eval_bytes)},
                                        {"dropped_per_epoch", dropped},
                                        {"linear_probe_accuracy", nearest_mean_probe(data.train, data.eval)}});
  std::cout << "wrote " << data.train.size() << " train and " << data.eval.size() << " eval samples to "
            << dir.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synchronized batch norm and large mini-batch training lab"};
  app.require_subcommand(1);

  CommonArgs train_args, variance_args, ratio_args, lr_args, data_args;
  auto* train_cmd = app.add_subcommand("train", "run a multi-device training experiment");
  add_common(train_cmd, train_args);
  auto* variance_cmd = app.add_subcommand("variance", "gradient variance law and update-variance equivalence");
  add_common(variance_cmd, variance_args);
  auto* ratio_cmd = app.add_subcommand("ratio-study", "positive/negative sample ratio versus batch size");
  add_common(ratio_cmd, ratio_args);
  auto* lr_cmd = app.add_subcommand("lr-preview", "dump the per-iteration learning rate as CSV");
  add_common(lr_cmd, lr_args);
  auto* data_cmd = app.add_subcommand("gen-data", "generate the synthetic dataset files");
  add_common(data_cmd, data_args);

  std::string suite = "all", inject, verify_out;
  std::uint64_t verify_seed = 1;
  auto* verify_cmd = app.add_subcommand("verify", "run invariant self-checks");
  verify_cmd->add_option("suite", suite, "bn, grad, collectives, schedule or all")->capture_default_str();
  verify_cmd->add_option("--inject", inject, "mutation to inject (eps-mismatch)");
  verify_cmd->add_option("--seed", verify_seed, "seed for randomized checks")->capture_default_str();
  verify_cmd->add_option("--out", verify_out, "directory for verify.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*verify_cmd) return cmd_verify(suite, inject, verify_seed, verify_out);
    if (*variance_cmd) return cmd_variance(variance_args);
    if (*ratio_cmd) return cmd_ratio_study(ratio_args);
    if (*lr_cmd) return cmd_lr_preview(lr_args);
    if (*data_cmd) return cmd_gen_data(data_args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged at iteration " << e.global_iter() << ": " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
