#pragma once

// Experiment configuration: JSON in, JSON out. Every field has an explicit
// default; unknown keys are rejected so typos fail loudly. `resolved_json`
// writes back the full configuration with derived values filled in.

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "analysis.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "nn_model.hpp"
#include "optim_schedule.hpp"

namespace syncbn {

using json = nlohmann::ordered_json;

struct DivergenceRule {
  double factor = 1000.0;      // loss above factor * initial loss counts as a strike
  std::int64_t patience = 100;  // consecutive strikes before the run is declared diverged
};

struct VarianceStudyConfig {
  std::string source = "linear";  // linear | model
  std::vector<std::int64_t> batch_sizes{1, 2, 4, 8, 16};
  std::int64_t trials = 1000;
  std::vector<std::int64_t> k{1, 2, 4};
  std::int64_t equivalence_batch = 8;
  double lr = 0.02;
  int bootstrap_resamples = 1000;
};

struct ExperimentConfig {
  std::int64_t world_size = 1;
  std::int64_t per_device_batch = 8;
  std::int64_t bn_group_size = 1;
  std::optional<std::int64_t> epochs;  // defaults to the policy's end epoch
  std::uint64_t seed = 1;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  PolicyName policy = PolicyName::normal;
  LRPolicy lr = LRPolicy::normal();
  std::optional<std::int64_t> warmup_iters;  // unset: min(500, one epoch)

  std::optional<std::vector<LayerSpec>> layers;  // unset: conv3x3 -> bn(cross) -> relu -> pool -> dense
  std::int64_t features = 8;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  VarianceAlgorithm bn_variance = VarianceAlgorithm::two_pass;

  DatasetSpec dataset;
  std::int64_t collective_timeout_ms = 30000;
  std::int64_t replica_check_interval = 1;
  DivergenceRule divergence;
  bool record_wall_time = false;
  std::string output_dir = "runs/default";

  VarianceStudyConfig variance;
  SamplerSpec ratio_study;

  std::int64_t total_batch() const { return world_size * per_device_batch; }
  std::int64_t iters_per_epoch() const { return dataset.size / total_batch(); }
  std::int64_t dropped_samples() const { return dataset.size % total_batch(); }
  std::int64_t num_epochs() const { return epochs.value_or(lr.end_epoch); }

  // The LR policy with the actual batch and warmup length filled in.
  LRPolicy resolved_lr() const {
    LRPolicy p = lr;
    p.actual_batch = total_batch();
    p.warmup_iters = warmup_iters.value_or(default_warmup_iters(iters_per_epoch()));
    return p;
  }

  ModelSpec model() const {
    ModelSpec s = layers ? ModelSpec{dataset.image_shape(), *layers}
                         : ModelSpec::desk_default(dataset.channels, dataset.height, dataset.width, dataset.classes,
                                                   features);
    s.weight_decay = weight_decay;
    s.bn_eps = bn_eps;
    s.bn_momentum = bn_momentum;
    s.bn_variance = bn_variance;
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (world_size < 1) fail("world_size must be >= 1");
    if (per_device_batch < 1) fail("per_device_batch must be >= 1");
    if (bn_group_size < 1 || world_size % bn_group_size != 0) fail("bn_group_size must divide world_size");
    if (epochs && *epochs < 1) fail("epochs must be >= 1");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
    if (warmup_iters && *warmup_iters < 0) fail("lr.warmup_iters must be >= 0");
    if (!(bn_eps > 0)) fail("bn.eps must be positive");
    if (!(bn_momentum > 0 && bn_momentum < 1)) fail("bn.momentum must lie in (0, 1)");
    if (features < 1) fail("features must be >= 1");
    if (collective_timeout_ms < 1) fail("collective_timeout_ms must be >= 1");
    if (replica_check_interval < 0) fail("replica_check_interval must be >= 0");
    if (!(divergence.factor > 1) || divergence.patience < 1) fail("divergence needs factor > 1 and patience >= 1");
    if (variance.source != "linear" && variance.source != "model") fail("variance.source must be linear or model");
    if (variance.trials < kMinVarianceTrials) fail("variance.trials must be >= 100");
    try {
      dataset.validate();
      lr.validate();
      model().validate();
      if (model().num_classes() != dataset.classes) fail("model output width must equal dataset.classes");
      ratio_study.validate();
    } catch (const InvalidArgument& e) {
      fail(e.what());
    }
    if (dataset.size < total_batch()) {
      fail("dataset.size (" + std::to_string(dataset.size) + ") is smaller than the total batch (" +
           std::to_string(total_batch()) + ")");
    }
  }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <class T>
void read_opt(const json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key) || j.at(key).is_null()) return;
  T v{};
  read(j, key, v, where);
  out = v;
}

inline CountDistribution parse_count(const json& j, const std::string& where) {
  check_keys(j, {"kind", "mean", "dispersion", "pmf"}, where);
  std::string kind = "poisson";
  read(j, "kind", kind, where);
  CountDistribution d;
  if (kind == "fixed") d.kind = CountDistribution::Kind::fixed;
  else if (kind == "poisson") d.kind = CountDistribution::Kind::poisson;
  else if (kind == "negative_binomial") d.kind = CountDistribution::Kind::negative_binomial;
  else if (kind == "categorical") d.kind = CountDistribution::Kind::categorical;
  else throw ConfigError(where + ".kind must be fixed, poisson, negative_binomial or categorical");
  read(j, "mean", d.mean, where);
  read(j, "dispersion", d.dispersion, where);
  read(j, "pmf", d.pmf, where);
  return d;
}

inline json count_json(const CountDistribution& d) {
  static const char* names[] = {"fixed", "poisson", "negative_binomial", "categorical"};
  json j{{"kind", names[static_cast<int>(d.kind)]}};
  if (d.kind == CountDistribution::Kind::categorical) {
    j["pmf"] = d.pmf;
  } else {
    j["mean"] = d.mean;
    if (d.kind == CountDistribution::Kind::negative_binomial) j["dispersion"] = d.dispersion;
  }
  return j;
}

inline LayerSpec parse_layer(const json& j, const std::string& where) {
  check_keys(j, {"type", "in", "out", "sync"}, where);
  std::string type;
  read(j, "type", type, where);
  LayerSpec L;
  read(j, "in", L.in, where);
  read(j, "out", L.out, where);
  if (type == "dense") L.kind = LayerKind::dense;
  else if (type == "conv3x3") L.kind = LayerKind::conv3x3;
  else if (type == "relu") L.kind = LayerKind::relu;
  else if (type == "bn") L.kind = LayerKind::bn;
  else if (type == "global_mean_pool") L.kind = LayerKind::global_mean_pool;
  else if (type == "softmax_xent") L.kind = LayerKind::softmax_xent;
  else throw ConfigError(where + ".type '" + type + "' is not a layer type");
  std::string sync = "cross";
  read(j, "sync", sync, where);
  if (sync != "cross" && sync != "local") throw ConfigError(where + ".sync must be cross or local");
  L.sync = sync == "cross" ? BNSync::cross : BNSync::local;
  return L;
}

inline json layer_json(const LayerSpec& L) {
  json j{{"type", to_string(L.kind)}};
  if (L.kind == LayerKind::dense || L.kind == LayerKind::conv3x3) {
    j["in"] = L.in;
    j["out"] = L.out;
  }
  if (L.kind == LayerKind::bn) j["sync"] = L.sync == BNSync::cross ? "cross" : "local";
  return j;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  using detail::check_keys;
  using detail::read;
  ExperimentConfig c;
  check_keys(j,
             {"world_size", "per_device_batch", "bn_group_size", "epochs", "seed", "momentum", "weight_decay", "lr",
              "model", "bn", "dataset", "collective_timeout_ms", "replica_check_interval", "divergence",
              "record_wall_time", "output_dir", "variance", "ratio_study"},
             "config");
  read(j, "world_size", c.world_size, "config");
  read(j, "per_device_batch", c.per_device_batch, "config");
  read(j, "bn_group_size", c.bn_group_size, "config");
  detail::read_opt(j, "epochs", c.epochs, "config");
  read(j, "seed", c.seed, "config");
  read(j, "momentum", c.momentum, "config");
  read(j, "weight_decay", c.weight_decay, "config");
  read(j, "collective_timeout_ms", c.collective_timeout_ms, "config");
  read(j, "replica_check_interval", c.replica_check_interval, "config");
  read(j, "record_wall_time", c.record_wall_time, "config");
  read(j, "output_dir", c.output_dir, "config");

  if (j.contains("lr")) {
    const auto& l = j.at("lr");
    check_keys(l, {"policy", "base_lr", "base_batch", "half_lr", "warmup_iters", "milestones", "end_epoch"}, "lr");
    std::string policy = "normal";
    read(l, "policy", policy, "lr");
    if (policy == "normal") {
      c.policy = PolicyName::normal;
      c.lr = LRPolicy::normal();
    } else if (policy == "long") {
      c.policy = PolicyName::long_;
      c.lr = LRPolicy::long_policy();
    } else if (policy == "custom") {
      c.policy = PolicyName::custom;
      if (!l.contains("milestones") || !l.contains("end_epoch")) {
        throw ConfigError("lr.policy custom requires milestones and end_epoch");
      }
    } else {
      throw ConfigError("lr.policy must be normal, long or custom");
    }
    const auto preset = c.lr;
    read(l, "base_lr", c.lr.base_lr, "lr");
    read(l, "base_batch", c.lr.base_batch, "lr");
    read(l, "half_lr", c.lr.half_lr, "lr");
    read(l, "end_epoch", c.lr.end_epoch, "lr");
    detail::read_opt(l, "warmup_iters", c.warmup_iters, "lr");
    if (l.contains("milestones")) {
      c.lr.milestones.clear();
      if (!l.at("milestones").is_array()) throw ConfigError("lr.milestones must be an array");
      for (const auto& m : l.at("milestones")) {
        check_keys(m, {"epoch", "multiplier"}, "lr.milestones[]");
        Milestone ms;
        read(m, "epoch", ms.epoch, "lr.milestones[]");
        read(m, "multiplier", ms.multiplier, "lr.milestones[]");
        c.lr.milestones.push_back(ms);
      }
    }
    // A named policy may restate its own schedule (as resolved configs do) but not change it.
    if (c.policy != PolicyName::custom) {
      bool same = c.lr.end_epoch == preset.end_epoch && c.lr.milestones.size() == preset.milestones.size();
      for (std::size_t i = 0; same && i < preset.milestones.size(); ++i) {
        same = c.lr.milestones[i].epoch == preset.milestones[i].epoch &&
               c.lr.milestones[i].multiplier == preset.milestones[i].multiplier;
      }
      if (!same) throw ConfigError("lr.milestones / lr.end_epoch differ from the named policy; use policy custom");
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"layers", "features"}, "model");
    read(m, "features", c.features, "model");
    if (m.contains("layers")) {
      if (!m.at("layers").is_array()) throw ConfigError("model.layers must be an array");
      std::vector<LayerSpec> layers;
      for (const auto& L : m.at("layers")) layers.push_back(detail::parse_layer(L, "model.layers[]"));
      c.layers = std::move(layers);
    }
  }

  if (j.contains("bn")) {
    const auto& b = j.at("bn");
    check_keys(b, {"eps", "momentum", "variance"}, "bn");
    read(b, "eps", c.bn_eps, "bn");
    read(b, "momentum", c.bn_momentum, "bn");
    std::string v = "two_pass";
    read(b, "variance", v, "bn");
    if (v != "two_pass" && v != "one_pass") throw ConfigError("bn.variance must be two_pass or one_pass");
    c.bn_variance = v == "two_pass" ? VarianceAlgorithm::two_pass : VarianceAlgorithm::one_pass;
  }

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"classes", "size", "eval_size", "channels", "height", "width", "noise", "separation"}, "dataset");
    read(d, "classes", c.dataset.classes, "dataset");
    read(d, "size", c.dataset.size, "dataset");
    read(d, "eval_size", c.dataset.eval_size, "dataset");
    read(d, "channels", c.dataset.channels, "dataset");
    read(d, "height", c.dataset.height, "dataset");
    read(d, "width", c.dataset.width, "dataset");
    read(d, "noise", c.dataset.noise, "dataset");
    read(d, "separation", c.dataset.separation, "dataset");
  }

  if (j.contains("divergence")) {
    const auto& d = j.at("divergence");
    check_keys(d, {"factor", "patience"}, "divergence");
    read(d, "factor", c.divergence.factor, "divergence");
    read(d, "patience", c.divergence.patience, "divergence");
  }

  if (j.contains("variance")) {
    const auto& v = j.at("variance");
    check_keys(v, {"source", "batch_sizes", "trials", "k", "equivalence_batch", "lr", "bootstrap_resamples"},
               "variance");
    read(v, "source", c.variance.source, "variance");
    read(v, "batch_sizes", c.variance.batch_sizes, "variance");
    read(v, "trials", c.variance.trials, "variance");
    read(v, "k", c.variance.k, "variance");
    read(v, "equivalence_batch", c.variance.equivalence_batch, "variance");
    read(v, "lr", c.variance.lr, "variance");
    read(v, "bootstrap_resamples", c.variance.bootstrap_resamples, "variance");
  }

  if (j.contains("ratio_study")) {
    const auto& r = j.at("ratio_study");
    check_keys(r, {"positives_early", "positives_late", "negatives", "batch_sizes", "epochs", "total_epochs",
                   "batches_per_point", "quota"},
               "ratio_study");
    auto& s = c.ratio_study;
    if (r.contains("positives_early")) s.positives_early = detail::parse_count(r.at("positives_early"), "ratio_study.positives_early");
    if (r.contains("positives_late")) s.positives_late = detail::parse_count(r.at("positives_late"), "ratio_study.positives_late");
    if (r.contains("negatives")) s.negatives = detail::parse_count(r.at("negatives"), "ratio_study.negatives");
    read(r, "batch_sizes", s.batch_sizes, "ratio_study");
    read(r, "epochs", s.epochs, "ratio_study");
    read(r, "total_epochs", s.total_epochs, "ratio_study");
    read(r, "batches_per_point", s.batches_per_point, "ratio_study");
    if (r.contains("quota")) {
      if (r.at("quota").is_null()) {
        s.quota.reset();
      } else {
        const auto& q = r.at("quota");
        check_keys(q, {"rois_per_image", "positive_fraction"}, "ratio_study.quota");
        RoiQuota rq;
        read(q, "rois_per_image", rq.rois_per_image, "ratio_study.quota");
        read(q, "positive_fraction", rq.positive_fraction, "ratio_study.quota");
        s.quota = rq;
      }
    }
  }
  c.ratio_study.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse_config_text(text);
}

// Full configuration with every default and derived value spelled out.
inline json resolved_json(const ExperimentConfig& c) {
  const auto lr = c.resolved_lr();
  json milestones = json::array();
  for (const auto& m : lr.milestones) milestones.push_back({{"epoch", m.epoch}, {"multiplier", m.multiplier}});
  json layers = json::array();
  for (const auto& L : c.model().layers) layers.push_back(detail::layer_json(L));
  const auto& s = c.ratio_study;
  json quota = s.quota ? json{{"rois_per_image", s.quota->rois_per_image}, {"positive_fraction", s.quota->positive_fraction}}
                       : json(nullptr);
  return json{
      {"world_size", c.world_size},
      {"per_device_batch", c.per_device_batch},
      {"bn_group_size", c.bn_group_size},
      {"epochs", c.num_epochs()},
      {"seed", c.seed},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"lr",
       {{"policy", to_string(c.policy)},
        {"base_lr", lr.base_lr},
        {"base_batch", lr.base_batch},
        {"half_lr", lr.half_lr},
        {"warmup_iters", lr.warmup_iters},
        {"milestones", milestones},
        {"end_epoch", lr.end_epoch}}},
      {"model", {{"features", c.features}, {"layers", layers}}},
      {"bn",
       {{"eps", c.bn_eps},
        {"momentum", c.bn_momentum},
        {"variance", c.bn_variance == VarianceAlgorithm::two_pass ? "two_pass" : "one_pass"}}},
      {"dataset",
       {{"classes", c.dataset.classes},
        {"size", c.dataset.size},
        {"eval_size", c.dataset.eval_size},
        {"channels", c.dataset.channels},
        {"height", c.dataset.height},
        {"width", c.dataset.width},
        {"noise", c.dataset.noise},
        {"separation", c.dataset.separation}}},
      {"collective_timeout_ms", c.collective_timeout_ms},
      {"replica_check_interval", c.replica_check_interval},
      {"divergence", {{"factor", c.divergence.factor}, {"patience", c.divergence.patience}}},
      {"record_wall_time", c.record_wall_time},
      {"output_dir", c.output_dir},
      {"variance",
       {{"source", c.variance.source},
        {"batch_sizes", c.variance.batch_sizes},
        {"trials", c.variance.trials},
        {"k", c.variance.k},
        {"equivalence_batch", c.variance.equivalence_batch},
        {"lr", c.variance.lr},
        {"bootstrap_resamples", c.variance.bootstrap_resamples}}},
      {"ratio_study",
       {{"positives_early", detail::count_json(s.positives_early)},
        {"positives_late", detail::count_json(s.positives_late)},
        {"negatives", detail::count_json(s.negatives)},
        {"batch_sizes", s.batch_sizes},
        {"epochs", s.epochs},
        {"total_epochs", s.total_epochs},
        {"batches_per_point", s.batches_per_point},
        {"quota", quota}}},
  };
}

}  // namespace syncbn
