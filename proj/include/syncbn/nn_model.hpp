#pragma once

// Small hand-differentiated network: dense, 3x3 convolution (stride 1, zero
// padding 1), relu, batch norm (local or synchronized), global mean pool and
// a softmax cross-entropy head. The loss is
//
//   total = (1/N) sum_i xent(x_i) + (lambda/2) * ||w||^2
//
// where the L2 term covers dense and conv weights only (not biases, not the
// BN affine parameters).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "batchnorm.hpp"
#include "collectives.hpp"
#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace syncbn {

enum class LayerKind { dense, conv3x3, relu, bn, global_mean_pool, softmax_xent };
enum class BNSync { local, cross };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::int64_t in = 0;
  std::int64_t out = 0;
  BNSync sync = BNSync::local;

  static LayerSpec dense(std::int64_t in, std::int64_t out) { return {LayerKind::dense, in, out, BNSync::local}; }
  static LayerSpec conv3x3(std::int64_t cin, std::int64_t cout) { return {LayerKind::conv3x3, cin, cout, BNSync::local}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0, BNSync::local}; }
  static LayerSpec bn(BNSync sync) { return {LayerKind::bn, 0, 0, sync}; }
  static LayerSpec global_mean_pool() { return {LayerKind::global_mean_pool, 0, 0, BNSync::local}; }
  static LayerSpec softmax_xent() { return {LayerKind::softmax_xent, 0, 0, BNSync::local}; }
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::relu: return "relu";
    case LayerKind::bn: return "bn";
    case LayerKind::global_mean_pool: return "global_mean_pool";
    case LayerKind::softmax_xent: return "softmax_xent";
  }
  return "?";
}

struct ModelSpec {
  Shape input_shape;  // per-sample shape: (C,H,W) or (F)
  std::vector<LayerSpec> layers;
  double weight_decay = 0.0;  // lambda
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  VarianceAlgorithm bn_variance = VarianceAlgorithm::two_pass;

  // conv3x3(C->8) -> bn(cross) -> relu -> global_mean_pool -> dense(8->classes) -> softmax_xent
  static ModelSpec desk_default(std::int64_t channels, std::int64_t height, std::int64_t width,
                                std::int64_t classes, std::int64_t features = 8) {
    ModelSpec s;
    s.input_shape = {channels, height, width};
    s.layers = {LayerSpec::conv3x3(channels, features), LayerSpec::bn(BNSync::cross), LayerSpec::relu(),
                LayerSpec::global_mean_pool(), LayerSpec::dense(features, classes), LayerSpec::softmax_xent()};
    return s;
  }

  std::int64_t num_classes() const;

  // Per-sample output shape of every layer; throws on composition errors.
  std::vector<Shape> validate() const {
    if (input_shape.empty()) throw InvalidArgument("model input shape is empty");
    shape_numel(input_shape);
    if (layers.empty() || layers.back().kind != LayerKind::softmax_xent) {
      throw InvalidArgument("model must end with exactly one softmax_xent layer");
    }
    std::vector<Shape> shapes;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& L = layers[i];
      const std::string where = "layer " + std::to_string(i) + " (" + to_string(L.kind) + ")";
      switch (L.kind) {
        case LayerKind::dense:
          if (cur.size() != 1 || cur[0] != L.in || L.out < 1) {
            throw InvalidArgument(where + ": expects (" + std::to_string(L.in) + ") input, got " + shape_str(cur));
          }
          cur = {L.out};
          break;
        case LayerKind::conv3x3:
          if (cur.size() != 3 || cur[0] != L.in || L.out < 1) {
            throw InvalidArgument(where + ": expects (" + std::to_string(L.in) + ",H,W) input, got " + shape_str(cur));
          }
          cur = {L.out, cur[1], cur[2]};
          break;
        case LayerKind::relu:
          break;
        case LayerKind::bn:
          if (cur.size() != 1 && cur.size() != 3) throw InvalidArgument(where + ": needs (C) or (C,H,W) input");
          break;
        case LayerKind::global_mean_pool:
          if (cur.size() != 3) throw InvalidArgument(where + ": needs (C,H,W) input, got " + shape_str(cur));
          cur = {cur[0]};
          break;
        case LayerKind::softmax_xent:
          if (i + 1 != layers.size()) throw InvalidArgument(where + ": loss layer must be last");
          if (cur.size() != 1 || cur[0] < 2) throw InvalidArgument(where + ": needs (K>=2) logits, got " + shape_str(cur));
          break;
      }
      shapes.push_back(cur);
    }
    return shapes;
  }
};

inline std::int64_t ModelSpec::num_classes() const { return validate().back()[0]; }

struct Parameter {
  std::string name;
  Tensor value;
  bool decay = false;  // included in the L2 term
};

using Params = std::vector<Parameter>;
using Grads = std::vector<Tensor>;

struct BNRunningStats {
  std::vector<double> mean;
  std::vector<double> var;
};

// Non-trainable state: running statistics of each BN layer in layer order.
struct ModelState {
  std::vector<BNRunningStats> bn;
};

struct LossValue {
  double task_loss = 0;
  double reg_loss = 0;
  double total = 0;
};

// Sum of squares over the decayed (weight) parameters, flat index order.
inline double l2_norm_sq(const Params& params) {
  double acc = 0;
  for (const auto& p : params) {
    if (!p.decay) continue;
    for (double v : p.value.data()) acc += v * v;
  }
  return acc;
}

// He-style fan-in scaled uniform init; biases zero, BN gamma one / beta zero.
inline Params init_params(const ModelSpec& spec, std::uint64_t seed) {
  const auto shapes = spec.validate();
  Rng rng(mix_seed(seed, 0x1a7e));
  Params params;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    const std::string prefix = "l" + std::to_string(i) + "." + to_string(L.kind);
    switch (L.kind) {
      case LayerKind::dense: {
        const double bound = std::sqrt(6.0 / static_cast<double>(L.in));
        Tensor w = new_tensor({L.in, L.out}, 0.0);
        for (auto& v : w.data()) v = rng.uniform(-bound, bound);
        params.push_back({prefix + ".weight", std::move(w), true});
        params.push_back({prefix + ".bias", new_tensor({L.out}, 0.0), false});
        break;
      }
      case LayerKind::conv3x3: {
        const double bound = std::sqrt(6.0 / static_cast<double>(L.in * 9));
        Tensor w = new_tensor({L.out, L.in, 3, 3}, 0.0);
        for (auto& v : w.data()) v = rng.uniform(-bound, bound);
        params.push_back({prefix + ".weight", std::move(w), true});
        params.push_back({prefix + ".bias", new_tensor({L.out}, 0.0), false});
        break;
      }
      case LayerKind::bn: {
        const std::int64_t c = cur[0];
        params.push_back({prefix + ".gamma", new_tensor({c}, 1.0), false});
        params.push_back({prefix + ".beta", new_tensor({c}, 0.0), false});
        break;
      }
      default:
        break;
    }
    cur = shapes[i];
  }
  return params;
}

inline ModelState init_state(const ModelSpec& spec) {
  const auto shapes = spec.validate();
  ModelState st;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind != LayerKind::bn) continue;
    const auto c = static_cast<std::size_t>(shapes[i][0]);
    st.bn.push_back({std::vector<double>(c, 0.0), std::vector<double>(c, 1.0)});
  }
  return st;
}

// FNV-1a over parameter bytes; lets backward reject caches from other params.
inline std::uint64_t params_fingerprint(const Params& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
    for (std::size_t i = 0; i < p.value.size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

struct ForwardContext {
  BNMode mode = BNMode::train;
  // Required for bn(cross) layers in train mode when running on a device
  // group; without one, cross layers normalize over the local batch.
  DeviceHandle* device = nullptr;
  // Backward uses this eps override when set (mutation testing only).
  std::optional<double> backward_eps_override;
};

struct ForwardCache {
  std::vector<Tensor> inputs;  // input of each layer
  std::vector<std::optional<BNForwardCache<double>>> bn;
  Tensor probs;  // softmax output (N,K)
  std::vector<std::int64_t> labels;
  std::uint64_t params_hash = 0;
  BNMode mode = BNMode::train;
  std::int64_t batch = 0;
};

struct ForwardResult {
  LossValue loss;
  Tensor logits;
  ForwardCache cache;
};

namespace detail {

// Parameters are laid out in layer order; returns the index of layer i's first parameter.
inline std::vector<std::size_t> param_offsets(const ModelSpec& spec) {
  std::vector<std::size_t> off;
  std::size_t k = 0;
  for (const auto& L : spec.layers) {
    off.push_back(k);
    if (L.kind == LayerKind::dense || L.kind == LayerKind::conv3x3 || L.kind == LayerKind::bn) k += 2;
  }
  off.push_back(k);
  return off;
}

inline Tensor dense_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto n = static_cast<std::size_t>(x.extent(0));
  const auto in = static_cast<std::size_t>(w.extent(0));
  const auto out = static_cast<std::size_t>(w.extent(1));
  Tensor y = new_tensor({x.extent(0), w.extent(1)}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      for (std::size_t k = 0; k < in; ++k) acc += x[i * in + k] * w[k * out + o];
      y[i * out + o] = acc;
    }
  }
  return y;
}

inline Tensor conv3x3_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto N = x.extent(0), Ci = x.extent(1), H = x.extent(2), W = x.extent(3);
  const auto Co = w.extent(0);
  Tensor y = new_tensor({N, Co, H, W}, 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Co; ++co)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t ww = 0; ww < W; ++ww) {
          double acc = b[static_cast<std::size_t>(co)];
          for (std::int64_t ci = 0; ci < Ci; ++ci)
            for (std::int64_t kh = 0; kh < 3; ++kh) {
              const auto ih = h + kh - 1;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t kw = 0; kw < 3; ++kw) {
                const auto iw = ww + kw - 1;
                if (iw < 0 || iw >= W) continue;
                acc += x[static_cast<std::size_t>(((n * Ci + ci) * H + ih) * W + iw)] *
                       w[static_cast<std::size_t>(((co * Ci + ci) * 3 + kh) * 3 + kw)];
              }
            }
          y[static_cast<std::size_t>(((n * Co + co) * H + h) * W + ww)] = acc;
        }
  return y;
}

inline void conv3x3_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dx, Tensor& dw,
                             Tensor& db) {
  const auto N = x.extent(0), Ci = x.extent(1), H = x.extent(2), W = x.extent(3);
  const auto Co = w.extent(0);
  dx = new_tensor(x.shape(), 0.0);
  dw = new_tensor(w.shape(), 0.0);
  db = new_tensor({Co}, 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t co = 0; co < Co; ++co)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t ww = 0; ww < W; ++ww) {
          const double g = dy[static_cast<std::size_t>(((n * Co + co) * H + h) * W + ww)];
          db[static_cast<std::size_t>(co)] += g;
          for (std::int64_t ci = 0; ci < Ci; ++ci)
            for (std::int64_t kh = 0; kh < 3; ++kh) {
              const auto ih = h + kh - 1;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t kw = 0; kw < 3; ++kw) {
                const auto iw = ww + kw - 1;
                if (iw < 0 || iw >= W) continue;
                const auto xi = static_cast<std::size_t>(((n * Ci + ci) * H + ih) * W + iw);
                const auto wi = static_cast<std::size_t>(((co * Ci + ci) * 3 + kh) * 3 + kw);
                dw[wi] += g * x[xi];
                dx[xi] += g * w[wi];
              }
            }
        }
}

inline BNLayerState<double> bn_state_for(const ModelSpec& spec, const Params& params, std::size_t first_param,
                                         const BNRunningStats& rs) {
  BNLayerState<double> s;
  const auto g = params[first_param].value.data();
  const auto b = params[first_param + 1].value.data();
  s.gamma.assign(g.begin(), g.end());
  s.beta.assign(b.begin(), b.end());
  s.eps = spec.bn_eps;
  s.running_momentum = spec.bn_momentum;
  s.running_mean = rs.mean;
  s.running_var = rs.var;
  return s;
}

}  // namespace detail

// Runs the network on a local batch `x` (N, input_shape...) with integer
// labels. In train mode BN running statistics in `state` are updated.
inline ForwardResult forward(const ModelSpec& spec, const Params& params, ModelState& state, const Tensor& x,
                             std::span<const std::int64_t> labels, const ForwardContext& ctx = {}) {
  spec.validate();
  if (x.rank() != spec.input_shape.size() + 1 ||
      !std::equal(spec.input_shape.begin(), spec.input_shape.end(), x.shape().begin() + 1)) {
    throw InvalidArgument("forward: batch shape " + shape_str(x.shape()) + " does not match model input " +
                          shape_str(spec.input_shape));
  }
  const auto N = x.extent(0);
  if (static_cast<std::int64_t>(labels.size()) != N) throw InvalidArgument("forward: label count != batch size");
  require_finite<double>(x.data(), "forward input");
  const auto off = detail::param_offsets(spec);
  if (params.size() != off.back()) throw InvalidArgument("forward: parameter count does not match model");

  ForwardResult res;
  auto& cache = res.cache;
  cache.mode = ctx.mode;
  cache.batch = N;
  cache.labels.assign(labels.begin(), labels.end());
  cache.params_hash = params_fingerprint(params);
  cache.bn.resize(spec.layers.size());

  Tensor cur = x;
  std::size_t bn_index = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& L = spec.layers[i];
    cache.inputs.push_back(cur);
    switch (L.kind) {
      case LayerKind::dense: {
        Tensor flat(Shape{N, L.in}, std::vector<double>(cur.data().begin(), cur.data().end()));
        cur = detail::dense_forward(flat, params[off[i]].value, params[off[i] + 1].value);
        break;
      }
      case LayerKind::conv3x3:
        cur = detail::conv3x3_forward(cur, params[off[i]].value, params[off[i] + 1].value);
        break;
      case LayerKind::relu:
        for (auto& v : cur.data()) v = v > 0 ? v : 0.0;
        break;
      case LayerKind::bn: {
        if (bn_index >= state.bn.size()) throw InvalidArgument("forward: model state has too few BN entries");
        auto bs = detail::bn_state_for(spec, params, off[i], state.bn[bn_index]);
        const BNOptions opt{spec.bn_variance, true};
        BNForwardResult<double> r;
        if (ctx.mode == BNMode::train && L.sync == BNSync::cross && ctx.device) {
          r = cgbn_forward(*ctx.device, cur, bs, opt);
        } else {
          r = bn_forward_local(cur, bs, ctx.mode, opt);
        }
        state.bn[bn_index] = {bs.running_mean, bs.running_var};
        cur = std::move(r.y);
        cache.bn[i] = std::move(r.cache);
        ++bn_index;
        break;
      }
      case LayerKind::global_mean_pool: {
        const auto C = cur.extent(1);
        const auto S = static_cast<std::size_t>(cur.extent(2) * cur.extent(3));
        Tensor pooled = new_tensor({N, C}, 0.0);
        for (std::size_t j = 0; j < pooled.size(); ++j) {
          double acc = 0;
          for (std::size_t s = 0; s < S; ++s) acc += cur[j * S + s];
          pooled[j] = acc / static_cast<double>(S);
        }
        cur = std::move(pooled);
        break;
      }
      case LayerKind::softmax_xent: {
        const auto K = static_cast<std::size_t>(cur.extent(1));
        res.logits = cur;
        cache.probs = cur;
        double task = 0;
        for (std::int64_t n = 0; n < N; ++n) {
          const auto label = labels[static_cast<std::size_t>(n)];
          if (label < 0 || static_cast<std::size_t>(label) >= K) throw InvalidArgument("forward: label out of range");
          auto row = cache.probs.data().subspan(static_cast<std::size_t>(n) * K, K);
          const double mx = *std::max_element(row.begin(), row.end());
          double z = 0;
          for (auto& v : row) {
            v = std::exp(v - mx);
            z += v;
          }
          for (auto& v : row) v /= z;
          const double logit = res.logits[static_cast<std::size_t>(n) * K + static_cast<std::size_t>(label)];
          task += (std::log(z) + mx) - logit;
        }
        res.loss.task_loss = task / static_cast<double>(N);
        break;
      }
    }
    require_finite<double>(cur.data(), "forward activations");
  }
  res.loss.reg_loss = 0.5 * spec.weight_decay * l2_norm_sq(params);
  res.loss.total = res.loss.task_loss + res.loss.reg_loss;
  if (!std::isfinite(res.loss.total)) throw NonFiniteError("forward: non-finite loss");
  return res;
}

// Gradient of LossValue::total with respect to every parameter. With bn(cross)
// layers on a device group this must be called by every member; the returned
// gradients are this device's share, so that their mean over the world equals
// the gradient of the world-mean loss.
inline Grads backward(const ModelSpec& spec, const Params& params, const ForwardCache& cache,
                      const ForwardContext& ctx = {}) {
  if (cache.inputs.size() != spec.layers.size()) throw InvalidArgument("backward: cache does not match model");
  if (params_fingerprint(params) != cache.params_hash) {
    throw InvalidArgument("backward: stale cache (parameters changed since forward)");
  }
  const auto off = detail::param_offsets(spec);
  Grads grads(params.size());
  const auto N = cache.batch;

  Tensor g;
  for (std::size_t ii = spec.layers.size(); ii-- > 0;) {
    const auto& L = spec.layers[ii];
    const Tensor& in = cache.inputs[ii];
    switch (L.kind) {
      case LayerKind::softmax_xent: {
        g = cache.probs;
        const auto K = static_cast<std::size_t>(g.extent(1));
        for (std::int64_t n = 0; n < N; ++n) {
          g[static_cast<std::size_t>(n) * K + static_cast<std::size_t>(cache.labels[static_cast<std::size_t>(n)])] -= 1.0;
        }
        for (auto& v : g.data()) v /= static_cast<double>(N);
        break;
      }
      case LayerKind::dense: {
        const auto& w = params[off[ii]].value;
        const auto fin = static_cast<std::size_t>(w.extent(0));
        const auto fout = static_cast<std::size_t>(w.extent(1));
        Tensor dw = new_tensor(w.shape(), 0.0);
        Tensor db = new_tensor({w.extent(1)}, 0.0);
        Tensor dx = new_tensor(in.shape(), 0.0);
        for (std::size_t n = 0; n < static_cast<std::size_t>(N); ++n) {
          for (std::size_t o = 0; o < fout; ++o) {
            const double go = g[n * fout + o];
            db[o] += go;
            for (std::size_t k = 0; k < fin; ++k) {
              dw[k * fout + o] += in[n * fin + k] * go;
              dx[n * fin + k] += w[k * fout + o] * go;
            }
          }
        }
        grads[off[ii]] = std::move(dw);
        grads[off[ii] + 1] = std::move(db);
        g = std::move(dx);
        break;
      }
      case LayerKind::conv3x3: {
        Tensor dx, dw, db;
        detail::conv3x3_backward(in, params[off[ii]].value, g, dx, dw, db);
        grads[off[ii]] = std::move(dw);
        grads[off[ii] + 1] = std::move(db);
        g = std::move(dx);
        break;
      }
      case LayerKind::relu:
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (!(in[j] > 0)) g[j] = 0.0;
        }
        break;
      case LayerKind::bn: {
        const auto& bc = *cache.bn[ii];
        BNLayerState<double> bs;
        bs.gamma.assign(params[off[ii]].value.data().begin(), params[off[ii]].value.data().end());
        bs.beta.assign(params[off[ii] + 1].value.data().begin(), params[off[ii] + 1].value.data().end());
        bs.eps = ctx.backward_eps_override.value_or(spec.bn_eps);
        bs.running_momentum = spec.bn_momentum;
        bs.running_mean = bc.mu;
        bs.running_var.assign(bc.var.size(), 1.0);
        BNBackwardResult<double> r;
        if (cache.mode == BNMode::train && L.sync == BNSync::cross && ctx.device) {
          r = cgbn_backward(*ctx.device, g, bc, bs);
        } else {
          r = bn_backward_local(g, bc, bs);
        }
        const auto C = static_cast<std::int64_t>(bs.gamma.size());
        grads[off[ii]] = Tensor({C}, r.dgamma_local);
        grads[off[ii] + 1] = Tensor({C}, r.dbeta_local);
        g = std::move(r.dx);
        break;
      }
      case LayerKind::global_mean_pool: {
        const auto& s = in.shape();
        const auto S = static_cast<std::size_t>(s[2] * s[3]);
        Tensor dx = new_tensor(s, 0.0);
        for (std::size_t j = 0; j < g.size(); ++j) {
          const double v = g[j] / static_cast<double>(S);
          for (std::size_t k = 0; k < S; ++k) dx[j * S + k] = v;
        }
        g = std::move(dx);
        break;
      }
    }
  }

  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].decay || spec.weight_decay == 0.0) continue;
    auto gd = grads[k].data();
    const auto w = params[k].value.data();
    for (std::size_t j = 0; j < gd.size(); ++j) gd[j] += spec.weight_decay * w[j];
  }
  for (const auto& t : grads) require_finite<double>(t.data(), "backward gradient");
  return grads;
}

// Argmax of each logits row.
inline std::vector<std::int64_t> predict(const Tensor& logits) {
  const auto N = static_cast<std::size_t>(logits.extent(0));
  const auto K = static_cast<std::size_t>(logits.extent(1));
  std::vector<std::int64_t> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    auto row = logits.data().subspan(n * K, K);
    out[n] = std::max_element(row.begin(), row.end()) - row.begin();
  }
  return out;
}

}  // namespace syncbn
