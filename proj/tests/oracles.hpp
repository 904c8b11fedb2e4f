#pragma once

// Scalar reference implementations used only by the tests. They are written
// with plain index loops and share no code with the library paths they check.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// x laid out (N, C, S); returns per-channel sums.
inline std::vector<double> channel_sum(const std::vector<double>& x, int N, int C, int S) {
  std::vector<double> out(C, 0.0);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < S; ++s) out[c] += x[(n * C + c) * S + s];
  return out;
}

inline std::vector<double> channel_affine(const std::vector<double>& x, int N, int C, int S,
                                          const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(x.size());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int s = 0; s < S; ++s) out[(n * C + c) * S + s] = a[c] * x[(n * C + c) * S + s] + b[c];
  return out;
}

struct BNOut {
  std::vector<double> y, mean, var;
};

// Explicit mean loop, then variance loop, then normalization.
inline BNOut batch_norm(const std::vector<double>& x, int N, int C, int S, const std::vector<double>& gamma,
                        const std::vector<double>& beta, double eps) {
  BNOut o;
  o.y.resize(x.size());
  o.mean.assign(C, 0.0);
  o.var.assign(C, 0.0);
  const double m = static_cast<double>(N) * S;
  for (int c = 0; c < C; ++c) {
    double sum = 0;
    for (int n = 0; n < N; ++n)
      for (int s = 0; s < S; ++s) sum += x[(n * C + c) * S + s];
    const double mean = sum / m;
    double sq = 0;
    for (int n = 0; n < N; ++n)
      for (int s = 0; s < S; ++s) {
        const double d = x[(n * C + c) * S + s] - mean;
        sq += d * d;
      }
    const double var = sq / m;
    for (int n = 0; n < N; ++n)
      for (int s = 0; s < S; ++s) {
        const int i = (n * C + c) * S + s;
        o.y[i] = gamma[c] * (x[i] - mean) / std::sqrt(var + eps) + beta[c];
      }
    o.mean[c] = mean;
    o.var[c] = var;
  }
  return o;
}

// Tiny MLP: dense(in->hid, W1 (in,hid), b1) -> relu -> dense(hid->K) -> softmax xent,
// plus lambda/2 (|W1|^2 + |W2|^2).
inline double mlp_loss(const std::vector<double>& x, const std::vector<std::int64_t>& labels, int N, int in, int hid,
                       int K, const std::vector<double>& W1, const std::vector<double>& b1,
                       const std::vector<double>& W2, const std::vector<double>& b2, double lambda) {
  double task = 0;
  for (int n = 0; n < N; ++n) {
    std::vector<double> h(hid);
    for (int j = 0; j < hid; ++j) {
      double a = b1[j];
      for (int i = 0; i < in; ++i) a += x[n * in + i] * W1[i * hid + j];
      h[j] = a > 0 ? a : 0;
    }
    std::vector<double> z(K);
    double mx = -1e300;
    for (int k = 0; k < K; ++k) {
      double a = b2[k];
      for (int j = 0; j < hid; ++j) a += h[j] * W2[j * K + k];
      z[k] = a;
      if (a > mx) mx = a;
    }
    double se = 0;
    for (int k = 0; k < K; ++k) se += std::exp(z[k] - mx);
    task += std::log(se) + mx - z[labels[n]];
  }
  double reg = 0;
  for (double w : W1) reg += w * w;
  for (double w : W2) reg += w * w;
  return task / N + 0.5 * lambda * reg;
}

// Left-to-right sum of rank vectors.
inline std::vector<double> sequential_sum(const std::vector<std::vector<double>>& per_rank) {
  std::vector<double> acc = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += per_rank[r][i];
  return acc;
}

}  // namespace oracle
