#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace syncbn {

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate
// of `x`; `x` is restored before returning.
template <typename F>
std::vector<double> central_difference(std::span<double> x, F&& f, double h = 1e-5) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

struct GradientComparison {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

// Elementwise |a - n| / max(|a|, |n|, floor). The floor keeps entries that are
// zero up to rounding from dominating; callers pass it relative to the
// gradient's overall magnitude.
inline GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                            double floor) {
  GradientComparison c;
  for (std::size_t i = 0; i < analytic.size() && i < numeric.size(); ++i) {
    const double a = analytic[i];
    const double n = numeric[i];
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
    if (rel > c.max_rel_error) {
      c.max_rel_error = rel;
      c.worst_index = i;
      c.worst_analytic = a;
      c.worst_numeric = n;
    }
  }
  if (analytic.size() != numeric.size()) c.max_rel_error = INFINITY;
  return c;
}

inline double max_abs(std::span<const double> v) {
  double m = 0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace syncbn
