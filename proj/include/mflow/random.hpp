#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "mflow/common.hpp"

// Hand-rolled draws on top of the raw 64-bit generator. The standard
// library distributions are implementation-defined sequences, which would
// break the byte-identical reproducibility contract across toolchains.

namespace mflow {

// uniform on [0, 1), 53 mantissa bits
inline double uniform01(Rng& g) { return static_cast<double>(g() >> 11) * 0x1.0p-53; }

// uniform on (0, 1), safe for log()
inline double uniform_open(Rng& g) {
  double u;
  do {
    u = uniform01(g);
  } while (u <= 0.0);
  return u;
}

inline double uniform_range(Rng& g, double a, double b) { return a + (b - a) * uniform01(g); }

// Box-Muller, cosine branch only so a draw always consumes exactly two words
inline double normal01(Rng& g) {
  double u1 = uniform_open(g);
  double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Marsaglia-Tsang, with the power boost for shape < 1
inline double gamma_draw(Rng& g, double alpha) {
  if (alpha <= 0.0) throw ArgumentError("gamma_draw: shape must be positive");
  if (alpha < 1.0) {
    double u = uniform_open(g);
    return gamma_draw(g, alpha + 1.0) * std::pow(u, 1.0 / alpha);
  }
  double d = alpha - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal01(g);
    double t = 1.0 + c * x;
    if (t <= 0.0) continue;
    double v = t * t * t;
    double u = uniform_open(g);
    double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
  }
}

inline double beta_draw(Rng& g, double a, double b) {
  double x = gamma_draw(g, a);
  double y = gamma_draw(g, b);
  return x / (x + y);
}

// index into a cumulative weight scan; weights need not be normalized
inline int categorical_draw(Rng& g, const std::vector<double>& weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  double u = uniform01(g) * total;
  double acc = 0.0;
  for (size_t i = 0; i + 1 < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

}  // namespace mflow
