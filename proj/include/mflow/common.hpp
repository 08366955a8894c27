#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace mflow {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

// ---------------------------------------------------------------------------
// errors

// Argument shape/type misuse (caller bug).
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Input outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Chart coordinate left the valid ball around the anchor.  Solvers with an
// adaptive policy consume this and re-anchor; otherwise it escapes to the
// caller.
struct ChartOverflow : std::runtime_error {
  int segment = -1;
  explicit ChartOverflow(const std::string& msg, int seg = -1)
      : std::runtime_error(msg), segment(seg) {}
};

// Non-finite state during integration; carries the step at which it appeared.
struct NumericError : std::runtime_error {
  int step = -1;
  explicit NumericError(const std::string& msg, int step_index = -1)
      : std::runtime_error(msg), step(step_index) {}
};

// Corrupted or malformed serialized model file.
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Optimization failure (non-finite gradient, diverged loss).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// numeric scalar helpers
//
// The small-argument branches below keep ratios like sinh(x)/x exact to
// double precision where the direct quotient loses digits.  Thresholds are
// fixed; the two-term series has error ~x^4/120 < 1e-20 at the switch point.

constexpr double kTinyArg = 1e-5;      // switch point for sinc-style ratios
constexpr double kArccoshClamp = 1e-7; // lower clamp for acosh arguments
constexpr double kMembershipTol = 1e-9;
constexpr double kAntipodeTol = 1e-9;

inline double sinhc(double x) {
  double ax = std::abs(x);
  if (ax < kTinyArg) return 1.0 + x * x / 6.0;
  return std::sinh(x) / x;
}

inline double sincr(double x) {
  double ax = std::abs(x);
  if (ax < kTinyArg) return 1.0 - x * x / 6.0;
  return std::sin(x) / x;
}

inline double log_sinhc(double x) {
  double ax = std::abs(x);
  if (ax < kTinyArg) return x * x / 6.0;
  // sinh overflows past ~710; log sinh x = x + log((1-e^{-2x})/2) stays finite
  if (ax > 20.0) return ax + std::log1p(-std::exp(-2.0 * ax)) - std::log(2.0) - std::log(ax);
  return std::log(std::sinh(ax) / ax);
}

inline double log_sincr(double x) {
  double ax = std::abs(x);
  if (ax < kTinyArg) return -x * x / 6.0;
  return std::log(std::sin(ax) / ax);
}

// d/dr log(sinh r / r) = coth r - 1/r, stable at 0
inline double dlog_sinhc(double r) {
  if (std::abs(r) < kTinyArg) return r / 3.0;
  return 1.0 / std::tanh(r) - 1.0 / r;
}

// d/dr log(sin r / r) = cot r - 1/r, stable at 0
inline double dlog_sincr(double r) {
  if (std::abs(r) < kTinyArg) return -r / 3.0;
  return std::cos(r) / std::sin(r) - 1.0 / r;
}

// (coth r - 1/r)/r, stable at 0 (limit 1/3)
inline double dlog_sinhc_over_r(double r) {
  if (std::abs(r) < kTinyArg) return 1.0 / 3.0 - r * r / 45.0;
  return dlog_sinhc(r) / r;
}

// (cot r - 1/r)/r, stable at 0 (limit -1/3)
inline double dlog_sincr_over_r(double r) {
  if (std::abs(r) < kTinyArg) return -1.0 / 3.0 - r * r / 45.0;
  return dlog_sincr(r) / r;
}

// acosh with the standard lower clamp; arguments below 1 from rounding are
// pulled up instead of producing NaN
inline double acosh_clamped(double a) {
  return std::acosh(std::max(a, 1.0 + kArccoshClamp));
}

inline double clamp_unit(double c) { return std::min(1.0, std::max(-1.0, c)); }

inline double logsumexp(const Vec& v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// rng

using Rng = std::mt19937_64;

// splitmix64 step; used to derive independent seed streams
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  return Rng(mix_seed(seed, stream));
}

}  // namespace mflow
