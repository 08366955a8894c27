#pragma once

#include <functional>
#include <vector>

#include "mflow/dynamics.hpp"
#include "mflow/geometry.hpp"

namespace mflow {

// Uniform time grid split into chart segments.  Euler and projection solvers
// ignore the chart structure and use num_charts * steps_per_segment steps in
// total so cross-solver comparisons run on matched budgets.
struct TimeGrid {
  double t_start = 0.0;
  double t_end = 1.0;
  int steps_per_segment = 20;
  int num_charts = 1;

  void validate() const;
  double boundary(int i) const;  // i in [0, num_charts]
  int total_steps() const { return steps_per_segment * num_charts; }
};

enum class ChartPolicyKind { FixedK, AdaptiveRadius };

struct ChartPolicy {
  ChartPolicyKind kind = ChartPolicyKind::FixedK;
  // Adaptive re-anchor margin: switch charts once ||y|| exceeds
  // (1 - eps_chart) * injectivity radius.  Also sets the usable radius for
  // the velocity safeguard.
  double eps_chart = 0.1;
  // Optional per-leg speed limiter: scale the field by min(1, r/(eps*|g|))
  // with r the usable chart radius and eps the leg duration.  The factor is
  // constant over a leg and held fixed by the adjoint.
  bool velocity_cap = false;

  static ChartPolicy fixed_k() { return ChartPolicy{}; }
  static ChartPolicy adaptive(double eps = 0.1) {
    return ChartPolicy{ChartPolicyKind::AdaptiveRadius, eps, false};
  }
};

// One chart leg of an integration run.  y_start / y_end are the chart
// coordinates at t_lo / t_hi regardless of traversal direction.
struct ChartSegment {
  ManifoldPoint anchor;
  Mat frame;
  double t_lo = 0.0;
  double t_hi = 0.0;
  Vec y_start;
  Vec y_end;
  int steps = 0;
  double scale = 1.0;  // velocity safeguard factor used on this leg
};

// ---------------------------------------------------------------------------
// generic fixed-step RK4 on flat vectors

using OdeRhs = std::function<Vec(double t, const Vec& y)>;

// Integrates y' = f(t, y) from t0 to t1 (either direction) in `steps` equal
// steps.  Throws NumericError with the step index if any stage or state goes
// non-finite.  When `trajectory` is non-null it receives y at every grid
// time, y0 first.
Vec rk4_integrate(const OdeRhs& f, const Vec& y0, double t0, double t1, int steps,
                  std::vector<Vec>* trajectory = nullptr);

// ---------------------------------------------------------------------------
// manifold solvers

// Geodesic-step Euler: z <- exp_z(h f(z, t)).  First-order accurate; the
// baseline the chart solver is measured against.
ManifoldPoint manifold_euler_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                       const TimeGrid& grid);

// Ambient RK4 on the smooth extension of f with a projection back to the
// manifold after every step.
ManifoldPoint projection_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                   const TimeGrid& grid);

struct ChartRunResult {
  ManifoldPoint end;
  std::vector<ChartSegment> segments;  // in time order
};

// Dynamic chart integration: per segment, anchor a chart at the current
// point, pull the field back, run RK4 in coordinates, push out through the
// exp map.  AdaptiveRadius re-anchors mid-segment when the coordinates leave
// the policy radius; FixedK lets ChartOverflow propagate.  `reverse` runs
// the same field from t_end back to t_start (the inverse flow).
ChartRunResult dynamic_chart_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                       const TimeGrid& grid,
                                       const ChartPolicy& policy = ChartPolicy{},
                                       bool reverse = false);

// optional trajectory dump: ambient coordinates + chart index at every step
struct TrajectoryPoint {
  double t = 0.0;
  Vec z;
  int segment = 0;
};
ChartRunResult dynamic_chart_integrate_traced(const FieldParams& theta, const ManifoldPoint& z0,
                                              const TimeGrid& grid, const ChartPolicy& policy,
                                              bool reverse,
                                              std::vector<TrajectoryPoint>* trajectory);

// ---------------------------------------------------------------------------
// adjoint

enum class AdjointBackend { ChartBlockwise, AmbientProjector };

struct AdjointResult {
  // ambient covector at z0; pair it with tangent perturbations (the normal
  // component is representation-dependent)
  Vec grad_z0;
  Vec grad_theta;
};

// Given a forward chart run of `theta` and the loss gradient (ambient
// covector) at the run's endpoint, integrates the adjoint system backward
// and returns gradients with respect to the start point and parameters.
// ChartBlockwise walks the stored segments in reverse, re-integrating the
// state inside each chart; AmbientProjector integrates the covector ODE of
// the projected field in ambient coordinates (validation backend,
// AmbientProjected fields only).
AdjointResult adjoint_integrate(const FieldParams& theta, const ChartRunResult& run,
                                const TimeGrid& grid, const Vec& loss_grad_end,
                                AdjointBackend backend = AdjointBackend::ChartBlockwise);

}  // namespace mflow
