#pragma once

#include <vector>

#include "mflow/distributions.hpp"
#include "mflow/dynamics.hpp"
#include "mflow/solvers.hpp"

namespace mflow {

// A continuous normalizing flow on the manifold: a base density pushed
// through the learned velocity field over [t_start, t_end].  Density
// evaluation integrates the flow backwards from the query point, jointly
// accumulating the exact change of log-volume per chart leg; sampling runs
// the same system forwards from a base draw.
struct FlowModel {
  Manifold manifold;
  DensitySpec base;
  FieldParams theta;
  TimeGrid grid;
  ChartPolicy policy;

  void validate() const;
};

// fresh model on m: zero-initialized dynamics, default base, default grid
FlowModel make_flow(const Manifold& m, FieldMode mode = FieldMode::AmbientProjected,
                    int hidden = 32, int layers = 4);

double mcnf_logprob(const FlowModel& model, const ManifoldPoint& x);

// evaluation byproducts: the point the inverse flow lands on at t_start and
// the chart legs of the run (consumed by the gradient pass and by tests)
struct LogprobDetail {
  double logprob = 0.0;
  ManifoldPoint z_base;
  std::vector<ChartSegment> segments;
};
LogprobDetail mcnf_logprob_detail(const FlowModel& model, const ManifoldPoint& x);

// validation variant: integrates the ambient state and the intrinsic
// divergence directly, with per-step projection (AmbientProjected fields)
double mcnf_logprob_ambient(const FlowModel& model, const ManifoldPoint& x);

struct FlowSample {
  ManifoldPoint point;
  double logprob = 0.0;
};
std::vector<FlowSample> mcnf_sample(const FlowModel& model, int count, Rng& rng);

// mean negative log-likelihood of the batch and its parameter gradient (flat
// layout).  Batch elements are processed independently (optionally on
// `threads` workers) and reduced in index order, so results are bitwise
// reproducible for any thread count.  The default backend walks the recorded
// chart legs; AmbientProjector re-integrates everything in ambient
// coordinates (validation path, AmbientProjected fields only) and reports
// the ambient objective's value and gradient.
struct NllResult {
  double nll = 0.0;
  Vec grad_theta;
};
NllResult nll_and_grad(const FlowModel& model, const std::vector<ManifoldPoint>& batch,
                       int threads = 1,
                       AdjointBackend backend = AdjointBackend::ChartBlockwise);

}  // namespace mflow
