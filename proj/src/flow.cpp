#include "mflow/flow.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>
#include <thread>

namespace mflow {

namespace {

Vec rk4_step(const OdeRhs& f, const Vec& y, double t, double h, int step) {
  auto stage = [&](double ts, const Vec& ys) {
    Vec k = f(ts, ys);
    if (!k.allFinite()) throw NumericError("non-finite dynamics output", step);
    return k;
  };
  Vec k1 = stage(t, y);
  Vec k2 = stage(t + 0.5 * h, Vec(y + (0.5 * h) * k1));
  Vec k3 = stage(t + 0.5 * h, Vec(y + (0.5 * h) * k2));
  Vec k4 = stage(t + h, Vec(y + h * k3));
  Vec out = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  if (!out.allFinite()) throw NumericError("non-finite integration state", step);
  return out;
}

Mat lowered_frame(const Manifold& m, const Mat& frame) {
  Mat low(frame.rows(), frame.cols());
  for (int j = 0; j < frame.cols(); ++j) low.col(j) = metric_lower(m, Vec(frame.col(j)));
  return low;
}

struct WalkResult {
  double delta = 0.0;  // accumulated change of log-density along the walk
  ManifoldPoint end;
  std::vector<ChartSegment> segments;  // in time order
};

// Chart walk shared by density evaluation (reverse) and sampling (forward).
// Each leg integrates [y; ell] with d ell/dt = -trace and contributes
//   lambda(y at t_lo) - lambda(y at t_hi) - integral of the trace
// to the log-density change, lambda being the chart's volume distortion.
// Legs anchored at the current point have y = 0 at the anchored end, which
// reduces the lambda pair to the usual chart entry/exit log-det.
WalkResult density_walk(const FlowModel& model, const ManifoldPoint& z0, bool reverse) {
  model.validate();
  if (z0.manifold != model.manifold) throw ArgumentError("flow: point manifold mismatch");
  require_on_manifold(z0);
  const ChartPolicy& policy = model.policy;
  if (policy.eps_chart <= 0.0 || policy.eps_chart >= 1.0)
    throw ArgumentError("flow: eps_chart must lie in (0,1)");

  const FieldParams& theta = model.theta;
  const TimeGrid& grid = model.grid;
  const Manifold& m = model.manifold;
  const int n = m.dim;
  const bool origin_chart = theta.mode == FieldMode::TangentDirect;
  const ManifoldPoint origin = manifold_origin(m);
  const double usable_radius = m.injectivity_radius() * (1.0 - policy.eps_chart);
  const double h = (grid.t_end - grid.t_start) / grid.total_steps();
  const int dir = reverse ? -1 : +1;

  WalkResult out;
  out.end = z0;
  ManifoldPoint z = z0;

  for (int s = 0; s < grid.num_charts; ++s) {
    int seg = reverse ? grid.num_charts - 1 - s : s;
    double t = grid.boundary(reverse ? seg + 1 : seg);
    int steps_left = grid.steps_per_segment;
    try {
      while (steps_left > 0) {
        ManifoldPoint anchor = origin_chart ? origin : z;
        ChartContext ctx(theta, anchor);
        Vec y_init = origin_chart ? ctx.pull(z) : Vec(Vec::Zero(n));
        double leg_t0 = t;

        if (policy.velocity_cap && std::isfinite(usable_radius)) {
          double span = double(steps_left) * h;
          double speed = ctx.velocity(y_init, t).norm();
          if (speed * span > usable_radius) ctx.scale = usable_radius / (speed * span);
        }

        OdeRhs rhs = [&ctx, n](double tt, const Vec& st) {
          Vec g;
          double trace;
          ctx.velocity_and_trace(st.head(n), tt, g, trace);
          Vec d(n + 1);
          d.head(n) = g;
          d[n] = -trace;
          return d;
        };
        Vec st(n + 1);
        st.head(n) = y_init;
        st[n] = 0.0;
        int leg_steps = 0;
        while (steps_left > 0) {
          if (!origin_chart && policy.kind == ChartPolicyKind::AdaptiveRadius && leg_steps > 0 &&
              st.head(n).norm() > usable_radius)
            break;  // re-anchor before the coordinates leave the chart
          st = rk4_step(rhs, st, t, dir * h, leg_steps);
          t += dir * h;
          ++leg_steps;
          --steps_left;
        }

        Vec y = st.head(n);
        double lam_init = ctx.boundary_logdet(y_init);
        double lam_fin = ctx.boundary_logdet(y);
        out.delta += reverse ? lam_fin - lam_init - st[n] : lam_init - lam_fin + st[n];

        ChartSegment rec;
        rec.anchor = anchor;
        rec.frame = ctx.frame();
        rec.t_lo = reverse ? t : leg_t0;
        rec.t_hi = reverse ? leg_t0 : t;
        rec.y_start = reverse ? y : y_init;
        rec.y_end = reverse ? y_init : y;
        rec.steps = leg_steps;
        rec.scale = ctx.scale;
        out.segments.push_back(rec);
        z = ctx.push(y);
      }
    } catch (ChartOverflow& e) {
      e.segment = seg;
      throw;
    } catch (const NumericError& e) {
      throw NumericError("chart segment " + std::to_string(seg) + ": " + e.what(), e.step);
    }
  }

  if (reverse) std::reverse(out.segments.begin(), out.segments.end());
  out.end = z;
  return out;
}

// d log p(x) / d theta for one evaluated point, by walking the recorded legs
// in time order with the adjoint state [y; abar; grad] alongside.  Anchors
// are held fixed: the continuum density does not depend on them, so their
// motion only carries discretization-level sensitivity.
Vec logprob_gradient(const FlowModel& model, const std::vector<ChartSegment>& segments,
                     const ManifoldPoint& z_base) {
  const FieldParams& theta = model.theta;
  const Manifold& m = model.manifold;
  const int n = m.dim;
  const int params = theta.param_count();
  const bool shared_chart = theta.mode == FieldMode::TangentDirect;

  Vec grad = Vec::Zero(params);
  Vec alpha = target_logpdf_gradient(model.base, z_base);
  Vec abar;
  for (size_t i = 0; i < segments.size(); ++i) {
    const ChartSegment& s = segments[i];
    ChartContext ctx(theta, s.anchor);
    ctx.scale = s.scale;

    // covector entering the leg from below: the chart's volume-distortion
    // gradient plus the pullback of the ambient covector through the chart
    // map.  Interior boundaries of the shared chart cancel in pairs, so the
    // chart covector passes through unconverted there.
    if (!shared_chart || i == 0) {
      Mat E = exp_map_differential(TangentVector{s.anchor, Vec(s.frame * s.y_start)});
      abar = ctx.boundary_w(s.y_start) + s.frame.transpose() * (E.transpose() * alpha);
    }

    Vec state(2 * n + params);
    state.head(n) = s.y_start;
    state.segment(n, n) = abar;
    state.tail(params).setZero();
    OdeRhs rhs = [&](double t, const Vec& st) {
      Vec dtheta = Vec::Zero(params);
      Vec a = st.segment(n, n);
      ChartContext::GradBundle b = ctx.adjoint_eval(st.head(n), t, a, 1.0, -1.0, dtheta);
      Vec d(2 * n + params);
      d.head(n) = b.g;
      d.segment(n, n) = -b.dg_dy.transpose() * a - b.dtrace_dy;
      d.tail(params) = dtheta;
      return d;
    };
    Vec done = rk4_integrate(rhs, state, s.t_lo, s.t_hi, s.steps);
    grad += done.tail(params);
    abar = done.segment(n, n);
    if (!shared_chart) alpha = lowered_frame(m, s.frame) * abar;  // exact: y = 0 at t_hi
  }
  return grad;
}

// Validation gradient: differentiate the ambient objective
//   G = log pi(z(t_s)) - ell(t_s),  d[z; ell]/dt = [f; -div f]
// integrated backward from x.  The adjoint pass retraces the trajectory
// forward from the base endpoint with the covector [a; -1] alongside:
//   da/dt = -J_f^T a - d(div f)/dz,   dG/dtheta' = -(a^T df/dtheta + d(div f)/dtheta)
// (the sign comes from the state having been integrated against time).  The
// point is reprojected each step like the backward pass; the covector rides
// along unconverted.
struct AmbientGrad {
  double logprob = 0.0;
  Vec grad;
};
AmbientGrad ambient_logprob_gradient(const FlowModel& model, const ManifoldPoint& x) {
  const Manifold& m = model.manifold;
  const FieldParams& theta = model.theta;
  const int amb = m.ambient_dim();
  const int params = theta.param_count();
  const int total = model.grid.total_steps();
  const double h = (model.grid.t_end - model.grid.t_start) / total;

  AmbientGrad out;
  out.logprob = mcnf_logprob_ambient(model, x);

  // recover the base endpoint of the backward pass
  Vec st(amb + 1);
  st.head(amb) = x.x;
  st[amb] = 0.0;
  OdeRhs back = [&](double t, const Vec& s) {
    Vec d(amb + 1);
    d.head(amb) = field_eval_ambient(theta, m, Vec(s.head(amb)), t);
    d[amb] = -ambient_divergence(theta, Vec(s.head(amb)), t);
    return d;
  };
  for (int k = 0; k < total; ++k) {
    st = rk4_step(back, st, model.grid.t_end - k * h, -h, k);
    st.head(amb) = project_to_manifold(m, Vec(st.head(amb))).x;
  }
  ManifoldPoint z_base{m, st.head(amb)};

  OdeRhs rhs = [&](double t, const Vec& s) {
    Vec u = s.head(amb);
    Vec a = s.segment(amb, amb);
    DivergenceEval div = ambient_divergence_grad(theta, u, t);
    Vec d(2 * amb + params);
    d.head(amb) = field_eval_ambient(theta, m, u, t);
    d.segment(amb, amb) = -ambient_field_jacobian(theta, u, t).transpose() * a - div.dS_dz;
    Vec dtheta = Vec::Zero(params);
    ambient_field_vjp(theta, u, t, a, -1.0, dtheta);
    ambient_divergence_vjp(theta, u, t, -1.0, dtheta);
    d.tail(params) = dtheta;
    return d;
  };

  Vec state(2 * amb + params);
  state.head(amb) = z_base.x;
  state.segment(amb, amb) = target_logpdf_gradient(model.base, z_base);
  state.tail(params).setZero();
  for (int k = 0; k < total; ++k) {
    state = rk4_step(rhs, state, model.grid.t_start + k * h, h, k);
    state.head(amb) = project_to_manifold(m, Vec(state.head(amb))).x;
  }
  out.grad = state.tail(params);
  return out;
}

}  // namespace

void FlowModel::validate() const {
  grid.validate();
  if (density_manifold(base) != manifold)
    throw ArgumentError("flow model: base density lives on a different manifold");
  if (theta.manifold != manifold)
    throw ArgumentError("flow model: dynamics field lives on a different manifold");
}

FlowModel make_flow(const Manifold& m, FieldMode mode, int hidden, int layers) {
  return FlowModel{m, default_base(m), make_field(m, mode, hidden, layers), TimeGrid{},
                   ChartPolicy{}};
}

LogprobDetail mcnf_logprob_detail(const FlowModel& model, const ManifoldPoint& x) {
  WalkResult run = density_walk(model, x, true);
  LogprobDetail out;
  out.z_base = run.end;
  out.segments = std::move(run.segments);
  out.logprob = target_logpdf(model.base, out.z_base) + run.delta;
  return out;
}

double mcnf_logprob(const FlowModel& model, const ManifoldPoint& x) {
  return mcnf_logprob_detail(model, x).logprob;
}

double mcnf_logprob_ambient(const FlowModel& model, const ManifoldPoint& x) {
  model.validate();
  if (x.manifold != model.manifold) throw ArgumentError("flow: point manifold mismatch");
  require_on_manifold(x);
  if (model.theta.mode != FieldMode::AmbientProjected)
    throw ArgumentError("mcnf_logprob_ambient: needs the projected field");

  const Manifold& m = model.manifold;
  const int amb = m.ambient_dim();
  const FieldParams& theta = model.theta;
  OdeRhs rhs = [&](double t, const Vec& st) {
    Vec u = st.head(amb);
    Vec d(amb + 1);
    d.head(amb) = field_eval_ambient(theta, m, u, t);
    d[amb] = -ambient_divergence(theta, u, t);
    return d;
  };

  Vec st(amb + 1);
  st.head(amb) = x.x;
  st[amb] = 0.0;
  int total = model.grid.total_steps();
  double h = (model.grid.t_end - model.grid.t_start) / total;
  for (int k = 0; k < total; ++k) {
    st = rk4_step(rhs, st, model.grid.t_end - k * h, -h, k);
    try {
      st.head(amb) = project_to_manifold(m, Vec(st.head(amb))).x;
    } catch (const DomainError& e) {
      throw NumericError(std::string("projection failed: ") + e.what(), k);
    }
  }
  return target_logpdf(model.base, ManifoldPoint{m, st.head(amb)}) - st[amb];
}

std::vector<FlowSample> mcnf_sample(const FlowModel& model, int count, Rng& rng) {
  model.validate();
  if (count < 1) throw ArgumentError("mcnf_sample: count must be positive");
  std::vector<FlowSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    ManifoldPoint z0 = target_sample(model.base, rng);
    double base_logprob = target_logpdf(model.base, z0);
    WalkResult run = density_walk(model, z0, false);
    out.push_back({run.end, base_logprob + run.delta});
  }
  return out;
}

NllResult nll_and_grad(const FlowModel& model, const std::vector<ManifoldPoint>& batch,
                       int threads, AdjointBackend backend) {
  model.validate();
  if (batch.empty()) throw ArgumentError("nll_and_grad: empty batch");
  if (backend == AdjointBackend::AmbientProjector &&
      model.theta.mode != FieldMode::AmbientProjected)
    throw ArgumentError("nll_and_grad: ambient backend needs the projected field");
  const int count = static_cast<int>(batch.size());
  const int params = model.theta.param_count();

  std::vector<double> logp(count);
  std::vector<Vec> grads(count);
  auto one = [&](int i) {
    if (backend == AdjointBackend::AmbientProjector) {
      AmbientGrad g = ambient_logprob_gradient(model, batch[i]);
      logp[i] = g.logprob;
      grads[i] = std::move(g.grad);
      return;
    }
    LogprobDetail d = mcnf_logprob_detail(model, batch[i]);
    logp[i] = d.logprob;
    grads[i] = logprob_gradient(model, d.segments, d.z_base);
  };

  int workers = std::max(1, std::min(threads, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) one(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(count);
    auto pump = [&]() {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= count) return;
        try {
          one(i);
        } catch (...) {
          errors[i] = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(pump);
    for (std::thread& th : pool) th.join();
    // indices are dispatched in order, so the lowest recorded error is the
    // same one a serial run would hit first
    for (int i = 0; i < count; ++i)
      if (errors[i]) std::rethrow_exception(errors[i]);
  }

  NllResult res;
  res.grad_theta = Vec::Zero(params);
  double total = 0.0;
  for (int i = 0; i < count; ++i) {
    total -= logp[i];
    res.grad_theta -= grads[i];
  }
  res.nll = total / double(count);
  res.grad_theta /= double(count);
  return res;
}

}  // namespace mflow
