#include "mflow/solvers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

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

}  // namespace

void TimeGrid::validate() const {
  if (!(t_end > t_start)) throw ArgumentError("time grid: t_end must exceed t_start");
  if (steps_per_segment < 1) throw ArgumentError("time grid: steps_per_segment must be positive");
  if (num_charts < 1) throw ArgumentError("time grid: num_charts must be positive");
}

double TimeGrid::boundary(int i) const {
  return t_start + (t_end - t_start) * (double(i) / double(num_charts));
}

Vec rk4_integrate(const OdeRhs& f, const Vec& y0, double t0, double t1, int steps,
                  std::vector<Vec>* trajectory) {
  if (steps < 1) throw ArgumentError("rk4_integrate: steps must be positive");
  double h = (t1 - t0) / steps;
  Vec y = y0;
  if (trajectory) {
    trajectory->clear();
    trajectory->push_back(y);
  }
  for (int k = 0; k < steps; ++k) {
    y = rk4_step(f, y, t0 + k * h, h, k);
    if (trajectory) trajectory->push_back(y);
  }
  return y;
}

ManifoldPoint manifold_euler_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                       const TimeGrid& grid) {
  grid.validate();
  if (z0.manifold != theta.manifold)
    throw ArgumentError("manifold_euler_integrate: manifold mismatch");
  require_on_manifold(z0);

  int total = grid.total_steps();
  double h = (grid.t_end - grid.t_start) / total;
  double limit = z0.manifold.injectivity_radius();
  ManifoldPoint z = z0;
  for (int k = 0; k < total; ++k) {
    TangentVector f = field_eval(theta, z, grid.t_start + k * h);
    TangentVector step{z, Vec(h * f.v)};
    if (!step.v.allFinite()) throw NumericError("non-finite dynamics output", k);
    if (tangent_norm(step) >= limit)
      throw NumericError("euler step reaches the cut locus; use more steps", k);
    z = exp_map(step);
  }
  return z;
}

ManifoldPoint projection_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                   const TimeGrid& grid) {
  grid.validate();
  if (z0.manifold != theta.manifold) throw ArgumentError("projection_integrate: manifold mismatch");
  require_on_manifold(z0);

  const Manifold& m = z0.manifold;
  int total = grid.total_steps();
  double h = (grid.t_end - grid.t_start) / total;
  OdeRhs rhs = [&](double t, const Vec& u) { return field_eval_ambient(theta, m, u, t); };
  Vec u = z0.x;
  for (int k = 0; k < total; ++k) {
    u = rk4_step(rhs, u, grid.t_start + k * h, h, k);
    try {
      u = project_to_manifold(m, u).x;
    } catch (const DomainError& e) {
      throw NumericError(std::string("projection failed: ") + e.what(), k);
    }
  }
  return ManifoldPoint{m, u};
}

ChartRunResult dynamic_chart_integrate_traced(const FieldParams& theta, const ManifoldPoint& z0,
                                              const TimeGrid& grid, const ChartPolicy& policy,
                                              bool reverse,
                                              std::vector<TrajectoryPoint>* trajectory) {
  grid.validate();
  if (z0.manifold != theta.manifold)
    throw ArgumentError("dynamic_chart_integrate: manifold mismatch");
  require_on_manifold(z0);
  if (policy.eps_chart <= 0.0 || policy.eps_chart >= 1.0)
    throw ArgumentError("dynamic_chart_integrate: eps_chart must lie in (0,1)");

  const Manifold& m = z0.manifold;
  const bool origin_chart = theta.mode == FieldMode::TangentDirect;
  const ManifoldPoint origin = manifold_origin(m);
  const double usable_radius = m.injectivity_radius() * (1.0 - policy.eps_chart);
  const double h = (grid.t_end - grid.t_start) / grid.total_steps();
  const int dir = reverse ? -1 : +1;

  ChartRunResult out;
  ManifoldPoint z = z0;
  if (trajectory) {
    trajectory->clear();
    trajectory->push_back({reverse ? grid.t_end : grid.t_start, z.x, 0});
  }

  for (int s = 0; s < grid.num_charts; ++s) {
    int seg = reverse ? grid.num_charts - 1 - s : s;
    double t = grid.boundary(reverse ? seg + 1 : seg);
    int steps_left = grid.steps_per_segment;
    try {
      while (steps_left > 0) {
        ManifoldPoint anchor = origin_chart ? origin : z;
        ChartContext ctx(theta, anchor);
        Vec y_init = origin_chart ? ctx.pull(z) : Vec(Vec::Zero(m.dim));
        Vec y = y_init;
        double leg_t0 = t;

        if (policy.velocity_cap && std::isfinite(usable_radius)) {
          double span = double(steps_left) * h;
          double speed = ctx.velocity(y, t).norm();
          if (speed * span > usable_radius) ctx.scale = usable_radius / (speed * span);
        }

        OdeRhs rhs = [&ctx](double tt, const Vec& yy) { return ctx.velocity(yy, tt); };
        int leg_steps = 0;
        while (steps_left > 0) {
          if (!origin_chart && policy.kind == ChartPolicyKind::AdaptiveRadius &&
              leg_steps > 0 && y.norm() > usable_radius)
            break;  // re-anchor before the coordinates leave the chart
          y = rk4_step(rhs, y, t, dir * h, leg_steps);
          t += dir * h;
          ++leg_steps;
          --steps_left;
          if (trajectory) trajectory->push_back({t, ctx.push(y).x, int(out.segments.size())});
        }

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

ChartRunResult dynamic_chart_integrate(const FieldParams& theta, const ManifoldPoint& z0,
                                       const TimeGrid& grid, const ChartPolicy& policy,
                                       bool reverse) {
  return dynamic_chart_integrate_traced(theta, z0, grid, policy, reverse, nullptr);
}

namespace {

AdjointResult adjoint_chart_blockwise(const FieldParams& theta, const ChartRunResult& run,
                                      const Vec& loss_grad_end) {
  const Manifold& m = theta.manifold;
  const int n = m.dim;
  const int params = theta.param_count();
  const bool shared_chart = theta.mode == FieldMode::TangentDirect;

  AdjointResult res;
  res.grad_theta = Vec::Zero(params);

  Vec alpha = loss_grad_end;  // live ambient covector between charts
  Vec abar;                   // live chart covector inside the shared chart
  for (int i = int(run.segments.size()) - 1; i >= 0; --i) {
    const ChartSegment& s = run.segments[i];
    ChartContext ctx(theta, s.anchor);
    ctx.scale = s.scale;

    if (!shared_chart || i == int(run.segments.size()) - 1) {
      Mat E = exp_map_differential(TangentVector{s.anchor, Vec(s.frame * s.y_end)});
      abar = s.frame.transpose() * (E.transpose() * alpha);
    }

    Vec state(2 * n + params);
    state.head(n) = s.y_end;
    state.segment(n, n) = abar;
    state.tail(params).setZero();
    OdeRhs rhs = [&](double t, const Vec& st) {
      Vec dtheta = Vec::Zero(params);
      Vec a = st.segment(n, n);
      ChartContext::GradBundle b = ctx.adjoint_eval(st.head(n), t, a, 0.0, -1.0, dtheta);
      Vec d(2 * n + params);
      d.head(n) = b.g;
      d.segment(n, n) = -b.dg_dy.transpose() * a;
      d.tail(params) = dtheta;
      return d;
    };
    Vec done = rk4_integrate(rhs, state, s.t_hi, s.t_lo, s.steps);
    res.grad_theta += done.tail(params);
    abar = done.segment(n, n);
    if (!shared_chart)
      alpha = lowered_frame(m, s.frame) * abar;  // exact at the anchor (y = 0)
  }

  if (shared_chart) {
    // covector stayed in the origin chart; pull it back through the chart map
    const ChartSegment& first = run.segments.front();
    ManifoldPoint z0 = exp_map(TangentVector{first.anchor, Vec(first.frame * first.y_start)});
    Mat L = log_map_jacobian(first.anchor, z0);
    res.grad_z0 = L.transpose() * (lowered_frame(m, first.frame) * abar);
  } else {
    res.grad_z0 = alpha;
  }
  return res;
}

AdjointResult adjoint_ambient(const FieldParams& theta, const ChartRunResult& run,
                              const TimeGrid& grid, const Vec& loss_grad_end) {
  if (theta.mode != FieldMode::AmbientProjected)
    throw ArgumentError("adjoint_integrate: ambient backend needs the projected field");
  const Manifold& m = theta.manifold;
  const int amb = m.ambient_dim();
  const int params = theta.param_count();

  OdeRhs rhs = [&](double t, const Vec& st) {
    Vec u = st.head(amb);
    Vec a = st.segment(amb, amb);
    Vec d(2 * amb + params);
    d.head(amb) = field_eval_ambient(theta, m, u, t);
    d.segment(amb, amb) = -ambient_field_jacobian(theta, u, t).transpose() * a;
    Vec dtheta = Vec::Zero(params);
    ambient_field_vjp(theta, u, t, a, -1.0, dtheta);
    d.tail(params) = dtheta;
    return d;
  };

  Vec state(2 * amb + params);
  state.head(amb) = run.end.x;
  state.segment(amb, amb) = loss_grad_end;
  state.tail(params).setZero();

  int total = grid.total_steps();
  double h = (grid.t_end - grid.t_start) / total;
  for (int k = 0; k < total; ++k) {
    state = rk4_step(rhs, state, grid.t_end - k * h, -h, k);
    // keep the retraced state on the manifold; the covector rides along
    state.head(amb) = project_to_manifold(m, Vec(state.head(amb))).x;
  }

  AdjointResult res;
  res.grad_z0 = state.segment(amb, amb);
  res.grad_theta = state.tail(params);
  return res;
}

}  // namespace

AdjointResult adjoint_integrate(const FieldParams& theta, const ChartRunResult& run,
                                const TimeGrid& grid, const Vec& loss_grad_end,
                                AdjointBackend backend) {
  grid.validate();
  if (run.segments.empty()) throw ArgumentError("adjoint_integrate: empty forward run");
  if (loss_grad_end.size() != theta.manifold.ambient_dim())
    throw ArgumentError("adjoint_integrate: loss gradient has the wrong size");
  if (backend == AdjointBackend::AmbientProjector) return adjoint_ambient(theta, run, grid, loss_grad_end);
  return adjoint_chart_blockwise(theta, run, loss_grad_end);
}

}  // namespace mflow
