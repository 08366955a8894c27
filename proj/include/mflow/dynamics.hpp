#pragma once

#include <vector>

#include "mflow/common.hpp"
#include "mflow/geometry.hpp"

namespace mflow {

// How the network output becomes a velocity:
//   AmbientProjected - MLP reads (ambient point, time), output is projected
//                      onto the tangent space; works on both manifolds and
//                      with any number of charts.
//   TangentDirect    - MLP reads (chart coordinates, time) in the single
//                      global chart at the hyperboloid origin and its output
//                      is the chart velocity itself; no pullback cost.
enum class FieldMode { AmbientProjected, TangentDirect };

struct FieldParams {
  Manifold manifold;
  FieldMode mode = FieldMode::AmbientProjected;
  std::vector<Mat> W;
  std::vector<Vec> b;

  int layer_count() const { return static_cast<int>(W.size()); }
  int input_width() const;
  int output_width() const;
  int param_count() const;
  // flat layout: W0 row-major, b0, W1, b1, ...
  Vec flatten() const;
  void unflatten(const Vec& flat);
  void set_zero();
};

// zero-initialized network; hidden tanh layers, linear output
FieldParams make_field(const Manifold& m, FieldMode mode, int hidden = 32, int layers = 4);

// uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases
void glorot_init(FieldParams& p, Rng& rng);

// ---------------------------------------------------------------------------
// raw network passes (all hand-derived, no autodiff)

struct MlpCache {
  std::vector<Vec> h;    // h[0] = input, h[i] = activations, h[L] = output
  std::vector<Vec> pre;  // pre-activations per layer
};

Vec mlp_forward(const FieldParams& p, const Vec& u, MlpCache* cache = nullptr);

// d output / d input, output_width x input_width
Mat mlp_input_jacobian(const FieldParams& p, const MlpCache& cache);

// grad += cotangent^T d output / d params; optionally d(cot.m)/d input
void mlp_vjp_params(const FieldParams& p, const MlpCache& cache, const Vec& cotangent,
                    Vec& grad, Vec* grad_input = nullptr);

// phi = tr(A * d m/d u) for a fixed matrix A (input_width x output_width).
// Returns phi; accumulates d phi/d params into grad_params and writes
// d phi/d u into grad_input when non-null.  This is the second-order
// primitive behind divergence gradients.
double mlp_trace_form(const FieldParams& p, const MlpCache& cache, const Mat& A,
                      Vec* grad_params = nullptr, Vec* grad_input = nullptr);

// ---------------------------------------------------------------------------
// the manifold vector field

// f(z, t) as a tangent vector at z
TangentVector field_eval(const FieldParams& p, const ManifoldPoint& z, double t);

// smooth ambient extension of f used by solvers whose iterates leave the
// manifold between projections; agrees with field_eval on the manifold.
// For AmbientProjected this is the raw projector formula evaluated at u, so
// field_jacobian_z is its exact derivative everywhere.
Vec field_eval_ambient(const FieldParams& p, const Manifold& m, const Vec& u, double t);

// exact Jacobian and parameter contraction of that extension at a raw
// ambient point (AmbientProjected only; no membership requirement)
Mat ambient_field_jacobian(const FieldParams& p, const Vec& u, double t);
void ambient_field_vjp(const FieldParams& p, const Vec& u, double t, const Vec& cotangent,
                       double outer_scale, Vec& grad);

// derivative of field_eval w.r.t. the point, in the active coordinates:
// ambient (n+1)x(n+1) for AmbientProjected, chart n x n for TangentDirect
Mat field_jacobian_z(const FieldParams& p, const ManifoldPoint& z, double t);

// cotangent^T df/dtheta, flat parameter layout
Vec field_vjp_params(const FieldParams& p, const ManifoldPoint& z, double t,
                     const Vec& cotangent);

// intrinsic divergence div_M f at z
double manifold_divergence(const FieldParams& p, const ManifoldPoint& z, double t);

// ---------------------------------------------------------------------------
// chart-pulled dynamics around an anchor

// Everything the solvers and the adjoint need about the dynamics expressed
// in the exp-map chart at one anchor.  `scale` is a segment-constant factor
// (the optional velocity safeguard); it multiplies the field, hence the
// trace and every derivative, uniformly.
class ChartContext {
 public:
  ChartContext(const FieldParams& theta, ManifoldPoint anchor);

  const Manifold& manifold() const { return anchor_.manifold; }
  const ManifoldPoint& anchor() const { return anchor_; }
  const Mat& frame() const { return frame_; }
  int dim() const { return anchor_.manifold.dim; }

  // chart <-> manifold
  ManifoldPoint push(const Vec& y) const;
  Vec pull(const ManifoldPoint& z) const;

  // volume distortion of the chart map and its gradient in chart coords
  double boundary_logdet(const Vec& y) const;
  Vec boundary_w(const Vec& y) const;

  // hard validity limit of the chart (sphere); infinity on the hyperboloid
  double overflow_radius() const;

  // chart velocity; throws ChartOverflow beyond the validity limit
  Vec velocity(const Vec& y, double t) const;
  void velocity_and_trace(const Vec& y, double t, Vec& g, double& trace) const;

  struct GradBundle {
    Vec g;
    double trace = 0.0;
    Mat dg_dy;
    Vec dtrace_dy;
  };
  GradBundle grad_bundle(const Vec& y, double t) const;

  // grad += outer_scale * (a^T dg/dtheta + lam * dtrace/dtheta)
  void vjp_theta(const Vec& y, double t, const Vec& a, double lam, double outer_scale,
                 Vec& grad) const;

  // fused bundle + vjp sharing one field evaluation; used by the adjoint RHS
  GradBundle adjoint_eval(const Vec& y, double t, const Vec& a, double lam, double outer_scale,
                          Vec& grad) const;

  double scale = 1.0;

 private:
  struct Eval;  // shared sub-expressions
  void base_eval(const Vec& y, double t, Eval& e, bool with_derivs) const;
  GradBundle assemble_bundle(const Eval& e, const Vec& y) const;
  void assemble_vjp(const Eval& e, const Vec& a, double lam, double outer_scale, Vec& grad) const;

  const FieldParams& theta_;
  ManifoldPoint anchor_;
  Mat frame_;     // ambient x n, orthonormal
  Mat frame_low_; // metric-lowered frame: coords(u) = frame_low^T u
};

// spec-level convenience: chart velocity at (anchor, y, t)
Vec chart_pullback_dynamics(const FieldParams& theta, const ManifoldPoint& anchor,
                            const Vec& y, double t);

// divergence gradient helpers shared with the ambient adjoint backend
struct DivergenceEval {
  double S = 0.0;
  Vec dS_dz;  // ambient
};
DivergenceEval manifold_divergence_grad(const FieldParams& p, const ManifoldPoint& z, double t);

// grad += outer_scale * d(div_M f)/dtheta at z
void manifold_divergence_vjp(const FieldParams& p, const ManifoldPoint& z, double t,
                             double outer_scale, Vec& grad);

// raw-coordinate variants of the divergence formulas for solver stages that
// sit slightly off the manifold (AmbientProjected only)
double ambient_divergence(const FieldParams& p, const Vec& u, double t);
DivergenceEval ambient_divergence_grad(const FieldParams& p, const Vec& u, double t);
void ambient_divergence_vjp(const FieldParams& p, const Vec& u, double t, double outer_scale,
                            Vec& grad);

}  // namespace mflow
