#pragma once

#include "mflow/common.hpp"

namespace mflow {

// Two constant-curvature model spaces embedded in R^{n+1}:
//   Hyperboloid  H^n = { x : <x,x>_L = -1, x0 > 0 }   (curvature -1)
//   Sphere       S^n = { x : x.x = 1 }                (curvature +1)
// <.,.>_L is the Lorentz form -x0*y0 + sum_{i>=1} xi*yi.  All tangent vectors
// are represented in ambient coordinates.

enum class ManifoldKind { Hyperboloid, Sphere };

struct Manifold {
  ManifoldKind kind = ManifoldKind::Hyperboloid;
  int dim = 2;  // intrinsic dimension n >= 1

  int ambient_dim() const { return dim + 1; }
  double injectivity_radius() const {
    return kind == ManifoldKind::Sphere ? M_PI
                                        : std::numeric_limits<double>::infinity();
  }
  bool operator==(const Manifold& o) const { return kind == o.kind && dim == o.dim; }
  bool operator!=(const Manifold& o) const { return !(*this == o); }

  static Manifold hyperboloid(int n) { return Manifold{ManifoldKind::Hyperboloid, n}; }
  static Manifold sphere(int n) { return Manifold{ManifoldKind::Sphere, n}; }
};

struct ManifoldPoint {
  Manifold manifold;
  Vec x;
};

struct TangentVector {
  ManifoldPoint base;
  Vec v;
};

// canonical base point: (1,0,...,0) on H^n, (-1,0,...,0) on S^n
ManifoldPoint manifold_origin(const Manifold& m);

// ---------------------------------------------------------------------------
// raw ambient helpers

double lorentz_inner(const Vec& a, const Vec& b);

// the embedding metric applied to raw ambient vectors
double ambient_inner(const Manifold& m, const Vec& a, const Vec& b);

// index lowering: J*u on the hyperboloid (negated first component), u itself
// on the sphere.  <u,w>_rho == metric_lower(u).dot(w).
Vec metric_lower(const Manifold& m, const Vec& u);

// |<x,x>_L + 1| resp. | ||x|| - 1 |
double membership_residual(const Manifold& m, const Vec& x);

// ---------------------------------------------------------------------------
// validated constructors

ManifoldPoint checked_point(const Manifold& m, Vec x, double tol = kMembershipTol);
TangentVector checked_tangent(const ManifoldPoint& p, Vec v, double tol = 1e-7);
void require_on_manifold(const ManifoldPoint& p, double tol = kMembershipTol);

// ---------------------------------------------------------------------------
// core operations

double metric_inner(const TangentVector& u, const TangentVector& w);
double tangent_norm(const TangentVector& u);

// orthogonal projection of an ambient vector onto T_x M
TangentVector tangent_project(const ManifoldPoint& x, const Vec& u);

// projector matrix P with P*u = tangent_project(x,u):
//   I - x x^T (sphere),  I + x (Jx)^T (hyperboloid)
Mat tangent_projector(const ManifoldPoint& x);

ManifoldPoint exp_map(const TangentVector& v);
TangentVector log_map(const ManifoldPoint& x, const ManifoldPoint& y);

// transport of v in T_x along the geodesic from x to y
TangentVector parallel_transport(const ManifoldPoint& x, const ManifoldPoint& y,
                                 const TangentVector& v);

double distance(const ManifoldPoint& x, const ManifoldPoint& y);

// log |det D_v exp_x| restricted to tangent frames:
//   (n-1) [log sinh r - log r]  (H^n),  (n-1) [log sin r - log r]  (S^n)
// with r the metric norm of v; sphere requires r < pi.
double logdet_exp(const TangentVector& v);

// log |det D_y log_x| = -logdet_exp at v = log_x(y)
double logdet_log(const ManifoldPoint& x, const ManifoldPoint& y);

// D_v exp_x as an ambient (n+1)x(n+1) matrix (acts on tangent perturbations)
Mat exp_map_differential(const TangentVector& v);

// D_y log_x as an ambient matrix.  The closed form degrades by cancellation
// as y -> x; the NearIdentity branch evaluates the series instead.  Auto
// switches at geodesic distance 1e-3.  Both branches agree in the overlap.
enum class JacobianBranch { Auto, ClosedForm, NearIdentity };
Mat log_map_jacobian(const ManifoldPoint& x, const ManifoldPoint& y,
                     JacobianBranch branch = JacobianBranch::Auto);

// nearest-point retraction: normalize by the metric norm.  Hyperboloid
// requires <u,u>_L < 0 and u0 > 0; sphere requires u != 0.
ManifoldPoint project_to_manifold(const Manifold& m, const Vec& u);

// deterministic metric-orthonormal basis of T_x M, columns of an
// (n+1) x n matrix; Gram-Schmidt over the projected standard basis
Mat orthonormal_frame(const ManifoldPoint& x);

// coordinates of a tangent vector in a frame: F^T J u resp. F^T u
Vec frame_coords(const Manifold& m, const Mat& frame, const Vec& tangent);

// ---------------------------------------------------------------------------
// plotting projections

// hyperboloid -> Poincare ball: (x0, xr) -> xr / (1 + x0)
Vec stereographic_project(const ManifoldPoint& x);

// S^2 -> Mollweide plane.  Latitude asin(x3), longitude atan2(x2,x1);
// 2b + sin 2b = pi sin(lat) solved by Newton (<=50 iters, residual < 1e-10,
// poles short-circuited).  Returns ((2 sqrt2/pi) lon cos b, sqrt2 sin b).
Eigen::Vector2d mollweide_project(const ManifoldPoint& x);

}  // namespace mflow
