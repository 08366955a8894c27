#include "mflow/geometry.hpp"

#include <sstream>

namespace mflow {

namespace {

bool is_sphere(const Manifold& m) { return m.kind == ManifoldKind::Sphere; }

void require_same_manifold(const Manifold& a, const Manifold& b, const char* op) {
  if (a != b) throw ArgumentError(std::string(op) + ": manifold mismatch");
}

void require_dim(const Manifold& m, const Vec& u, const char* op) {
  if (u.size() != m.ambient_dim())
    throw ArgumentError(std::string(op) + ": expected ambient dimension " +
                        std::to_string(m.ambient_dim()) + ", got " +
                        std::to_string(u.size()));
}

void require_same_base(const TangentVector& u, const TangentVector& w, const char* op) {
  require_same_manifold(u.base.manifold, w.base.manifold, op);
  if ((u.base.x - w.base.x).lpNorm<Eigen::Infinity>() > 1e-9)
    throw ArgumentError(std::string(op) + ": tangent vectors have different base points");
}

void require_membership(const ManifoldPoint& p, const char* op) {
  require_dim(p.manifold, p.x, op);
  // the Lorentz form cancels to ~eps * |x|^2 far from the origin, so the
  // acceptance band has to scale with the squared coordinate size
  double scale = std::max(1.0, p.x.squaredNorm());
  if (membership_residual(p.manifold, p.x) > kMembershipTol * scale)
    throw DomainError(std::string(op) + ": point is off the manifold");
  if (p.manifold.kind == ManifoldKind::Hyperboloid && p.x[0] <= 0.0)
    throw DomainError(std::string(op) + ": hyperboloid point in the lower sheet");
}

void require_tangency(const TangentVector& t, const char* op) {
  require_membership(t.base, op);
  require_dim(t.base.manifold, t.v, op);
  double ip = ambient_inner(t.base.manifold, t.base.x, t.v);
  // same conditioning argument as membership: the pairing cancels to
  // ~eps * |x|^2 * |v| far from the origin
  double scale = std::max(1.0, t.base.x.squaredNorm()) * std::max(1.0, t.v.norm());
  if (std::abs(ip) > kMembershipTol * scale)
    throw DomainError(std::string(op) + ": vector is not tangent at the base point");
}

}  // namespace

ManifoldPoint manifold_origin(const Manifold& m) {
  Vec x = Vec::Zero(m.ambient_dim());
  x[0] = is_sphere(m) ? -1.0 : 1.0;
  return ManifoldPoint{m, std::move(x)};
}

double lorentz_inner(const Vec& a, const Vec& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw ArgumentError("lorentz_inner: size mismatch");
  return -a[0] * b[0] + a.tail(a.size() - 1).dot(b.tail(b.size() - 1));
}

double ambient_inner(const Manifold& m, const Vec& a, const Vec& b) {
  require_dim(m, a, "ambient_inner");
  require_dim(m, b, "ambient_inner");
  return is_sphere(m) ? a.dot(b) : lorentz_inner(a, b);
}

Vec metric_lower(const Manifold& m, const Vec& u) {
  require_dim(m, u, "metric_lower");
  if (is_sphere(m)) return u;
  Vec r = u;
  r[0] = -r[0];
  return r;
}

double membership_residual(const Manifold& m, const Vec& x) {
  require_dim(m, x, "membership_residual");
  if (is_sphere(m)) return std::abs(x.norm() - 1.0);
  return std::abs(lorentz_inner(x, x) + 1.0);
}

ManifoldPoint checked_point(const Manifold& m, Vec x, double tol) {
  require_dim(m, x, "checked_point");
  if (!x.allFinite()) throw DomainError("checked_point: non-finite coordinates");
  if (!is_sphere(m) && x[0] <= 0.0)
    throw DomainError("checked_point: hyperboloid point must have positive first coordinate");
  double res = membership_residual(m, x);
  if (res > tol) {
    std::ostringstream ss;
    ss << "checked_point: membership residual " << res << " exceeds " << tol;
    throw DomainError(ss.str());
  }
  return ManifoldPoint{m, std::move(x)};
}

void require_on_manifold(const ManifoldPoint& p, double tol) {
  require_dim(p.manifold, p.x, "require_on_manifold");
  if (membership_residual(p.manifold, p.x) > tol * std::max(1.0, p.x.squaredNorm()))
    throw DomainError("point is not on the manifold within tolerance");
  if (!is_sphere(p.manifold) && p.x[0] <= 0.0)
    throw DomainError("hyperboloid point has non-positive first coordinate");
}

TangentVector checked_tangent(const ManifoldPoint& p, Vec v, double tol) {
  require_on_manifold(p);
  require_dim(p.manifold, v, "checked_tangent");
  if (!v.allFinite()) throw DomainError("checked_tangent: non-finite coordinates");
  double ip = ambient_inner(p.manifold, p.x, v);
  double scale = std::max(1.0, p.x.squaredNorm()) * std::max(1.0, v.norm());
  if (std::abs(ip) > tol * scale)
    throw DomainError("checked_tangent: vector is not tangent at the base point");
  return TangentVector{p, std::move(v)};
}

double metric_inner(const TangentVector& u, const TangentVector& w) {
  require_same_base(u, w, "metric_inner");
  return ambient_inner(u.base.manifold, u.v, w.v);
}

double tangent_norm(const TangentVector& u) {
  double s = ambient_inner(u.base.manifold, u.v, u.v);
  return std::sqrt(std::max(0.0, s));
}

TangentVector tangent_project(const ManifoldPoint& x, const Vec& u) {
  require_membership(x, "tangent_project");
  require_dim(x.manifold, u, "tangent_project");
  double ip = ambient_inner(x.manifold, x.x, u);
  Vec t = is_sphere(x.manifold) ? Vec(u - ip * x.x) : Vec(u + ip * x.x);
  return TangentVector{x, std::move(t)};
}

Mat tangent_projector(const ManifoldPoint& x) {
  int a = x.manifold.ambient_dim();
  Mat P = Mat::Identity(a, a);
  if (is_sphere(x.manifold))
    P -= x.x * x.x.transpose();
  else
    P += x.x * metric_lower(x.manifold, x.x).transpose();
  return P;
}

ManifoldPoint exp_map(const TangentVector& t) {
  const Manifold& m = t.base.manifold;
  if (!t.v.allFinite()) throw DomainError("exp_map: non-finite tangent vector");
  require_tangency(t, "exp_map");
  double r2 = ambient_inner(m, t.v, t.v);
  double r = std::sqrt(std::max(0.0, r2));
  Vec y;
  if (is_sphere(m))
    y = std::cos(r) * t.base.x + sincr(r) * t.v;
  else
    y = std::cosh(r) * t.base.x + sinhc(r) * t.v;
  return ManifoldPoint{m, std::move(y)};
}

TangentVector log_map(const ManifoldPoint& x, const ManifoldPoint& y) {
  require_same_manifold(x.manifold, y.manifold, "log_map");
  require_membership(x, "log_map");
  require_membership(y, "log_map");
  if (x.x == y.x) return TangentVector{x, Vec::Zero(x.x.size())};
  if (is_sphere(x.manifold)) {
    double c = x.x.dot(y.x);
    if (c <= -1.0 + kAntipodeTol)
      throw DomainError("log_map: points are antipodal on the sphere");
    double cc = clamp_unit(c);
    double d = std::acos(cc);
    double s = std::sin(d);
    // d/sin d with the removable singularity at d=0
    double coef = (d < kTinyArg) ? 1.0 + d * d / 6.0 : d / s;
    Vec v = coef * (y.x - c * x.x);
    return TangentVector{x, std::move(v)};
  }
  double a = -lorentz_inner(x.x, y.x);  // cosh of the distance, >= 1
  double d = acosh_clamped(a);
  double sh = std::sinh(d);
  double coef = (d < kTinyArg) ? 1.0 - d * d / 6.0 : d / sh;
  Vec v = coef * (y.x - a * x.x);
  return TangentVector{x, std::move(v)};
}

TangentVector parallel_transport(const ManifoldPoint& x, const ManifoldPoint& y,
                                 const TangentVector& t) {
  require_same_manifold(x.manifold, y.manifold, "parallel_transport");
  require_same_base(t, TangentVector{x, t.v}, "parallel_transport");
  require_tangency(t, "parallel_transport");
  require_membership(y, "parallel_transport");
  const Manifold& m = x.manifold;
  if (is_sphere(m)) {
    double c = x.x.dot(y.x);
    if (c <= -1.0 + kAntipodeTol)
      throw DomainError("parallel_transport: antipodal points");
    Vec out = t.v - (y.x.dot(t.v) / (1.0 + c)) * (x.x + y.x);
    return TangentVector{ManifoldPoint{m, y.x}, std::move(out)};
  }
  double c = lorentz_inner(x.x, y.x);  // <= -1
  Vec out = t.v + (lorentz_inner(y.x, t.v) / (1.0 - c)) * (x.x + y.x);
  return TangentVector{ManifoldPoint{m, y.x}, std::move(out)};
}

double distance(const ManifoldPoint& x, const ManifoldPoint& y) {
  require_same_manifold(x.manifold, y.manifold, "distance");
  require_membership(x, "distance");
  require_membership(y, "distance");
  if (x.x == y.x) return 0.0;
  if (is_sphere(x.manifold)) return std::acos(clamp_unit(x.x.dot(y.x)));
  return acosh_clamped(-lorentz_inner(x.x, y.x));
}

double logdet_exp(const TangentVector& t) {
  require_tangency(t, "logdet_exp");
  const Manifold& m = t.base.manifold;
  double r = tangent_norm(t);
  int n = m.dim;
  if (is_sphere(m)) {
    if (r >= M_PI) throw DomainError("logdet_exp: tangent norm at or beyond pi");
    return (n - 1) * log_sincr(r);
  }
  return (n - 1) * log_sinhc(r);
}

double logdet_log(const ManifoldPoint& x, const ManifoldPoint& y) {
  return -logdet_exp(log_map(x, y));
}

Mat exp_map_differential(const TangentVector& t) {
  require_tangency(t, "exp_map_differential");
  const Manifold& m = t.base.manifold;
  int a = m.ambient_dim();
  double r2 = ambient_inner(m, t.v, t.v);
  double r = std::sqrt(std::max(0.0, r2));
  Vec vl = metric_lower(m, t.v);
  if (is_sphere(m)) {
    double c2 = (r < 1e-3) ? -1.0 / 3.0 + r * r / 30.0
                           : (std::cos(r) - sincr(r)) / (r * r);
    return sincr(r) * (Mat::Identity(a, a) - t.base.x * vl.transpose()) +
           c2 * t.v * vl.transpose();
  }
  double c2 = (r < 1e-3) ? 1.0 / 3.0 + r * r / 30.0
                         : (std::cosh(r) - sinhc(r)) / (r * r);
  return sinhc(r) * (Mat::Identity(a, a) + t.base.x * vl.transpose()) +
         c2 * t.v * vl.transpose();
}

Mat log_map_jacobian(const ManifoldPoint& x, const ManifoldPoint& y,
                     JacobianBranch branch) {
  require_same_manifold(x.manifold, y.manifold, "log_map_jacobian");
  require_membership(x, "log_map_jacobian");
  require_membership(y, "log_map_jacobian");
  const Manifold& m = x.manifold;
  int a = m.ambient_dim();
  Mat I = Mat::Identity(a, a);
  if (is_sphere(m)) {
    double c = clamp_unit(x.x.dot(y.x));
    if (c <= -1.0 + kAntipodeTol)
      throw DomainError("log_map_jacobian: points are antipodal");
    double d = std::acos(c);
    bool series = branch == JacobianBranch::NearIdentity ||
                  (branch == JacobianBranch::Auto && d < 1e-3);
    double f1, u;
    if (series) {
      double d2 = d * d;
      f1 = -1.0 / 3.0 - 2.0 * d2 / 15.0 - 2.0 * d2 * d2 / 63.0;
      u = 1.0 + d2 / 6.0 + 7.0 * d2 * d2 / 360.0;
    } else {
      double s = std::sin(d);
      f1 = (c * d - s) / (s * s * s);
      u = d / s;
    }
    return f1 * (y.x - c * x.x) * x.x.transpose() + u * (I - x.x * x.x.transpose());
  }
  double al = -lorentz_inner(x.x, y.x);  // >= 1
  double d = acosh_clamped(al);
  bool series = branch == JacobianBranch::NearIdentity ||
                (branch == JacobianBranch::Auto && d < 1e-3);
  double g1, u;
  if (series) {
    // the acosh clamp guards the closed-form 1/sinh^3 blowup; the series
    // has no singularity, so use the unclamped angle here
    double d0 = std::acosh(std::max(al, 1.0));
    double d2 = d0 * d0;
    g1 = -1.0 / 3.0 + 2.0 * d2 / 15.0 - 2.0 * d2 * d2 / 63.0;
    u = 1.0 - d2 / 6.0 + 7.0 * d2 * d2 / 360.0;
  } else {
    double sh = std::sinh(d);
    g1 = (sh - d * al) / (sh * sh * sh);
    u = d / sh;
  }
  Vec xl = metric_lower(m, x.x);
  return -g1 * (y.x - al * x.x) * xl.transpose() + u * (I + x.x * xl.transpose());
}

ManifoldPoint project_to_manifold(const Manifold& m, const Vec& u) {
  require_dim(m, u, "project_to_manifold");
  if (!u.allFinite()) throw DomainError("project_to_manifold: non-finite input");
  if (is_sphere(m)) {
    double n = u.norm();
    if (n < 1e-12) throw DomainError("project_to_manifold: zero vector has no projection");
    return ManifoldPoint{m, u / n};
  }
  double q = lorentz_inner(u, u);
  if (q >= 0.0 || u[0] <= 0.0)
    throw DomainError("project_to_manifold: input is not in the timelike upper cone");
  return ManifoldPoint{m, u / std::sqrt(-q)};
}

Mat orthonormal_frame(const ManifoldPoint& p) {
  require_on_manifold(p);
  const Manifold& m = p.manifold;
  int a = m.ambient_dim(), n = m.dim;
  Mat F(a, n);
  int col = 0;
  for (int k = 0; k < a && col < n; ++k) {
    Vec cand = tangent_project(p, Vec::Unit(a, k)).v;
    for (int j = 0; j < col; ++j)
      cand -= ambient_inner(m, F.col(j), cand) * F.col(j);
    double s = ambient_inner(m, cand, cand);
    if (s > 1e-12) F.col(col++) = cand / std::sqrt(s);
  }
  if (col != n) throw NumericError("orthonormal_frame: basis construction failed");
  return F;
}

Vec frame_coords(const Manifold& m, const Mat& frame, const Vec& tangent) {
  require_dim(m, tangent, "frame_coords");
  if (frame.rows() != m.ambient_dim() || frame.cols() != m.dim)
    throw ArgumentError("frame_coords: frame has wrong shape");
  return frame.transpose() * metric_lower(m, tangent);
}

Vec stereographic_project(const ManifoldPoint& p) {
  if (p.manifold.kind != ManifoldKind::Hyperboloid)
    throw ArgumentError("stereographic_project: defined for the hyperboloid");
  require_on_manifold(p);
  return p.x.tail(p.manifold.dim) / (1.0 + p.x[0]);
}

Eigen::Vector2d mollweide_project(const ManifoldPoint& p) {
  if (p.manifold.kind != ManifoldKind::Sphere || p.manifold.dim != 2)
    throw ArgumentError("mollweide_project: defined for S^2");
  require_on_manifold(p);
  double lat = std::asin(clamp_unit(p.x[2]));
  double lon = std::atan2(p.x[1], p.x[0]);
  double beta;
  if (std::abs(lat) >= M_PI / 2.0 - 1e-9) {
    beta = std::copysign(M_PI / 2.0, lat);
  } else {
    beta = lat;
    double target = M_PI * std::sin(lat);
    bool converged = false;
    for (int it = 0; it < 50; ++it) {
      double g = 2.0 * beta + std::sin(2.0 * beta) - target;
      if (std::abs(g) < 1e-10) {
        converged = true;
        break;
      }
      double gp = 2.0 + 2.0 * std::cos(2.0 * beta);
      if (gp < 1e-14) gp = 1e-14;
      beta -= g / gp;
      beta = std::min(M_PI / 2.0, std::max(-M_PI / 2.0, beta));
    }
    if (!converged) {
      double g = 2.0 * beta + std::sin(2.0 * beta) - target;
      if (std::abs(g) >= 1e-10)
        throw NumericError("mollweide_project: Newton iteration did not converge");
    }
  }
  Eigen::Vector2d out;
  out[0] = 2.0 * std::sqrt(2.0) / M_PI * lon * std::cos(beta);
  out[1] = std::sqrt(2.0) * std::sin(beta);
  return out;
}

}  // namespace mflow
