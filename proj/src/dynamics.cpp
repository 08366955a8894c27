#include "mflow/dynamics.hpp"

#include <cmath>

#include "mflow/random.hpp"

namespace mflow {

namespace {

constexpr double kChartGuard = 1e-6;  // fraction of the injectivity radius kept off-limits

double fan_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / double(fan_in + fan_out));
}

// d log(sinhc)/dr / r resp. d log(sincr)/dr / r; the radial log-volume
// derivative of the chart appears as w(y) = (n-1) * c(r) * y.  Closed forms
// cancel badly below r ~ 0.1, the series there is exact to ~1e-10.
double chart_c(const Manifold& m, double r) {
  double r2 = r * r;
  if (m.kind == ManifoldKind::Hyperboloid) {
    if (r < 0.1) return 1.0 / 3.0 - r2 / 45.0 + 2.0 * r2 * r2 / 945.0;
    return dlog_sinhc(r) / r;
  }
  if (r < 0.1) return -1.0 / 3.0 - r2 / 45.0 - 2.0 * r2 * r2 / 945.0;
  return dlog_sincr(r) / r;
}

// c'(r)/r, needed for D_y w = (n-1) (c I + (c'/r) y y^T)
double chart_c_prime_over_r(const Manifold& m, double r) {
  double r2 = r * r;
  if (m.kind == ManifoldKind::Hyperboloid) {
    if (r < 0.1) return -2.0 / 45.0 + 8.0 * r2 / 945.0 - 6.0 * r2 * r2 / 4725.0;
    double sh = std::sinh(r);
    return (1.0 / r2 - 1.0 / (sh * sh)) / r2 - chart_c(m, r) / r2;
  }
  if (r < 0.1) return -2.0 / 45.0 - 8.0 * r2 / 945.0 - 6.0 * r2 * r2 / 4725.0;
  double s = std::sin(r);
  return (1.0 / r2 - 1.0 / (s * s)) / r2 - chart_c(m, r) / r2;
}

Vec append_time(const Vec& u, double t) {
  Vec out(u.size() + 1);
  out.head(u.size()) = u;
  out(u.size()) = t;
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// FieldParams

int FieldParams::input_width() const {
  return (mode == FieldMode::AmbientProjected ? manifold.ambient_dim() : manifold.dim) + 1;
}

int FieldParams::output_width() const {
  return mode == FieldMode::AmbientProjected ? manifold.ambient_dim() : manifold.dim;
}

int FieldParams::param_count() const {
  int n = 0;
  for (size_t i = 0; i < W.size(); ++i) n += int(W[i].size()) + int(b[i].size());
  return n;
}

Vec FieldParams::flatten() const {
  Vec out(param_count());
  int at = 0;
  for (size_t i = 0; i < W.size(); ++i) {
    for (int r = 0; r < W[i].rows(); ++r)
      for (int c = 0; c < W[i].cols(); ++c) out(at++) = W[i](r, c);
    out.segment(at, b[i].size()) = b[i];
    at += int(b[i].size());
  }
  return out;
}

void FieldParams::unflatten(const Vec& flat) {
  if (flat.size() != param_count()) throw ArgumentError("unflatten: size mismatch");
  int at = 0;
  for (size_t i = 0; i < W.size(); ++i) {
    for (int r = 0; r < W[i].rows(); ++r)
      for (int c = 0; c < W[i].cols(); ++c) W[i](r, c) = flat(at++);
    b[i] = flat.segment(at, b[i].size());
    at += int(b[i].size());
  }
}

void FieldParams::set_zero() {
  for (auto& w : W) w.setZero();
  for (auto& v : b) v.setZero();
}

FieldParams make_field(const Manifold& m, FieldMode mode, int hidden, int layers) {
  if (layers < 1) throw ArgumentError("make_field: need at least one layer");
  if (hidden < 1) throw ArgumentError("make_field: hidden width must be positive");
  if (mode == FieldMode::TangentDirect && m.kind != ManifoldKind::Hyperboloid)
    throw ArgumentError("make_field: TangentDirect needs a global chart (hyperboloid only)");
  FieldParams p;
  p.manifold = m;
  p.mode = mode;
  int in = p.input_width();
  int out = p.output_width();
  for (int i = 0; i < layers; ++i) {
    int rows = (i == layers - 1) ? out : hidden;
    int cols = (i == 0) ? in : hidden;
    p.W.push_back(Mat::Zero(rows, cols));
    p.b.push_back(Vec::Zero(rows));
  }
  return p;
}

void glorot_init(FieldParams& p, Rng& rng) {
  for (size_t i = 0; i < p.W.size(); ++i) {
    double a = fan_bound(int(p.W[i].cols()), int(p.W[i].rows()));
    for (int r = 0; r < p.W[i].rows(); ++r)
      for (int c = 0; c < p.W[i].cols(); ++c) p.W[i](r, c) = uniform_range(rng, -a, a);
    p.b[i].setZero();
  }
}

// ---------------------------------------------------------------------------
// network passes

Vec mlp_forward(const FieldParams& p, const Vec& u, MlpCache* cache) {
  if (u.size() != p.input_width()) throw ArgumentError("mlp_forward: input width mismatch");
  int L = p.layer_count();
  Vec h = u;
  if (cache) {
    cache->h.assign(1, u);
    cache->pre.clear();
  }
  for (int i = 0; i < L; ++i) {
    Vec pre = p.W[i] * h + p.b[i];
    h = (i < L - 1) ? Vec(pre.array().tanh()) : pre;
    if (cache) {
      cache->pre.push_back(pre);
      cache->h.push_back(h);
    }
  }
  return h;
}

Mat mlp_input_jacobian(const FieldParams& p, const MlpCache& cache) {
  int L = p.layer_count();
  Mat J = p.W[0];
  for (int i = 1; i < L; ++i) {
    // sigma'(pre_{i-1}) = 1 - tanh^2, and cache.h[i] is that tanh
    Vec d = 1.0 - cache.h[i].array().square();
    J = p.W[i] * d.asDiagonal() * J;
  }
  return J;
}

void mlp_vjp_params(const FieldParams& p, const MlpCache& cache, const Vec& cotangent,
                    Vec& grad, Vec* grad_input) {
  int L = p.layer_count();
  if (cotangent.size() != p.output_width()) throw ArgumentError("mlp_vjp_params: cotangent width");
  if (grad.size() != p.param_count()) throw ArgumentError("mlp_vjp_params: grad buffer size");

  // offsets of each layer block in the flat layout
  std::vector<int> off(L);
  int at = 0;
  for (int i = 0; i < L; ++i) {
    off[i] = at;
    at += int(p.W[i].size()) + int(p.b[i].size());
  }

  Vec delta = cotangent;
  for (int i = L - 1; i >= 0; --i) {
    int rows = int(p.W[i].rows()), cols = int(p.W[i].cols());
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) grad(off[i] + r * cols + c) += delta(r) * cache.h[i](c);
    grad.segment(off[i] + rows * cols, rows) += delta;
    if (i > 0) {
      Vec back = p.W[i].transpose() * delta;
      Vec d = 1.0 - cache.h[i].array().square();
      delta = back.cwiseProduct(d);
    } else if (grad_input) {
      *grad_input = p.W[0].transpose() * delta;
    }
  }
}

double mlp_trace_form(const FieldParams& p, const MlpCache& cache, const Mat& A,
                      Vec* grad_params, Vec* grad_input) {
  int L = p.layer_count();
  if (A.rows() != p.input_width() || A.cols() != p.output_width())
    throw ArgumentError("mlp_trace_form: A must be input_width x output_width");

  // sigma' diagonals per hidden layer
  std::vector<Vec> d(L - 1), dd(L - 1);
  for (int i = 0; i + 1 < L; ++i) {
    const Vec& h = cache.h[i + 1];
    d[i] = 1.0 - h.array().square();
    dd[i] = -2.0 * h.array() * d[i].array();  // sigma''
  }

  // Right_j = W_j D_{j-1} ... W_0  (rows of pre_j x input),
  // Left_j  = A W_{L-1} D_{L-2} ... W_{j+1}  (input x rows of pre_j)
  std::vector<Mat> right(L - 1), left(L - 1);
  if (L > 1) {
    right[0] = p.W[0];
    for (int j = 1; j <= L - 2; ++j) right[j] = p.W[j] * d[j - 1].asDiagonal() * right[j - 1];
    left[L - 2] = A * p.W[L - 1];
    for (int j = L - 3; j >= 0; --j) left[j] = left[j + 1] * d[j + 1].asDiagonal() * p.W[j + 1];
  }

  // phi itself: tr(A * W_{L-1} D_{L-2} right_{L-2}) collapses to any split
  double phi;
  if (L == 1) {
    phi = (A * p.W[0]).trace();
  } else {
    phi = (left[L - 2] * d[L - 2].asDiagonal() * right[L - 2]).trace();
  }
  if (!grad_params && !grad_input) return phi;

  // second-order sources at each hidden unit, then ordinary backprop
  std::vector<Vec> delta(L, Vec());
  delta[L - 1] = Vec::Zero(p.output_width());
  for (int j = L - 2; j >= 0; --j) {
    int w = int(right[j].rows());
    Vec s(w);
    for (int k = 0; k < w; ++k) s(k) = right[j].row(k).dot(left[j].col(k)) * dd[j](k);
    Vec back = p.W[j + 1].transpose() * delta[j + 1];
    delta[j] = s + back.cwiseProduct(d[j]);
  }

  if (grad_input) *grad_input = p.W[0].transpose() * delta[0];

  if (grad_params) {
    if (grad_params->size() != p.param_count())
      throw ArgumentError("mlp_trace_form: grad buffer size");
    std::vector<int> off(L);
    int at = 0;
    for (int i = 0; i < L; ++i) {
      off[i] = at;
      at += int(p.W[i].size()) + int(p.b[i].size());
    }
    for (int j = 0; j < L; ++j) {
      int rows = int(p.W[j].rows()), cols = int(p.W[j].cols());
      // direct term: phi depends on W_j inside the Jacobian chain
      // tr(X W_j U) => dW_j = X^T U^T with X, U the flanking chain pieces
      Mat direct;
      if (j == L - 1) {
        direct = (L == 1) ? Mat(A.transpose())
                          : Mat(A.transpose() * (d[L - 2].asDiagonal() * right[L - 2]).transpose());
      } else {
        Mat X = left[j] * d[j].asDiagonal();            // input x rows(W_j)
        Mat U = (j == 0) ? Mat(Mat::Identity(cols, cols)) : Mat(d[j - 1].asDiagonal() * right[j - 1]);
        direct = X.transpose() * U.transpose();
      }
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          (*grad_params)(off[j] + r * cols + c) += direct(r, c) + delta[j](r) * cache.h[j](c);
      (*grad_params).segment(off[j] + rows * cols, rows) += delta[j];
    }
  }
  return phi;
}

// ---------------------------------------------------------------------------
// manifold field

namespace {

// shared sub-expressions of the projected ambient field at an on-manifold z
struct FieldCore {
  MlpCache cache;
  Vec m;    // raw network output
  Vec f;    // projected tangent field
  Vec zl;   // metric-lowered point
};

void field_core(const FieldParams& p, const Vec& z, double t, FieldCore& out) {
  Vec u = append_time(z, t);
  out.m = mlp_forward(p, u, &out.cache);
  out.zl = metric_lower(p.manifold, z);
  // tangent projection: f = m - <z,m> z (sphere), m + <z,m>_L z (hyperboloid)
  double inner = out.zl.dot(out.m);
  if (p.manifold.kind == ManifoldKind::Sphere)
    out.f = out.m - inner * z;
  else
    out.f = out.m + inner * z;
}

// ambient Jacobian of the projected field (valid on the manifold)
Mat projected_field_jacobian(const FieldParams& p, const Vec& z, const FieldCore& c,
                             const Mat& dm_space) {
  int amb = p.manifold.ambient_dim();
  Mat P = Mat::Identity(amb, amb);
  if (p.manifold.kind == ManifoldKind::Sphere) {
    P -= z * z.transpose();
    Mat df = P * dm_space;
    df -= (z.dot(c.m)) * Mat::Identity(amb, amb);
    df -= z * c.m.transpose();
    return df;
  }
  P += z * c.zl.transpose();
  Mat df = P * dm_space;
  df += (c.zl.dot(c.m)) * Mat::Identity(amb, amb);
  df += z * metric_lower(p.manifold, c.m).transpose();
  return df;
}

// trace-form matrix for the divergence: S = tr(A_space dm) + n <z,m>_rho-sign
Mat divergence_A(const FieldParams& p, const Vec& z) {
  int amb = p.manifold.ambient_dim();
  Mat A = Mat::Zero(p.input_width(), p.output_width());
  if (p.manifold.kind == ManifoldKind::Sphere)
    A.topRows(amb) = Mat::Identity(amb, amb) - z * z.transpose();
  else
    A.topRows(amb) = Mat::Identity(amb, amb) + z * metric_lower(p.manifold, z).transpose();
  return A;
}

double divergence_value(const FieldParams& p, const Vec& z, const FieldCore& c,
                        const Mat& dm_space) {
  int n = p.manifold.dim;
  if (p.manifold.kind == ManifoldKind::Sphere)
    return dm_space.trace() - z.dot(dm_space * z) - double(n) * z.dot(c.m);
  return dm_space.trace() + c.zl.dot(dm_space * z) + double(n) * c.zl.dot(c.m);
}

}  // namespace

TangentVector field_eval(const FieldParams& p, const ManifoldPoint& z, double t) {
  if (z.manifold != p.manifold) throw ArgumentError("field_eval: manifold mismatch");
  require_on_manifold(z);
  if (p.mode == FieldMode::AmbientProjected) {
    FieldCore c;
    field_core(p, z.x, t, c);
    return TangentVector{z, c.f};
  }
  // TangentDirect: read chart velocity at the origin chart, push to z
  ManifoldPoint o = manifold_origin(p.manifold);
  Mat F = orthonormal_frame(o);
  TangentVector lg = log_map(o, z);
  Vec y = frame_coords(p.manifold, F, lg.v);
  Vec q = mlp_forward(p, append_time(y, t));
  Mat E = exp_map_differential(TangentVector{o, F * y});
  return TangentVector{z, E * (F * q)};
}

Vec field_eval_ambient(const FieldParams& p, const Manifold& m, const Vec& u, double t) {
  if (m != p.manifold) throw ArgumentError("field_eval_ambient: manifold mismatch");
  if (u.size() != m.ambient_dim()) throw ArgumentError("field_eval_ambient: bad point size");
  if (p.mode == FieldMode::TangentDirect)
    return field_eval(p, project_to_manifold(m, u), t).v;
  // the raw projector formula, evaluated as written at the off-manifold point
  FieldCore c;
  field_core(p, u, t, c);
  return c.f;
}

Mat ambient_field_jacobian(const FieldParams& p, const Vec& u, double t) {
  if (p.mode != FieldMode::AmbientProjected)
    throw ArgumentError("ambient_field_jacobian: defined for the projected ambient field");
  if (u.size() != p.manifold.ambient_dim())
    throw ArgumentError("ambient_field_jacobian: bad point size");
  FieldCore c;
  field_core(p, u, t, c);
  Mat jac = mlp_input_jacobian(p, c.cache);
  Mat dm_space = jac.leftCols(p.manifold.ambient_dim());
  return projected_field_jacobian(p, u, c, dm_space);
}

void ambient_field_vjp(const FieldParams& p, const Vec& u, double t, const Vec& cotangent,
                       double outer_scale, Vec& grad) {
  if (p.mode != FieldMode::AmbientProjected)
    throw ArgumentError("ambient_field_vjp: defined for the projected ambient field");
  if (cotangent.size() != p.manifold.ambient_dim())
    throw ArgumentError("ambient_field_vjp: cotangent size");
  FieldCore c;
  field_core(p, u, t, c);
  Vec cm;
  if (p.manifold.kind == ManifoldKind::Sphere)
    cm = cotangent - u * (u.dot(cotangent));
  else
    cm = cotangent + c.zl * (u.dot(cotangent));
  mlp_vjp_params(p, c.cache, Vec(outer_scale * cm), grad);
}

Mat field_jacobian_z(const FieldParams& p, const ManifoldPoint& z, double t) {
  if (z.manifold != p.manifold) throw ArgumentError("field_jacobian_z: manifold mismatch");
  require_on_manifold(z);
  if (p.mode == FieldMode::AmbientProjected) {
    FieldCore c;
    field_core(p, z.x, t, c);
    Mat jac = mlp_input_jacobian(p, c.cache);
    Mat dm_space = jac.leftCols(p.manifold.ambient_dim());
    return projected_field_jacobian(p, z.x, c, dm_space);
  }
  ManifoldPoint o = manifold_origin(p.manifold);
  Mat F = orthonormal_frame(o);
  Vec y = frame_coords(p.manifold, F, log_map(o, z).v);
  MlpCache cache;
  mlp_forward(p, append_time(y, t), &cache);
  Mat jac = mlp_input_jacobian(p, cache);
  return jac.leftCols(p.manifold.dim);
}

Vec field_vjp_params(const FieldParams& p, const ManifoldPoint& z, double t,
                     const Vec& cotangent) {
  if (z.manifold != p.manifold) throw ArgumentError("field_vjp_params: manifold mismatch");
  require_on_manifold(z);
  Vec grad = Vec::Zero(p.param_count());
  if (p.mode == FieldMode::AmbientProjected) {
    if (cotangent.size() != p.manifold.ambient_dim())
      throw ArgumentError("field_vjp_params: cotangent size");
    FieldCore c;
    field_core(p, z.x, t, c);
    // f = P m: pull the cotangent through the projector
    Vec cm;
    if (p.manifold.kind == ManifoldKind::Sphere)
      cm = cotangent - z.x * (z.x.dot(cotangent));
    else
      cm = cotangent + c.zl * (z.x.dot(cotangent));
    mlp_vjp_params(p, c.cache, cm, grad);
    return grad;
  }
  if (cotangent.size() != p.manifold.dim)
    throw ArgumentError("field_vjp_params: cotangent size");
  ManifoldPoint o = manifold_origin(p.manifold);
  Mat F = orthonormal_frame(o);
  Vec y = frame_coords(p.manifold, F, log_map(o, z).v);
  MlpCache cache;
  mlp_forward(p, append_time(y, t), &cache);
  mlp_vjp_params(p, cache, cotangent, grad);
  return grad;
}

double ambient_divergence(const FieldParams& p, const Vec& u, double t) {
  if (p.mode == FieldMode::TangentDirect)
    throw ArgumentError("ambient_divergence: defined for the projected ambient field");
  FieldCore c;
  field_core(p, u, t, c);
  Mat jac = mlp_input_jacobian(p, c.cache);
  Mat dm_space = jac.leftCols(p.manifold.ambient_dim());
  return divergence_value(p, u, c, dm_space);
}

DivergenceEval ambient_divergence_grad(const FieldParams& p, const Vec& u, double t) {
  if (p.mode == FieldMode::TangentDirect)
    throw ArgumentError("ambient_divergence_grad: defined for the projected ambient field");
  int amb = p.manifold.ambient_dim();
  int n = p.manifold.dim;
  FieldCore c;
  field_core(p, u, t, c);
  Mat jac = mlp_input_jacobian(p, c.cache);
  Mat dm = jac.leftCols(amb);

  DivergenceEval out;
  out.S = divergence_value(p, u, c, dm);

  Vec grad_u;
  mlp_trace_form(p, c.cache, divergence_A(p, u), nullptr, &grad_u);
  Vec g = grad_u.head(amb);
  if (p.manifold.kind == ManifoldKind::Sphere) {
    g -= dm * u + dm.transpose() * u;
    g -= double(n) * (c.m + dm.transpose() * u);
  } else {
    Vec jz = c.zl;
    g += dm.transpose() * jz + metric_lower(p.manifold, Vec(dm * u));
    g += double(n) * (metric_lower(p.manifold, c.m) + dm.transpose() * jz);
  }
  out.dS_dz = g;
  return out;
}

void ambient_divergence_vjp(const FieldParams& p, const Vec& u, double t, double outer_scale,
                            Vec& grad) {
  if (p.mode == FieldMode::TangentDirect)
    throw ArgumentError("ambient_divergence_vjp: defined for the projected ambient field");
  FieldCore c;
  field_core(p, u, t, c);
  mlp_trace_form(p, c.cache, Mat(outer_scale * divergence_A(p, u)), &grad, nullptr);
  double n = double(p.manifold.dim);
  Vec cot = (p.manifold.kind == ManifoldKind::Sphere) ? Vec(-n * outer_scale * u)
                                                      : Vec(n * outer_scale * c.zl);
  mlp_vjp_params(p, c.cache, cot, grad);
}

double manifold_divergence(const FieldParams& p, const ManifoldPoint& z, double t) {
  require_on_manifold(z);
  return ambient_divergence(p, z.x, t);
}

DivergenceEval manifold_divergence_grad(const FieldParams& p, const ManifoldPoint& z, double t) {
  require_on_manifold(z);
  return ambient_divergence_grad(p, z.x, t);
}

void manifold_divergence_vjp(const FieldParams& p, const ManifoldPoint& z, double t,
                             double outer_scale, Vec& grad) {
  require_on_manifold(z);
  ambient_divergence_vjp(p, z.x, t, outer_scale, grad);
}

// ---------------------------------------------------------------------------
// ChartContext

struct ChartContext::Eval {
  Vec v;          // ambient tangent at the anchor
  double r = 0.0;
  ManifoldPoint z;
  FieldCore core;
  Vec g;          // chart velocity (unscaled)
  double S = 0.0; // intrinsic divergence at z
  Vec w;          // gradient of the chart log-volume
  double trace = 0.0;

  // derivative level
  Mat dm_space;
  Mat L;          // D_z log_anchor
  Mat B;          // D_y z = exp differential * frame
  Mat dg_dy;
  Vec dS_dz;
};

ChartContext::ChartContext(const FieldParams& theta, ManifoldPoint anchor)
    : theta_(theta), anchor_(std::move(anchor)) {
  if (anchor_.manifold != theta.manifold) throw ArgumentError("ChartContext: manifold mismatch");
  require_on_manifold(anchor_);
  if (theta.mode == FieldMode::TangentDirect) {
    ManifoldPoint o = manifold_origin(theta.manifold);
    if ((anchor_.x - o.x).lpNorm<Eigen::Infinity>() > 1e-12)
      throw ArgumentError("ChartContext: TangentDirect works in the global origin chart");
  }
  frame_ = orthonormal_frame(anchor_);
  frame_low_.resize(frame_.rows(), frame_.cols());
  for (int j = 0; j < frame_.cols(); ++j)
    frame_low_.col(j) = metric_lower(anchor_.manifold, Vec(frame_.col(j)));
}

ManifoldPoint ChartContext::push(const Vec& y) const {
  return exp_map(TangentVector{anchor_, frame_ * y});
}

Vec ChartContext::pull(const ManifoldPoint& z) const {
  return frame_coords(anchor_.manifold, frame_, log_map(anchor_, z).v);
}

double ChartContext::boundary_logdet(const Vec& y) const {
  double r = y.norm();
  if (anchor_.manifold.kind == ManifoldKind::Hyperboloid)
    return double(dim() - 1) * log_sinhc(r);
  return double(dim() - 1) * log_sincr(r);
}

Vec ChartContext::boundary_w(const Vec& y) const {
  return double(dim() - 1) * chart_c(anchor_.manifold, y.norm()) * y;
}

double ChartContext::overflow_radius() const {
  return anchor_.manifold.injectivity_radius() * (1.0 - kChartGuard);
}

void ChartContext::base_eval(const Vec& y, double t, Eval& e, bool with_derivs) const {
  if (y.size() != dim()) throw ArgumentError("chart dynamics: coordinate size mismatch");
  e.r = y.norm();
  // only a finite validity ball can overflow; non-finite coordinates fall
  // through and surface as a numeric error at the solver level
  if (std::isfinite(overflow_radius()) && e.r >= overflow_radius())
    throw ChartOverflow("chart coordinate outside the validity ball");

  const Manifold& m = anchor_.manifold;
  if (theta_.mode == FieldMode::TangentDirect) {
    Vec u = append_time(y, t);
    e.core.m = mlp_forward(theta_, u, &e.core.cache);
    e.g = e.core.m;
    Mat jac = mlp_input_jacobian(theta_, e.core.cache);
    e.dm_space = jac.leftCols(dim());
    e.trace = e.dm_space.trace();
    if (with_derivs) e.dg_dy = e.dm_space;
    return;
  }

  e.v = frame_ * y;
  e.z = exp_map(TangentVector{anchor_, e.v});
  field_core(theta_, e.z.x, t, e.core);
  e.L = log_map_jacobian(anchor_, e.z);
  e.g = frame_low_.transpose() * (e.L * e.core.f);

  Mat jac = mlp_input_jacobian(theta_, e.core.cache);
  e.dm_space = jac.leftCols(m.ambient_dim());
  e.S = divergence_value(theta_, e.z.x, e.core, e.dm_space);
  e.w = boundary_w(y);
  e.trace = e.S - e.w.dot(e.g);

  if (!with_derivs) return;

  Mat E = exp_map_differential(TangentVector{anchor_, e.v});
  e.B = E * frame_;
  Mat df = projected_field_jacobian(theta_, e.z.x, e.core, e.dm_space);

  // derivative of the log-map Jacobian applied to the (held) field value
  const Vec& x = anchor_.x;
  const Vec& z = e.z.x;
  const Vec& f = e.core.f;
  int amb = m.ambient_dim();
  Mat K(amb, amb);
  if (m.kind == ManifoldKind::Sphere) {
    double cang = clamp_unit(x.dot(z));
    double dgeo = std::acos(cang);
    double f1, f1p;
    if (dgeo < 1e-3) {
      double d2 = dgeo * dgeo;
      f1 = -1.0 / 3.0 - 2.0 * d2 / 15.0 - 2.0 * d2 * d2 / 63.0;
      f1p = 4.0 / 15.0 + 6.0 * d2 / 35.0;
    } else {
      double s = std::sin(dgeo);
      f1 = (cang * dgeo - s) / (s * s * s);
      f1p = (dgeo * s * s + 3.0 * cang * (cang * dgeo - s)) / std::pow(s, 5);
    }
    double xf = x.dot(f);
    K = f1p * xf * (z - cang * x) * x.transpose();
    K += f1 * xf * (Mat::Identity(amb, amb) - x * x.transpose());
    K += f1 * (f - x * xf) * x.transpose();
  } else {
    Vec xl = metric_lower(m, x);
    double al = -xl.dot(z);
    double dgeo = std::acosh(std::max(al, 1.0));
    double g1, g1p;
    if (dgeo < 1e-3) {
      double d2 = dgeo * dgeo;
      g1 = -1.0 / 3.0 + 2.0 * d2 / 15.0 - 2.0 * d2 * d2 / 63.0;
      g1p = 4.0 / 15.0 - 6.0 * d2 / 35.0;
    } else {
      double sh = std::sinh(dgeo);
      g1 = (sh - dgeo * al) / (sh * sh * sh);
      g1p = -(dgeo * sh * sh + 3.0 * al * (sh - dgeo * al)) / std::pow(sh, 5);
    }
    double af = xl.dot(f);
    K = g1p * af * (z - al * x) * xl.transpose();
    K -= g1 * af * (Mat::Identity(amb, amb) + x * xl.transpose());
    K -= g1 * (f + af * x) * xl.transpose();
  }

  e.dg_dy = frame_low_.transpose() * (e.L * df + K) * e.B;

  Vec grad_u;
  mlp_trace_form(theta_, e.core.cache, divergence_A(theta_, z), nullptr, &grad_u);
  e.dS_dz = grad_u.head(amb);
  int n = dim();
  if (m.kind == ManifoldKind::Sphere) {
    e.dS_dz -= e.dm_space * z + e.dm_space.transpose() * z;
    e.dS_dz -= double(n) * (e.core.m + e.dm_space.transpose() * z);
  } else {
    e.dS_dz += e.dm_space.transpose() * e.core.zl + metric_lower(m, Vec(e.dm_space * z));
    e.dS_dz += double(n) * (metric_lower(m, e.core.m) + e.dm_space.transpose() * e.core.zl);
  }
}

Vec ChartContext::velocity(const Vec& y, double t) const {
  Eval e;
  base_eval(y, t, e, false);
  return scale * e.g;
}

void ChartContext::velocity_and_trace(const Vec& y, double t, Vec& g, double& trace) const {
  Eval e;
  base_eval(y, t, e, false);
  g = scale * e.g;
  trace = scale * e.trace;
}

ChartContext::GradBundle ChartContext::assemble_bundle(const Eval& e, const Vec& y) const {
  GradBundle out;
  out.g = scale * e.g;
  out.trace = scale * e.trace;
  out.dg_dy = scale * e.dg_dy;
  if (theta_.mode == FieldMode::TangentDirect) {
    Vec grad_u;
    Mat A = Mat::Zero(theta_.input_width(), theta_.output_width());
    A.topRows(dim()).setIdentity();
    mlp_trace_form(theta_, e.core.cache, A, nullptr, &grad_u);
    out.dtrace_dy = scale * grad_u.head(dim());
    return out;
  }
  // trace = S - w.g; dT/dy = B^T dS/dz - (Dw) g - dg_dy^T w
  int n = dim();
  double c = chart_c(anchor_.manifold, e.r);
  double cpr = chart_c_prime_over_r(anchor_.manifold, e.r);
  Vec dw_g = double(n - 1) * (c * e.g + cpr * (y.dot(e.g)) * y);
  out.dtrace_dy = scale * Vec(e.B.transpose() * e.dS_dz - dw_g - e.dg_dy.transpose() * e.w);
  return out;
}

ChartContext::GradBundle ChartContext::grad_bundle(const Vec& y, double t) const {
  Eval e;
  base_eval(y, t, e, true);
  return assemble_bundle(e, y);
}

void ChartContext::assemble_vjp(const Eval& e, const Vec& a, double lam, double outer_scale,
                                Vec& grad) const {
  double s = outer_scale * scale;

  if (theta_.mode == FieldMode::TangentDirect) {
    if (a.size() != dim()) throw ArgumentError("vjp_theta: covector size");
    mlp_vjp_params(theta_, e.core.cache, Vec(s * a), grad);
    if (lam != 0.0) {
      Mat A = Mat::Zero(theta_.input_width(), theta_.output_width());
      A.topRows(dim()).setIdentity();
      mlp_trace_form(theta_, e.core.cache, Mat((lam * s) * A), &grad, nullptr);
    }
    return;
  }

  const Manifold& m = anchor_.manifold;
  // a^T dg/dtheta and -lam w^T dg/dtheta pull back to one cotangent on the
  // raw network output; the divergence part adds its own trace form.
  Vec av = a;
  if (lam != 0.0) av -= lam * e.w;
  Vec amb_cot = e.L.transpose() * (frame_low_ * av);
  Vec cm;
  if (m.kind == ManifoldKind::Sphere)
    cm = amb_cot - e.z.x * (e.z.x.dot(amb_cot));
  else
    cm = amb_cot + e.core.zl * (e.z.x.dot(amb_cot));
  mlp_vjp_params(theta_, e.core.cache, Vec(s * cm), grad);

  if (lam != 0.0) {
    mlp_trace_form(theta_, e.core.cache, Mat((lam * s) * divergence_A(theta_, e.z.x)), &grad,
                   nullptr);
    double n = double(dim());
    Vec cot = (m.kind == ManifoldKind::Sphere) ? Vec(-n * lam * s * e.z.x)
                                               : Vec(n * lam * s * e.core.zl);
    mlp_vjp_params(theta_, e.core.cache, cot, grad);
  }
}

void ChartContext::vjp_theta(const Vec& y, double t, const Vec& a, double lam,
                             double outer_scale, Vec& grad) const {
  Eval e;
  base_eval(y, t, e, false);
  assemble_vjp(e, a, lam, outer_scale, grad);
}

ChartContext::GradBundle ChartContext::adjoint_eval(const Vec& y, double t, const Vec& a,
                                                    double lam, double outer_scale,
                                                    Vec& grad) const {
  Eval e;
  base_eval(y, t, e, true);
  assemble_vjp(e, a, lam, outer_scale, grad);
  return assemble_bundle(e, y);
}

Vec chart_pullback_dynamics(const FieldParams& theta, const ManifoldPoint& anchor,
                            const Vec& y, double t) {
  ChartContext ctx(theta, anchor);
  return ctx.velocity(y, t);
}

}  // namespace mflow
