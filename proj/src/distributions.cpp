#include "mflow/distributions.hpp"

#include <cmath>
#include <limits>

#include "mflow/random.hpp"

namespace mflow {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// margin keeping accepted sphere samples strictly inside the antipode
// rejection threshold of log_map (cos(pi - 1e-4) = -1 + 5e-9)
constexpr double kSphereRadiusMargin = 1e-4;

Mat origin_frame(const Manifold& m) { return orthonormal_frame(manifold_origin(m)); }

double gaussian_logpdf(const Vec& c, const Mat& cov) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ArgumentError("gaussian_logpdf: covariance is not positive definite");
  int n = static_cast<int>(c.size());
  Vec y = llt.matrixL().solve(c);
  double logdet = 0.0;
  for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixL()(i, i));
  return -0.5 * n * std::log(2.0 * M_PI) - logdet - 0.5 * y.squaredNorm();
}

Vec gaussian_draw(const Mat& cov, Rng& rng) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ArgumentError("gaussian_draw: covariance is not positive definite");
  int n = static_cast<int>(cov.rows());
  Vec z(n);
  for (int i = 0; i < n; ++i) z[i] = normal01(rng);
  return llt.matrixL() * z;
}

void check_weights(const std::vector<double>& w, size_t n_components, const char* who) {
  if (w.size() != n_components) throw ArgumentError(std::string(who) + ": weight count mismatch");
  double total = 0.0;
  for (double wi : w) {
    if (wi < 0.0) throw ArgumentError(std::string(who) + ": negative mixture weight");
    total += wi;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw ArgumentError(std::string(who) + ": mixture weights must sum to 1");
}

// area of the unit sphere S^{p-1} in R^p
double sphere_surface_area(int p) {
  return 2.0 * std::pow(M_PI, 0.5 * p) / std::tgamma(0.5 * p);
}

// one axis-aligned rectangle of a checkerboard, already clipped
struct Cell {
  double x_lo, x_hi, y_lo, y_hi;
  double area;
};

std::vector<Cell> tangent_cells(const TangentCheckerboard& cb) {
  if (cb.side <= 0.0 || cb.half_extent <= 0.0)
    throw ArgumentError("checkerboard: side and extent must be positive");
  std::vector<Cell> cells;
  double he = cb.half_extent, s = cb.side;
  long i_lo = static_cast<long>(std::floor((-he - cb.anchor[0]) / s));
  long i_hi = static_cast<long>(std::floor((he - cb.anchor[0]) / s));
  long j_lo = static_cast<long>(std::floor((-he - cb.anchor[1]) / s));
  long j_hi = static_cast<long>(std::floor((he - cb.anchor[1]) / s));
  for (long i = i_lo; i <= i_hi; ++i) {
    for (long j = j_lo; j <= j_hi; ++j) {
      if (((i + j) % 2 + 2) % 2 != 0) continue;  // anchor cell (0,0) is live
      Cell c;
      c.x_lo = std::max(cb.anchor[0] + i * s, -he);
      c.x_hi = std::min(cb.anchor[0] + (i + 1) * s, he);
      c.y_lo = std::max(cb.anchor[1] + j * s, -he);
      c.y_hi = std::min(cb.anchor[1] + (j + 1) * s, he);
      if (c.x_hi <= c.x_lo || c.y_hi <= c.y_lo) continue;
      c.area = (c.x_hi - c.x_lo) * (c.y_hi - c.y_lo);
      cells.push_back(c);
    }
  }
  if (cells.empty()) throw ArgumentError("checkerboard: no live cells in extent");
  return cells;
}

// cells over (phi, theta) in [0,2pi] x [0,pi]; area is the true surface area
std::vector<Cell> spherical_cells(const SphericalCheckerboard& cb) {
  if (cb.side_phi <= 0.0 || cb.side_theta <= 0.0)
    throw ArgumentError("checkerboard: side lengths must be positive");
  std::vector<Cell> cells;
  double sp = cb.side_phi, st = cb.side_theta;
  long i_lo = static_cast<long>(std::floor((0.0 - cb.anchor[0]) / sp));
  long i_hi = static_cast<long>(std::floor((2.0 * M_PI - cb.anchor[0]) / sp));
  long j_lo = static_cast<long>(std::floor((0.0 - cb.anchor[1]) / st));
  long j_hi = static_cast<long>(std::floor((M_PI - cb.anchor[1]) / st));
  for (long i = i_lo; i <= i_hi; ++i) {
    for (long j = j_lo; j <= j_hi; ++j) {
      if (((i + j) % 2 + 2) % 2 != 0) continue;
      Cell c;
      c.x_lo = std::max(cb.anchor[0] + i * sp, 0.0);
      c.x_hi = std::min(cb.anchor[0] + (i + 1) * sp, 2.0 * M_PI);
      c.y_lo = std::max(cb.anchor[1] + j * st, 0.0);
      c.y_hi = std::min(cb.anchor[1] + (j + 1) * st, M_PI);
      if (c.x_hi <= c.x_lo || c.y_hi <= c.y_lo) continue;
      c.area = (c.x_hi - c.x_lo) * (std::cos(c.y_lo) - std::cos(c.y_hi));
      if (c.area <= 0.0) continue;
      cells.push_back(c);
    }
  }
  if (cells.empty()) throw ArgumentError("checkerboard: no live cells");
  return cells;
}

double live_area(const std::vector<Cell>& cells) {
  double z = 0.0;
  for (const Cell& c : cells) z += c.area;
  return z;
}

}  // namespace

WrappedNormalSpec wrapped_normal(ManifoldPoint mean, Mat cov) {
  const Manifold m = mean.manifold;
  require_on_manifold(mean);
  if (cov.rows() != m.dim || cov.cols() != m.dim)
    throw ArgumentError("wrapped_normal: covariance must be n x n");
  if ((cov - cov.transpose()).lpNorm<Eigen::Infinity>() > 1e-12)
    throw ArgumentError("wrapped_normal: covariance must be symmetric");
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ArgumentError("wrapped_normal: covariance must be positive definite");
  return WrappedNormalSpec{std::move(mean), std::move(cov), manifold_origin(m)};
}

ManifoldPoint wrapped_normal_sample(const WrappedNormalSpec& spec, Rng& rng) {
  const Manifold& m = spec.mean.manifold;
  Mat F = origin_frame(m);
  Vec c = gaussian_draw(spec.cov, rng);
  if (m.kind == ManifoldKind::Sphere) {
    // truncate the (tiny) tail that exp cannot invert; norm is transport
    // invariant so the radius test can happen before transporting
    while (c.norm() >= M_PI - kSphereRadiusMargin) c = gaussian_draw(spec.cov, rng);
  }
  TangentVector v0{spec.origin, F * c};
  TangentVector u = parallel_transport(spec.origin, spec.mean, v0);
  return exp_map(u);
}

double wrapped_normal_logpdf(const WrappedNormalSpec& spec, const ManifoldPoint& x) {
  const Manifold& m = spec.mean.manifold;
  TangentVector u = log_map(spec.mean, x);
  TangentVector v0 = parallel_transport(spec.mean, spec.origin, u);
  Vec c = frame_coords(m, origin_frame(m), v0.v);
  return gaussian_logpdf(c, spec.cov) - logdet_exp(u);
}

ManifoldPoint vmf_sample(const VmfSpec& spec, Rng& rng) {
  const Manifold& m = spec.mean_direction.manifold;
  if (m.kind != ManifoldKind::Sphere) throw ArgumentError("vmf_sample: needs a sphere");
  if (spec.concentration < 0.0) throw ArgumentError("vmf_sample: concentration must be >= 0");
  int p = m.ambient_dim();
  if (spec.concentration == 0.0) {
    Vec z(p);
    double n2;
    do {
      for (int i = 0; i < p; ++i) z[i] = normal01(rng);
      n2 = z.norm();
    } while (n2 < 1e-12);
    return ManifoldPoint{m, z / n2};
  }
  // radial rejection sampler, then a Householder reflection takes the pole
  // e0 to the mean direction
  double kappa = spec.concentration;
  double pm1 = p - 1.0;
  double b = pm1 / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + pm1 * pm1));
  double x0 = (1.0 - b) / (1.0 + b);
  double cacc = kappa * x0 + pm1 * std::log(1.0 - x0 * x0);
  double w;
  for (;;) {
    double zb = beta_draw(rng, 0.5 * pm1, 0.5 * pm1);
    w = (1.0 - (1.0 + b) * zb) / (1.0 - (1.0 - b) * zb);
    double u = uniform_open(rng);
    if (kappa * w + pm1 * std::log(1.0 - x0 * w) - cacc >= std::log(u)) break;
  }
  Vec dir(p - 1);
  double dn;
  do {
    for (int i = 0; i < p - 1; ++i) dir[i] = normal01(rng);
    dn = dir.norm();
  } while (dn < 1e-12);
  dir /= dn;
  Vec s(p);
  s[0] = w;
  s.tail(p - 1) = std::sqrt(std::max(0.0, 1.0 - w * w)) * dir;
  Vec u = Vec::Unit(p, 0) - spec.mean_direction.x;
  double un = u.norm();
  if (un < 1e-12) return ManifoldPoint{m, s};
  u /= un;
  Vec z = s - 2.0 * u.dot(s) * u;
  return ManifoldPoint{m, z / z.norm()};
}

double vmf_logpdf(const VmfSpec& spec, const ManifoldPoint& z) {
  const Manifold& m = spec.mean_direction.manifold;
  if (m.kind != ManifoldKind::Sphere) throw ArgumentError("vmf_logpdf: needs a sphere");
  if (z.manifold != m) throw ArgumentError("vmf_logpdf: point on wrong manifold");
  require_on_manifold(z);
  double kappa = spec.concentration;
  int p = m.ambient_dim();
  if (kappa == 0.0) return -std::log(sphere_surface_area(p));
  double logc;
  if (p == 3) {
    // kappa / (4 pi sinh kappa), written through log(sinh(k)/k) for stability
    logc = -std::log(4.0 * M_PI) - log_sinhc(kappa);
  } else {
    double nu = 0.5 * p - 1.0;
    logc = nu * std::log(kappa) - 0.5 * p * std::log(2.0 * M_PI) -
           std::log(std::cyl_bessel_i(nu, kappa));
  }
  return logc + kappa * spec.mean_direction.x.dot(z.x);
}

Manifold density_manifold(const DensitySpec& spec) {
  return std::visit(
      [](const auto& s) -> Manifold {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, WrappedNormalSpec>) return s.mean.manifold;
        else if constexpr (std::is_same_v<T, VmfSpec>) return s.mean_direction.manifold;
        else if constexpr (std::is_same_v<T, WrappedNormalMixture>) {
          if (s.components.empty()) throw ArgumentError("mixture: no components");
          return s.components.front().mean.manifold;
        } else if constexpr (std::is_same_v<T, ProjectedGaussianMixture>) return s.manifold;
        else if constexpr (std::is_same_v<T, TangentCheckerboard>) return s.manifold;
        else return Manifold::sphere(2);
      },
      spec);
}

bool density_is_normalized(const DensitySpec&) { return true; }

ManifoldPoint target_sample(const DensitySpec& spec, Rng& rng) {
  if (const auto* wn = std::get_if<WrappedNormalSpec>(&spec)) return wrapped_normal_sample(*wn, rng);
  if (const auto* vm = std::get_if<VmfSpec>(&spec)) return vmf_sample(*vm, rng);
  if (const auto* mix = std::get_if<WrappedNormalMixture>(&spec)) {
    check_weights(mix->weights, mix->components.size(), "wrapped normal mixture");
    int k = categorical_draw(rng, mix->weights);
    return wrapped_normal_sample(mix->components[k], rng);
  }
  if (const auto* pg = std::get_if<ProjectedGaussianMixture>(&spec)) {
    check_weights(pg->weights, pg->tangent_means.size(), "projected gaussian mixture");
    if (pg->covs.size() != pg->tangent_means.size())
      throw ArgumentError("projected gaussian mixture: covariance count mismatch");
    int k = categorical_draw(rng, pg->weights);
    Vec c = pg->tangent_means[k] + gaussian_draw(pg->covs[k], rng);
    ManifoldPoint o = manifold_origin(pg->manifold);
    return exp_map(TangentVector{o, origin_frame(pg->manifold) * c});
  }
  if (const auto* cb = std::get_if<TangentCheckerboard>(&spec)) {
    std::vector<Cell> cells = tangent_cells(*cb);
    std::vector<double> areas(cells.size());
    for (size_t i = 0; i < cells.size(); ++i) areas[i] = cells[i].area;
    const Cell& c = cells[categorical_draw(rng, areas)];
    Eigen::Vector2d t(uniform_range(rng, c.x_lo, c.x_hi), uniform_range(rng, c.y_lo, c.y_hi));
    ManifoldPoint o = manifold_origin(cb->manifold);
    return exp_map(TangentVector{o, origin_frame(cb->manifold) * t});
  }
  const auto& cb = std::get<SphericalCheckerboard>(spec);
  std::vector<Cell> cells = spherical_cells(cb);
  std::vector<double> areas(cells.size());
  for (size_t i = 0; i < cells.size(); ++i) areas[i] = cells[i].area;
  const Cell& c = cells[categorical_draw(rng, areas)];
  double phi = uniform_range(rng, c.x_lo, c.x_hi);
  // theta by inverse CDF of sin(theta) restricted to the cell
  double u = uniform01(rng);
  double ct = std::cos(c.y_lo) - u * (std::cos(c.y_lo) - std::cos(c.y_hi));
  return from_spherical(phi, std::acos(clamp_unit(ct)));
}

double target_logpdf(const DensitySpec& spec, const ManifoldPoint& x) {
  if (const auto* wn = std::get_if<WrappedNormalSpec>(&spec)) return wrapped_normal_logpdf(*wn, x);
  if (const auto* vm = std::get_if<VmfSpec>(&spec)) return vmf_logpdf(*vm, x);
  if (const auto* mix = std::get_if<WrappedNormalMixture>(&spec)) {
    check_weights(mix->weights, mix->components.size(), "wrapped normal mixture");
    Vec terms(static_cast<int>(mix->components.size()));
    for (size_t i = 0; i < mix->components.size(); ++i)
      terms[i] = std::log(mix->weights[i]) + wrapped_normal_logpdf(mix->components[i], x);
    return logsumexp(terms);
  }
  if (const auto* pg = std::get_if<ProjectedGaussianMixture>(&spec)) {
    check_weights(pg->weights, pg->tangent_means.size(), "projected gaussian mixture");
    ManifoldPoint o = manifold_origin(pg->manifold);
    TangentVector v = log_map(o, x);
    Vec c = frame_coords(pg->manifold, origin_frame(pg->manifold), v.v);
    Vec terms(static_cast<int>(pg->tangent_means.size()));
    for (int i = 0; i < terms.size(); ++i)
      terms[i] = std::log(pg->weights[i]) + gaussian_logpdf(c - pg->tangent_means[i], pg->covs[i]);
    return logsumexp(terms) - logdet_exp(v);
  }
  if (const auto* cb = std::get_if<TangentCheckerboard>(&spec)) {
    ManifoldPoint o = manifold_origin(cb->manifold);
    TangentVector v = log_map(o, x);
    Vec c = frame_coords(cb->manifold, origin_frame(cb->manifold), v.v);
    if (c.lpNorm<Eigen::Infinity>() >= cb->half_extent) return kNegInf;
    long i = static_cast<long>(std::floor((c[0] - cb->anchor[0]) / cb->side));
    long j = static_cast<long>(std::floor((c[1] - cb->anchor[1]) / cb->side));
    if (((i + j) % 2 + 2) % 2 != 0) return kNegInf;
    return -std::log(live_area(tangent_cells(*cb))) - logdet_exp(v);
  }
  const auto& cb = std::get<SphericalCheckerboard>(spec);
  if (x.manifold.kind != ManifoldKind::Sphere || x.manifold.dim != 2)
    throw ArgumentError("spherical checkerboard: needs S^2");
  require_on_manifold(x);
  Eigen::Vector2d pt = spherical_coords(x);
  long i = static_cast<long>(std::floor((pt[0] - cb.anchor[0]) / cb.side_phi));
  long j = static_cast<long>(std::floor((pt[1] - cb.anchor[1]) / cb.side_theta));
  if (((i + j) % 2 + 2) % 2 != 0) return kNegInf;
  return -std::log(live_area(spherical_cells(cb)));
}

namespace {

// d log N(c; 0, cov) / dc
Vec gaussian_score(const Vec& c, const Mat& cov) {
  Eigen::LLT<Mat> llt(cov);
  if (llt.info() != Eigen::Success)
    throw ArgumentError("gaussian_score: covariance is not positive definite");
  return -llt.solve(c);
}

// parallel transport from -> to as a linear map on the transported vector
Mat transport_matrix(const ManifoldPoint& from, const ManifoldPoint& to) {
  const Manifold& m = from.manifold;
  int d = m.ambient_dim();
  if (m.kind == ManifoldKind::Sphere) {
    double c = from.x.dot(to.x);
    if (c <= -1.0 + kAntipodeTol) throw DomainError("transport_matrix: antipodal points");
    return Mat::Identity(d, d) - ((from.x + to.x) * to.x.transpose()) / (1.0 + c);
  }
  double c = lorentz_inner(from.x, to.x);
  return Mat::Identity(d, d) +
         ((from.x + to.x) * metric_lower(m, to.x).transpose()) / (1.0 - c);
}

Mat lowered_columns(const Manifold& m, const Mat& frame) {
  Mat low(frame.rows(), frame.cols());
  for (int j = 0; j < frame.cols(); ++j) low.col(j) = metric_lower(m, Vec(frame.col(j)));
  return low;
}

// d(logdet_exp)/du as an ambient covector at u = log(x)
Vec logdet_exp_pullback(const Manifold& m, const TangentVector& u) {
  double r = tangent_norm(u);
  double dl = m.kind == ManifoldKind::Hyperboloid ? dlog_sinhc_over_r(r) : dlog_sincr_over_r(r);
  return double(m.dim - 1) * dl * metric_lower(m, u.v);
}

Vec wrapped_normal_score(const WrappedNormalSpec& spec, const ManifoldPoint& x) {
  const Manifold& m = spec.mean.manifold;
  TangentVector u = log_map(spec.mean, x);
  TangentVector v0 = parallel_transport(spec.mean, spec.origin, u);
  Mat f0_low = lowered_columns(m, origin_frame(m));
  Vec c = f0_low.transpose() * v0.v;
  Mat pt = transport_matrix(spec.mean, spec.origin);
  Vec du = pt.transpose() * (f0_low * gaussian_score(c, spec.cov)) - logdet_exp_pullback(m, u);
  return log_map_jacobian(spec.mean, x).transpose() * du;
}

}  // namespace

Vec target_logpdf_gradient(const DensitySpec& spec, const ManifoldPoint& x) {
  if (const auto* wn = std::get_if<WrappedNormalSpec>(&spec)) return wrapped_normal_score(*wn, x);
  if (const auto* vm = std::get_if<VmfSpec>(&spec)) {
    if (x.manifold != vm->mean_direction.manifold)
      throw ArgumentError("target_logpdf_gradient: manifold mismatch");
    require_on_manifold(x);
    return vm->concentration * vm->mean_direction.x;
  }
  if (const auto* mix = std::get_if<WrappedNormalMixture>(&spec)) {
    check_weights(mix->weights, mix->components.size(), "wrapped normal mixture");
    int k = static_cast<int>(mix->components.size());
    Vec logs(k);
    Mat scores(x.x.size(), k);
    for (int i = 0; i < k; ++i) {
      logs[i] = std::log(mix->weights[i]) + wrapped_normal_logpdf(mix->components[i], x);
      scores.col(i) = wrapped_normal_score(mix->components[i], x);
    }
    double lse = logsumexp(logs);
    Vec g = Vec::Zero(x.x.size());
    for (int i = 0; i < k; ++i) g += std::exp(logs[i] - lse) * scores.col(i);
    return g;
  }
  if (const auto* pg = std::get_if<ProjectedGaussianMixture>(&spec)) {
    check_weights(pg->weights, pg->tangent_means.size(), "projected gaussian mixture");
    const Manifold& m = pg->manifold;
    ManifoldPoint o = manifold_origin(m);
    TangentVector v = log_map(o, x);
    Mat f0_low = lowered_columns(m, origin_frame(m));
    Vec c = f0_low.transpose() * v.v;
    int k = static_cast<int>(pg->tangent_means.size());
    Vec logs(k);
    for (int i = 0; i < k; ++i)
      logs[i] = std::log(pg->weights[i]) + gaussian_logpdf(c - pg->tangent_means[i], pg->covs[i]);
    double lse = logsumexp(logs);
    Vec sc = Vec::Zero(m.dim);
    for (int i = 0; i < k; ++i)
      sc += std::exp(logs[i] - lse) * gaussian_score(c - pg->tangent_means[i], pg->covs[i]);
    Vec du = f0_low * sc - logdet_exp_pullback(m, v);
    return log_map_jacobian(o, x).transpose() * du;
  }
  throw ArgumentError("target_logpdf_gradient: density is piecewise constant");
}

Eigen::Vector2d spherical_coords(const ManifoldPoint& z) {
  if (z.manifold.kind != ManifoldKind::Sphere || z.manifold.dim != 2)
    throw ArgumentError("spherical_coords: needs S^2");
  double phi = std::atan2(z.x[1], z.x[0]);
  if (phi < 0.0) phi += 2.0 * M_PI;
  double theta = std::acos(clamp_unit(z.x[2]));
  return {phi, theta};
}

ManifoldPoint from_spherical(double phi, double theta) {
  double s = std::sin(theta);
  Vec z(3);
  z << s * std::cos(phi), s * std::sin(phi), std::cos(theta);
  return ManifoldPoint{Manifold::sphere(2), z};
}

namespace {

ManifoldPoint h2_point_from_tangent(double a, double b) {
  const Manifold m = Manifold::hyperboloid(2);
  ManifoldPoint o = manifold_origin(m);
  Vec v(3);
  v << 0.0, a, b;
  return exp_map(TangentVector{o, v});
}

}  // namespace

DensitySpec named_target(const std::string& name) {
  const Manifold h2 = Manifold::hyperboloid(2);
  const Manifold s2 = Manifold::sphere(2);
  if (name == "c1-row1")
    return wrapped_normal(h2_point_from_tangent(-1.0, 1.0), 0.75 * Mat::Identity(2, 2));
  if (name == "c1-row2") {
    ProjectedGaussianMixture pg;
    pg.manifold = h2;
    double m5[5][2] = {{3, 0}, {-3, 0}, {0, 3}, {0, -3}, {0, 0}};
    for (auto& mk : m5) {
      Vec mu(2);
      mu << mk[0], mk[1];
      pg.tangent_means.push_back(mu);
      pg.covs.push_back(0.5 * Mat::Identity(2, 2));
      pg.weights.push_back(0.2);
    }
    return pg;
  }
  if (name == "c1-row3") {
    TangentCheckerboard cb;
    cb.manifold = h2;
    cb.anchor = Eigen::Vector2d::Zero();
    cb.side = 1.5;
    cb.half_extent = 6.0;
    return cb;
  }
  if (name == "c1-row4") {
    double s = 1.3, s1 = 0.3, s2v = 1.5;
    Mat c12(2, 2), c21(2, 2);
    c12 << s1, 0, 0, s2v;
    c21 << s2v, 0, 0, s1;
    WrappedNormalMixture mix;
    mix.components.push_back(wrapped_normal(h2_point_from_tangent(s, s), c12));
    mix.components.push_back(wrapped_normal(h2_point_from_tangent(-s, -s), c12));
    mix.components.push_back(wrapped_normal(h2_point_from_tangent(-s, s), c21));
    mix.components.push_back(wrapped_normal(h2_point_from_tangent(s, -s), c21));
    mix.weights = {0.25, 0.25, 0.25, 0.25};
    return mix;
  }
  if (name == "c1-sph1") {
    Vec mu(3);
    mu << -1, -1, -1;
    return wrapped_normal(checked_point(s2, mu / std::sqrt(3.0)), 0.3 * Mat::Identity(2, 2));
  }
  if (name == "c1-sph2") {
    double signs[4][3] = {{1, 1, 1}, {-1, -1, -1}, {-1, -1, 1}, {1, 1, -1}};
    WrappedNormalMixture mix;
    for (auto& sg : signs) {
      Vec mu(3);
      mu << sg[0], sg[1], sg[2];
      mix.components.push_back(
          wrapped_normal(checked_point(s2, mu / std::sqrt(3.0)), 0.3 * Mat::Identity(2, 2)));
      mix.weights.push_back(0.25);
    }
    return mix;
  }
  if (name == "c1-sph3") {
    SphericalCheckerboard cb;
    cb.anchor = Eigen::Vector2d(M_PI, M_PI / 2.0);
    cb.side_phi = M_PI / 2.0 - 0.2;
    cb.side_theta = M_PI / 4.0 - 0.1;
    return cb;
  }
  if (name == "appd-antipodal") {
    Vec mu(3);
    mu << 1, 0, 0;
    return VmfSpec{checked_point(s2, mu), 30.0};
  }
  throw ArgumentError("named_target: unknown target '" + name + "'");
}

std::vector<std::string> target_names() {
  return {"c1-row1", "c1-row2", "c1-row3", "c1-row4",
          "c1-sph1", "c1-sph2", "c1-sph3", "appd-antipodal"};
}

DensitySpec default_base(const Manifold& m) {
  if (m.kind == ManifoldKind::Hyperboloid)
    return wrapped_normal(manifold_origin(m), Mat::Identity(m.dim, m.dim));
  return VmfSpec{manifold_origin(m), 1.0};
}

}  // namespace mflow
