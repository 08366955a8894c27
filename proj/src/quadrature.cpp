#include "mflow/quadrature.hpp"

#include <cmath>

namespace mflow {

QuadratureNodes gauss_legendre_nodes(int n, double a, double b) {
  if (n < 1) throw ArgumentError("gauss_legendre_nodes: need at least one node");
  Vec x(n), w(n);
  // Newton on P_n with the three-term recurrence, Chebyshev initial guesses
  for (int i = 0; i < n; ++i) {
    double t = std::cos(M_PI * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = t;
      for (int k = 2; k <= n; ++k) {
        double p2 = ((2 * k - 1) * t * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (t * p1 - p0) / (t * t - 1.0);
      double step = p1 / dp;
      t -= step;
      if (std::abs(step) < 1e-15) break;
    }
    x[i] = t;
    w[i] = 2.0 / ((1.0 - t * t) * dp * dp);
  }
  QuadratureNodes out;
  out.points = 0.5 * (b - a) * x.array() + 0.5 * (a + b);
  out.weights = 0.5 * (b - a) * w;
  return out;
}

double integrate_hyperboloid_ball(const std::function<double(const ManifoldPoint&)>& f,
                                  double radius, int n_radial, int n_angular) {
  if (radius <= 0.0) throw ArgumentError("integrate_hyperboloid_ball: radius must be positive");
  if (n_angular < 1) throw ArgumentError("integrate_hyperboloid_ball: need angular nodes");
  const Manifold m = Manifold::hyperboloid(2);
  ManifoldPoint o = manifold_origin(m);
  QuadratureNodes gl = gauss_legendre_nodes(n_radial, 0.0, radius);
  double dphi = 2.0 * M_PI / n_angular;
  double total = 0.0;
  for (int i = 0; i < gl.points.size(); ++i) {
    double r = gl.points[i];
    double ring = 0.0;
    for (int j = 0; j < n_angular; ++j) {
      double phi = dphi * j;
      Vec v(3);
      v << 0.0, r * std::cos(phi), r * std::sin(phi);
      ring += f(exp_map(TangentVector{o, v}));
    }
    total += gl.weights[i] * std::sinh(r) * ring * dphi;
  }
  return total;
}

double integrate_sphere_surface(const std::function<double(const ManifoldPoint&)>& f,
                                int n_polar, int n_azimuth) {
  if (n_azimuth < 1) throw ArgumentError("integrate_sphere_surface: need azimuth nodes");
  const Manifold m = Manifold::sphere(2);
  QuadratureNodes gl = gauss_legendre_nodes(n_polar, -1.0, 1.0);
  double dphi = 2.0 * M_PI / n_azimuth;
  double total = 0.0;
  for (int i = 0; i < gl.points.size(); ++i) {
    double u = gl.points[i];  // cos(theta)
    double s = std::sqrt(std::max(0.0, 1.0 - u * u));
    double ring = 0.0;
    for (int j = 0; j < n_azimuth; ++j) {
      double phi = dphi * j;
      Vec z(3);
      z << s * std::cos(phi), s * std::sin(phi), u;
      ring += f(ManifoldPoint{m, z});
    }
    total += gl.weights[i] * ring * dphi;
  }
  return total;
}

}  // namespace mflow
