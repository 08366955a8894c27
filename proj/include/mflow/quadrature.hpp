#pragma once

#include <functional>

#include "mflow/common.hpp"
#include "mflow/geometry.hpp"

namespace mflow {

struct QuadratureNodes {
  Vec points;
  Vec weights;
};

// Gauss-Legendre nodes and weights on [a, b]
QuadratureNodes gauss_legendre_nodes(int n, double a, double b);

// Integral of f over the geodesic ball of the given radius about the origin
// of H^2, in geodesic polar coordinates (area element sinh(r) dr dphi).
// Gauss-Legendre radially, trapezoid over the periodic angle.
double integrate_hyperboloid_ball(const std::function<double(const ManifoldPoint&)>& f,
                                  double radius, int n_radial, int n_angular);

// Integral of f over the whole unit sphere S^2, Gauss-Legendre in cos(theta)
// and trapezoid over the periodic azimuth.
double integrate_sphere_surface(const std::function<double(const ManifoldPoint&)>& f,
                                int n_polar, int n_azimuth);

}  // namespace mflow
