#pragma once

#include <string>
#include <variant>
#include <vector>

#include "mflow/common.hpp"
#include "mflow/geometry.hpp"

namespace mflow {

// Wrapped normal G(mu, Sigma): a Gaussian in the tangent space at the fixed
// origin, parallel transported to mu and pushed through exp_mu.  Sigma is
// expressed in the orthonormal frame at the origin.
struct WrappedNormalSpec {
  ManifoldPoint mean;
  Mat cov;
  ManifoldPoint origin;
};

WrappedNormalSpec wrapped_normal(ManifoldPoint mean, Mat cov);

// von Mises-Fisher on a sphere
struct VmfSpec {
  ManifoldPoint mean_direction;
  double concentration = 0.0;
};

struct WrappedNormalMixture {
  std::vector<double> weights;
  std::vector<WrappedNormalSpec> components;
};

// Euclidean Gaussian mixture living in the tangent space at the origin,
// pushed to the manifold by exp.  Means are frame coordinates.
struct ProjectedGaussianMixture {
  Manifold manifold;
  std::vector<double> weights;
  std::vector<Vec> tangent_means;
  std::vector<Mat> covs;
};

// Uniform checkerboard in the tangent plane at the origin, pushed through
// exp.  The cell with its lower-left corner at `anchor` is live; live cells
// alternate both ways and are clipped to the box [-half_extent, half_extent)^2
// in frame coordinates.
struct TangentCheckerboard {
  Manifold manifold;
  Eigen::Vector2d anchor = Eigen::Vector2d::Zero();
  double side = 1.5;
  double half_extent = 6.0;
};

// Checkerboard over spherical coordinates (phi, theta) in [0,2pi] x [0,pi],
// uniform per unit surface area on the live cells.  The cell with lower-left
// corner at `anchor` is live.
struct SphericalCheckerboard {
  Eigen::Vector2d anchor = Eigen::Vector2d::Zero();
  double side_phi = 1.0;
  double side_theta = 1.0;
};

using DensitySpec = std::variant<WrappedNormalSpec, VmfSpec, WrappedNormalMixture,
                                 ProjectedGaussianMixture, TangentCheckerboard,
                                 SphericalCheckerboard>;

Manifold density_manifold(const DensitySpec& spec);

// every family here carries an exact normalization constant, including the
// checkerboards; the flag is part of the interface contract
bool density_is_normalized(const DensitySpec& spec);

ManifoldPoint wrapped_normal_sample(const WrappedNormalSpec& spec, Rng& rng);
double wrapped_normal_logpdf(const WrappedNormalSpec& spec, const ManifoldPoint& x);

ManifoldPoint vmf_sample(const VmfSpec& spec, Rng& rng);
double vmf_logpdf(const VmfSpec& spec, const ManifoldPoint& z);

ManifoldPoint target_sample(const DensitySpec& spec, Rng& rng);
double target_logpdf(const DensitySpec& spec, const ManifoldPoint& x);

// Ambient-coordinate gradient of target_logpdf at x; pair it with tangent
// perturbations (the normal component is representation-dependent).
// Checkerboards are piecewise constant and throw.
Vec target_logpdf_gradient(const DensitySpec& spec, const ManifoldPoint& x);

// azimuth phi in [0, 2pi), polar angle theta in [0, pi] measured from +e3
Eigen::Vector2d spherical_coords(const ManifoldPoint& z);
ManifoldPoint from_spherical(double phi, double theta);

// named densities used by the experiments and the CLI
DensitySpec named_target(const std::string& name);
std::vector<std::string> target_names();

// default base distribution per manifold: wrapped standard normal at the
// origin of H^n, vMF(origin, 1) on S^n
DensitySpec default_base(const Manifold& m);

}  // namespace mflow
