#pragma once

#include <Eigen/Dense>
#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nlms/errors.hpp"

namespace nlms {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

enum class MetricKind { Flat, ConformalBump, CustomGrid };

struct MetricJet {
  Mat2 g;
  std::array<Mat2, 2> dg;  // dg[k] = d g / d x_k
};

// Metric g0 on the unit disk. Presets are defined on all of R^2 so geodesics
// and tubes may be continued slightly past the boundary; metric_at() is the
// domain-checked accessor.
class TransversalManifold {
 public:
  static TransversalManifold flat();
  static TransversalManifold conformal_bump(double beta = 0.1, double sigma = 0.5);
  // values[j * xs.size() + i] is the tensor at (xs[i], ys[j]).
  static TransversalManifold custom_grid(std::vector<double> xs, std::vector<double> ys,
                                         std::vector<Mat2> values);
  static TransversalManifold load_grid_csv(const std::string& path);

  MetricKind kind() const { return kind_; }
  double beta() const { return beta_; }
  double sigma() const { return sigma_; }

  MetricJet jet(const Vec2& x) const;
  Mat2 metric(const Vec2& x) const { return jet(x).g; }
  // gamma[k](i, j) = Christoffel symbol Gamma^k_ij.
  std::array<Mat2, 2> christoffel(const Vec2& x) const;
  double gaussian_curvature(const Vec2& x) const;
  // Finite-difference curvature from Christoffel symbols; used for grid metrics
  // and as a cross-check of the closed form.
  double gaussian_curvature_fd(const Vec2& x, double h = 1e-4) const;

  static bool inside(const Vec2& x, double tol = 0.0) { return x.squaredNorm() <= (1.0 + tol) * (1.0 + tol); }
  // g0-unit outward normal vector at a boundary point.
  Vec2 outward_normal(const Vec2& x) const;
  double speed(const Vec2& x, const Vec2& v) const { return std::sqrt(v.dot(metric(x) * v)); }

 private:
  struct Grid {
    std::vector<double> xs, ys;
    std::vector<Mat2> values;
  };
  MetricJet grid_jet(const Vec2& x) const;

  MetricKind kind_ = MetricKind::Flat;
  double beta_ = 0.0;
  double sigma_ = 1.0;
  std::shared_ptr<const Grid> grid_;
};

Mat2 metric_at(const TransversalManifold& m, const Vec2& x);

struct ProductManifold {
  double x1_min = -1.0;
  double x1_max = 1.0;
  TransversalManifold transversal = TransversalManifold::flat();
  std::function<double(const Vec3&)> conformal_c;  // empty means c = 1

  static constexpr int dim_n = 3;
  bool unit_conformal() const { return !conformal_c; }
  double c(const Vec3& x) const { return conformal_c ? conformal_c(x) : 1.0; }
  Mat3 metric(const Vec3& x) const;
};

enum class ExitKind { Nontangential, Tangential, Interior };

struct GeodesicSample {
  double t;
  Vec2 x;
  Vec2 v;
  Vec2 e;  // parallel unit normal
};

struct Geodesic {
  TransversalManifold manifold;
  std::vector<GeodesicSample> samples;  // strictly increasing t
  double dt = 1e-3;
  double S1 = 0.0;
  double S2 = 0.0;
  std::array<ExitKind, 2> exit_flags{ExitKind::Interior, ExitKind::Interior};
  std::array<double, 2> exit_dot{0.0, 0.0};  // <gamma', n> at -S1 and S2

  double t_min() const { return samples.front().t; }
  double t_max() const { return samples.back().t; }
  // Cubic Hermite interpolation of position, velocity and frame.
  GeodesicSample at(double t) const;
  Geodesic reversed() const;
};

constexpr double kTangencyTol = 1e-3;

Geodesic shoot_geodesic(const TransversalManifold& m, const Vec2& y0, const Vec2& w,
                        double dt = 1e-3, double max_length = 50.0);
// Continue a geodesic past its exits by `margin` in arclength on each side.
Geodesic extend_geodesic(const Geodesic& g, double margin);
bool is_nontangential(const Geodesic& g);

struct IntersectionSet {
  std::vector<Vec2> points;
  std::vector<std::vector<double>> times_eta;    // times along the second argument
  std::vector<std::vector<double>> times_gamma;  // times along the first argument
  std::vector<Vec2> boundary_warnings;
  double tol = 0.0;
};

IntersectionSet find_intersections(const Geodesic& gamma, const Geodesic& eta, double tol);
// Self-crossings; branches closer than min_separation in arclength are ignored.
IntersectionSet find_self_intersections(const Geodesic& g, double tol, double min_separation = 0.5);

struct FermiPoint {
  double t;
  double y;
};

// Fermi coordinates x = exp_{gamma(t)}(y E(t)) around an extended geodesic.
class FermiChart {
 public:
  explicit FermiChart(const Geodesic& g, double margin = 0.5, double radius_cap = 2.0);

  const Geodesic& geodesic() const { return geo_; }
  double tube_radius() const { return rho_; }
  double t_lo() const { return geo_.t_min(); }
  double t_hi() const { return geo_.t_max(); }
  bool flat() const { return geo_.manifold.kind() == MetricKind::Flat; }

  Vec2 to_point(double t, double y) const;
  // Columns: dX/dt, dX/dy.
  Mat2 jacobian(double t, double y) const;
  // Point plus metric coefficient f = |dX/dt|_g and its y-derivative.
  struct NormalSample {
    Vec2 x;
    double f;
    double f_y;
  };
  // Samples along the normal geodesic at offsets k * dy, k = -ny..ny.
  std::vector<NormalSample> normal_line(double t, double dy, int ny) const;
  // All branches within the tube; throws OutOfTubeError if none.
  std::vector<FermiPoint> from_point(const Vec2& x) const;

 private:
  void build_seed_grid();
  Geodesic geo_;
  double rho_ = 0.0;
  double seed_h_ = 0.02;
  std::vector<FermiPoint> seeds_;
  std::vector<Vec2> seed_x_;
  std::vector<std::vector<int>> buckets_;
  double bucket_h_ = 0.1;
  int bucket_n_ = 0;
  double bucket_lo_ = -3.0;
};

std::vector<FermiPoint> fermi_coordinates(const Geodesic& g, const Vec2& x);

struct JacobiField {
  std::vector<double> t;
  std::vector<double> tangential;
  std::vector<double> normal;
  std::vector<double> normal_dot;
  std::vector<double> conjugate_times;  // zeros of the normal component after t0
};

// Initial data at t0 in the parallel frame (tangential, normal) components.
JacobiField jacobi_field(const Geodesic& g, const Vec2& j0, const Vec2& jdot0, double t0 = 0.0);

constexpr double kEpsMax = 0.2;
// g-unit perturbation of v1 toward its g-normal; at n = 3 one vector.
std::vector<Vec2> perturbed_directions(const Vec2& v1, double eps, const Mat2& g = Mat2::Identity(),
                                       double eps_max = kEpsMax);

enum class BoundaryFace { Lateral, CapMinus, CapPlus };

// Chart (x'_1, x'_2, x_n) centred at a boundary point with x_n the distance
// to the boundary. Lateral face: x' = (x1 - x1_0, arclength along the circle).
// Caps: x' = normal coordinates of g0 at the foot point.
class BoundaryChart {
 public:
  BoundaryChart(const ProductManifold& m, const Vec3& x0, double corner_margin_fraction = 0.1);
  BoundaryFace face() const { return face_; }
  const Vec3& origin() const { return x0_; }
  Vec3 to_point(const Vec3& xc) const;
  Mat3 jacobian(const Vec3& xc) const;
  // Chart-coordinate metric J^T g J.
  Mat3 metric(const Vec3& xc) const;

 private:
  Vec2 lateral_foot(double sigma, Vec2* inward) const;
  ProductManifold m_;
  Vec3 x0_;
  BoundaryFace face_;
  double theta0_ = 0.0;
  Mat2 cap_frame_;
};

}  // namespace nlms
