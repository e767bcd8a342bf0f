#pragma once

#include <array>
#include <functional>
#include <iosfwd>
#include <memory>
#include <vector>

#include "nlms/discretization.hpp"

namespace nlms {

using ScalarField = std::function<double(const Vec3&)>;
using Vec2c = Eigen::Vector2cd;

// c = 1 + eps * smooth_bump(x, center, width).
ScalarField conformal_bump_factor(double eps, const Vec3& center, double width);

// q = -c^{5/4} Delta_g(c^{-1/4}) for n = 3, by nested central differences of
// the flux sqrt|g| g^{ij} d_j. Identically zero when c = 1.
ScalarField conformal_weight(const ProductManifold& M, double h = 1e-3);
RVec sample_field(const Mesh& mesh, const ScalarField& f);

// Degree of the y-polynomials carried along the geodesic: the phase uses
// y^2..y^5, the leading amplitude y^0..y^3 and the corrector y^0..y^1.
constexpr int kPhaseDegree = 5;
constexpr int kAmplitudeDegree = 3;
constexpr int kCorrectorDegree = 1;

struct BeamParams {
  double alpha = 1.0;
  double lambda = 0.0;        // tau = s + i lambda
  double delta_prime = 0.0;   // cutoff width; 0 picks min(2 * tube radius, 4)
  int order = 0;              // N in {0, 1}
  double track_step = 2.5e-3; // node spacing of the t-tracks
};

// Gaussian beam along a non-tangential geodesic in Fermi coordinates (t, y),
// g0 = f^2 dt^2 + dy^2:
//   v = s^{1/8} e^{i k phi} (a0 + a1 / k) chi(y / delta'),  k = alpha (s + i lambda),
//   phi = t + sum_{j=2..5} p_j(t) y^j.
// p_2 = H / 2 solves H' + H^2 + K = 0 with H(-S1) = i; higher p_j kill the
// eikonal defect |dphi|^2 - 1 order by order in y. a0 solves the transport
// equation to O(y^4) with a0(-S1) = 1, the corrector a1 (N = 1) removes the
// O(1) remainder -Delta a0 + q a0 to O(y^2) with a1(-S1) = 0.
class GaussianBeam {
 public:
  GaussianBeam(const Geodesic& g, const ProductManifold& M, const BeamParams& p = {});

  const BeamParams& params() const { return params_; }
  // Same tracks with another carrier (alpha, lambda).
  GaussianBeam with_carrier(double alpha, double lambda) const;
  const FermiChart& chart() const { return *chart_; }
  const ProductManifold& manifold() const { return manifold_; }
  const Geodesic& geodesic() const { return chart_->geodesic(); }
  double delta_prime() const { return params_.delta_prime; }
  double t_start() const;  // -S1

  cplx H(double t) const;
  cplx a00(double t) const;
  cplx corrector00(double t) const;
  // min over the track nodes of Im H.
  double min_imag_H() const;
  cplx k(double s) const { return params_.alpha * cplx(s, params_.lambda); }

  double cutoff(double y) const;
  // Local quasimode at Fermi point (t, y) and its (d/dt, d/dy) derivatives.
  struct Local {
    cplx v;
    Vec2c dv;
    cplx phi;
    Vec2c dphi;
  };
  Local local(double t, double y, double s) const;

  struct Value {
    cplx v = 0.0;
    Vec2c grad = Vec2c::Zero();  // Euclidean partials d/dx'_1, d/dx'_2
    int branches = 0;
  };
  // Sum over Fermi branches of the tube containing x'; zero outside the tube.
  Value evaluate(const Vec2& x, double s) const;
  CVec sample(const Mesh& mesh, double s, Exec ex = Exec::Parallel) const;

  // Phase and its g0-gradient on every branch through x'.
  struct PhaseSample {
    double t, y;
    cplx phi;
    Vec2c grad;
  };
  std::vector<PhaseSample> phase_at(const Vec2& x) const;

  // Track state at t: phase jets p_2..p_5, amplitude jets, corrector jets.
  struct Jets {
    std::array<cplx, kPhaseDegree + 1> p{};
    std::array<cplx, kAmplitudeDegree + 1> a{};
    std::array<cplx, kCorrectorDegree + 1> b{};
  };
  // Value, first and second t-derivatives of the jets.
  std::array<Jets, 3> jets(double t) const;

  struct Tracks;

 private:
  GaussianBeam() = default;
  BeamParams params_;
  ProductManifold manifold_;
  std::shared_ptr<const FermiChart> chart_;
  std::shared_ptr<const Tracks> tracks_;
};

struct ResidualOptions {
  double dt = 0.01;
  double dy = 0.01;
  int x1_nodes = 8;  // Gauss-Legendre nodes when q depends on x1
};

struct ResidualReport {
  double s = 0.0;
  double residual = 0.0;  // L2(I x M0) norm of e^{-k x1}(-Delta + q) e^{k x1} v
  double v_l2 = 0.0;
  double v_l4 = 0.0;
  int grid_points = 0;
};

// Evaluated in Fermi coordinates with the exact metric factor f(t, y) over the
// part of the tube inside the disk. Refuses s when the grid does not resolve
// the wavelength 2 pi / (alpha s) by 10 points.
ResidualReport beam_residual(const GaussianBeam& b, double s, const ResidualOptions& opt = {});

struct ResidualSweep {
  std::vector<ResidualReport> reports;
  double slope = 0.0;  // least-squares slope of log residual against log s
};
ResidualSweep residual_sweep(const GaussianBeam& b, const std::vector<double>& s_list,
                             const ResidualOptions& opt = {});
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// Fraction of the L2 mass of v with |y| > width.
double tube_mass_fraction(const GaussianBeam& b, double s, double width, const ResidualOptions& opt = {});

// Harmonic function u = e^{sigma k x1} c^{-1/4} (v + r) from one discrete
// Dirichlet solve: u is the discrete harmonic extension of the trace of the
// quasimode, r the resulting remainder.
struct CGOHarmonic {
  int sign = 1;
  cplx k;
  double s = 0.0;
  CVec u;
  CVec quasimode;  // e^{sigma k x1} c^{-1/4} v at vertices
  CVec v;
  CVec r;
  double remainder_rel = 0.0;  // |r|_L2 / |v|_L2
  double harmonic_residual = 0.0;  // |K_ii u_I + K_ib u_B|_inf relative to |K| |u|
};
CGOHarmonic build_cgo(const FEOperator& op, const GaussianBeam& b, int sign, double s);

// Four fields of the quadruple
//   u1 = e^{(s + i mu) x1} c^{-1/4} v,   u2 = conj(e^{-(s + i mu) x1} c^{-1/4} v),
//   u3 = e^{-L(s + i lambda) x1} c^{-1/4} w,  u4 = conj(e^{L(s + i lambda) x1} c^{-1/4} w),
// with v on eta (alpha = 1, tau = s + i mu) and w on gamma (alpha = L,
// tau = s + i lambda). Oracle mode: remainders are dropped.
struct QuadrupleSpec {
  std::shared_ptr<const GaussianBeam> v;
  std::shared_ptr<const GaussianBeam> w;
  ProductManifold manifold;
  double s = 8.0;
  double mu = 0.0;
  double lambda = 0.0;
  double L = 1.0;
};
QuadrupleSpec make_quadruple(const Geodesic& eta, const Geodesic& gamma, const ProductManifold& M, double s,
                             double mu, double lambda, double L, const BeamParams& base = {});

struct QuadruplePoint {
  std::array<cplx, 4> u;
  // Transversal parts without x1 carriers: v, w and their gradients.
  GaussianBeam::Value v, w;
};
QuadruplePoint quadruple_at(const QuadrupleSpec& q, const Vec3& x);

struct QuadrupleReport {
  double l1 = 0.0;              // discrete L1(M) norm of u1 u2 u3 u4
  double carrier_deviation = 0.0;  // max | |x1 carrier product| - 1 | over the grid
  int grid_points = 0;
};
QuadrupleReport quadruple_l1(const QuadrupleSpec& q, double h = 0.02, int x1_nodes = 16);

// Quadruple with remainders on a mesh (resolution permitting).
std::array<CGOHarmonic, 4> quadruple_cgo(const FEOperator& op, const QuadrupleSpec& q);

void write_beam_csv(std::ostream& out, const GaussianBeam& b, int samples = 201);

}  // namespace nlms
