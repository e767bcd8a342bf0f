#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "nlms/quasimodes.hpp"

namespace nlms {

using ComplexField = std::function<cplx(const Vec3&)>;
using OneFormField = std::function<Eigen::Vector3cd(const Vec3&)>;

// One-term Richardson extrapolation on a geometric sweep x_k = x_0 r^k:
// values(x) = limit + c x^{-p} (s sweeps, r > 1) or limit + c x^{p} (lambda
// sweeps, r < 1). p is estimated from the last three values when they contract
// monotonically and clamped to [p_min, p_max]; otherwise p_default is used.
struct Extrapolation {
  cplx limit = 0.0;
  double exponent = 0.0;
  bool exponent_fitted = false;
  bool monotone = false;            // |differences| shrink along the sweep
  std::vector<double> residuals;    // |value_k - limit|
};
Extrapolation richardson(const std::vector<double>& x, const std::vector<cplx>& values, double p_default,
                         double p_min = 0.25, double p_max = 4.0);

// Laplace-method limit s^{n/2} int e^{-s Psi} a dz -> 2 pi / sqrt(det Psi''(0)) a(0), n = 2.
struct StationaryPhaseOptions {
  double radius = 3.0;   // square chart [-radius, radius]^2
  int points = 1201;     // grid points per side (odd, so z = 0 is a node)
  double resolution = 0.25;  // refuse when h sqrt(s lambda_max(Psi'')) exceeds this
  Exec exec = Exec::Parallel;
};
struct StationaryPhaseReport {
  std::vector<double> s;
  std::vector<double> values;
  double limit = 0.0;
  double closed_form = 0.0;
  double relative_error = 0.0;
  double exponent = 0.0;  // fitted correction exponent
  Mat2 hessian;
  Extrapolation extrapolation;
};
StationaryPhaseReport rough_stationary_phase(const std::function<double(const Vec2&)>& psi,
                                             const std::function<double(const Vec2&)>& a,
                                             const std::vector<double>& s_list,
                                             const StationaryPhaseOptions& opt = {});

// Boundary packets v0 = eta(x / l^alpha) e^{(i / l)(tau'.x' + i x_n)} in the
// boundary-normal chart at x0, with eta(y) = eta'(y') theta(y_n), int eta'^2 = 1
// and theta = 1 on [0, 1/2]. Integrals are taken in the scaled variables
// y' = x' / l^alpha, y_n = x_n / l by tensor Gauss-Legendre rules.
struct PacketOptions {
  double alpha = 0.4;
  std::vector<double> lambdas = {0.2, 0.1, 0.05, 0.025, 0.0125};
  int tangential_nodes = 32;  // per tangential direction
  int normal_nodes = 64;
  double chart_extent = 0.9;  // largest x_n and |x'| the chart may be asked for
};

struct ScalarTraceReport {
  Vec3 x0;
  double alpha = 0.0;
  std::vector<double> lambdas;
  std::vector<cplx> bilinear;     // B(v0, conj v0) = int V |v0|^2 dV_g
  std::vector<cplx> scaled;       // l^{-alpha(n-1)-1} B
  std::vector<double> mass;       // l^{-alpha(n-1)-1} int |v0|^2 dV_g   -> 1/2
  std::vector<double> moment;     // l^{-alpha(n-1)-2} int x_n |v0|^2 dV_g -> 1/4
  cplx value = 0.0;               // V(x0)
  cplx d_xn = 0.0;                // dV/dx_n(x0), x_n the inward distance
  cplx d_nu = 0.0;                // outward normal derivative = -d_xn
  double fit_residual = 0.0;      // relative
  double condition = 0.0;
  bool low_confidence = false;
};
// Direct oracle: B(u1, u2) = int V u1 u2 dV_g with V given pointwise.
// The sweep is fitted jointly as
//   scaled(l) = V(x0) mass(l) + dV/dx_n(x0) l moment(l) + c l^{2 alpha} mass(l),
// whose limits reproduce V(x0) = 2 lim scaled and dV/dx_n = 4 lim l^{-1}(...)
// when V vanishes on the boundary.
ScalarTraceReport boundary_trace_scalar(const ProductManifold& M, const ComplexField& V, const Vec3& x0,
                                        const PacketOptions& opt = {});

struct OneFormTraceReport {
  Vec3 x0;
  double alpha = 0.0;
  std::vector<double> lambdas;
  std::vector<Vec2> directions;                 // tau' in the tangential chart coordinates
  std::vector<std::vector<cplx>> scaled;        // [direction][lambda] l^{-alpha(n-1)} B1
  Eigen::Vector3cd value = Eigen::Vector3cd::Zero();  // chart components (x'_1, x'_2, x_n) of A(x0)
  Eigen::Vector3cd d_xn = Eigen::Vector3cd::Zero();   // chart components of d A / d x_n (x0)
  double fit_residual = 0.0;
  double condition = 0.0;
  std::string warning;
};
// Direct oracle: B1(u1, u2) = int <A, du1>_g u2 dV_g with A given pointwise in
// the product coordinates (x1, x'_1, x'_2). Packets along +-tau'_1 and
// +-tau'_2 are fitted jointly as
//   scaled(l, tau') = sum_k A_k(x0) P_k(l, tau') + l sum_k dA_k/dx_n(x0) Q_k(l, tau')
// with P, Q the same functional for A = e_k and A = x_n e_k; P -> (i/2)(tau', i)
// and Q -> (i/4)(tau', i).
OneFormTraceReport boundary_trace_oneform(const ProductManifold& M, const OneFormField& A, const Vec3& x0,
                                          const PacketOptions& opt = {});

// L = smallest integer >= 3 / alpha_sep (2 when no intersection has two passes
// of gamma) for which the values L (tau_m - t_k) + t_k are pairwise distinct
// across (r, k, m) by `margin`.
double choose_L(const Geodesic& gamma, const Geodesic& eta, const IntersectionSet& X, double margin = 1e-6);
double choose_L_times(const std::vector<std::vector<double>>& times_eta,
                      const std::vector<std::vector<double>>& times_gamma, double alpha_sep,
                      double margin = 1e-6);

struct MomentOptions {
  // The x1-Fourier carriers tilt the Gaussian by O(|xi| / s), so the sweep
  // starts where that shift is small against the width of the bump presets.
  std::vector<double> s_list = {64.0, 128.0, 256.0};
  double h = 0.01;           // transversal grid spacing
  int x1_nodes = 64;         // Gauss-Legendre nodes of the x1 Fourier reduction
  double resolution = 0.25;  // refuse when h exceeds this fraction of the Gaussian width
  Vec2 phase_shift = Vec2::Zero();  // extra factor e^{i s <zeta, x' - p>}; nonzero gives an off-diagonal surrogate
  BeamParams beam;           // order and cutoff of both beams
  Exec exec = Exec::Parallel;
};

// Quadrature of the concentrated identity on M0 for one (eta, gamma) pair:
//   F(s) = int_{M0} (2i mu - L(s + i lambda)) A1^ |v|^2 |w|^2 + <A'^, d(|v|^2 w) conj w>_{g0},
// with A^(xi, x') the x1-Fourier transform at xi = 2(L lambda - mu), v the beam
// on eta (alpha = 1, carrier mu) and w the beam on gamma (alpha = L, carrier
// lambda). Normalized as D(s) = F s^{-1/2} / (L C_p), D -> -A1^ + i A'^(gamma').
struct DirectionalMoment {
  Vec2 p;
  Vec2 direction;  // gamma' at p, Euclidean components
  double t_eta = 0.0, t_gamma = 0.0;
  double lambda = 0.0, mu = 0.0, L = 0.0, xi = 0.0;
  double normalization = 0.0;  // C_p = 2 pi / sqrt(det Psi'') e^{-2 mu t - 2 L lambda tau} |a00|^2 |c00|^2
  std::vector<double> s;
  std::vector<cplx> raw;     // F(s)
  std::vector<cplx> values;  // D(s)
  cplx limit = 0.0;
  Extrapolation extrapolation;
};

// One moment per (lambda, mu) pair and per intersection point; beams are
// evaluated once per s and the carriers enter through e^{-mu phi}, exact for
// order-0 beams.
std::vector<std::vector<DirectionalMoment>> moment_sweep(const OneFormField& A, const ProductManifold& M,
                                                         const Geodesic& gamma, const Geodesic& eta, double L,
                                                         const std::vector<std::pair<double, double>>& lambda_mu,
                                                         const MomentOptions& opt = {});
std::vector<DirectionalMoment> directional_moment(const OneFormField& A, const ProductManifold& M,
                                                  const Geodesic& gamma, const Geodesic& eta, double lambda,
                                                  double mu, double L, const MomentOptions& opt = {});

// Throws ParameterError when A or its normal derivative does not vanish on the boundary.
void check_zero_boundary_jet(const OneFormField& A, const ProductManifold& M, double tol = 1e-8);

// Moment limits at one point over a xi-grid and a set of directions:
// D(xi, d) = -A1^(xi) + i <A'^(xi), d>.
struct MomentSet {
  Vec2 p;
  std::vector<double> xi;
  std::vector<Vec2> directions;
  Eigen::MatrixXcd D;  // rows xi, columns directions
};

struct CovectorRecovery {
  Vec3 A = Vec3::Zero();                     // real parts of (A1, A'_1, A'_2)(x1, p)
  Eigen::Vector3cd complex_value = Eigen::Vector3cd::Zero();
  std::vector<Eigen::Vector3cd> A_hat;       // per xi
  double condition = 0.0;
  double residual = 0.0;                     // max relative least-squares residual over xi
};
// Least squares for (A1^, A'^) from D(xi, .) at every xi (ConditioningError
// when the direction system is rank deficient), then trapezoid inverse
// Fourier synthesis in x1.
CovectorRecovery recover_A_point(const MomentSet& m, double x1);
Eigen::Vector3cd solve_pairing(const std::vector<Vec2>& directions, const Eigen::VectorXcd& D, double* condition = nullptr,
                               double* residual = nullptr);
// (1 / 2 pi) sum_j w_j e^{i xi_j x1} f_j with trapezoid weights on a uniform grid.
cplx inverse_fourier(const std::vector<double>& xi, const std::vector<cplx>& f_hat, double x1);
std::vector<double> uniform_xi_grid(double xi_max = 8.0, double dxi = 1.0);

// Every ordered pair (eta, gamma) of the given lines with gamma taken in both
// orientations; the lines must cross pairwise once, at p. mu = (1 - L) lambda,
// so xi = 2 (2L - 1) lambda.
MomentSet collect_moments(const OneFormField& A, const ProductManifold& M, const std::vector<Geodesic>& lines,
                          const Vec2& p, const std::vector<double>& xi, double L, const MomentOptions& opt = {},
                          std::vector<DirectionalMoment>* details = nullptr);

// Direct oracle of the order-3 identity
//   int 4i <A, d(u1 u2 u3)> u4 - (3i d*A + V) u1 u2 u3 u4 dV_g
// for the quadruple of the (eta, gamma) pair, Fourier-reduced as above.
struct IdentityOracle {
  OneFormField A;  // empty means A = 0
  ComplexField V;  // empty means V = 0
};

struct VRecovery {
  cplx value = 0.0;                 // q(x1, p)
  std::vector<double> xi;
  std::vector<cplx> q_hat;          // -lim D_V(xi)
  std::vector<std::vector<cplx>> D; // [xi][s] normalized values F s^{1/2} / C_p
  bool subtracted = false;
};
// D_V = F s^{1/2} / C_p -> -q^(xi, p) once the A terms of the identity are
// removed; `known_A` (empty for none) is subtracted through the same quadrature.
VRecovery recover_V_point(const IdentityOracle& truth, const OneFormField& known_A, const ProductManifold& M,
                          const Geodesic& gamma, const Geodesic& eta, const Vec2& p, double x1,
                          const std::vector<double>& xi, double L, const MomentOptions& opt = {});

// Least-squares separation of sum_j f_j(lambda) e^{a_j lambda} with each f_j a
// polynomial of the given degree in lambda.
struct SeparationReport {
  Eigen::MatrixXcd coefficients;  // rows j, columns polynomial degree
  Eigen::MatrixXcd f_values;      // rows j, columns grid points
  double residual = 0.0;          // relative
  double condition = 0.0;
  std::string warning;
};
SeparationReport separate_exponential_sums(const std::vector<double>& lambdas, const std::vector<cplx>& samples,
                                           const std::vector<double>& a_list, int degree = 0);

void write_moment_csv(std::ostream& out, const std::vector<DirectionalMoment>& moments);
void write_stationary_csv(std::ostream& out, const StationaryPhaseReport& r);

}  // namespace nlms
