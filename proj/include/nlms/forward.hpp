#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "nlms/discretization.hpp"

namespace nlms {

using CVec3 = Eigen::Vector3cd;

constexpr int kMaxTruncation = 6;

// Vertex samples of the power-series coefficients
//   A(x, z) = sum_k A_k(x) z^k / k!   (k >= 2),
//   V(x, z) = sum_k V_k(x) z^k / k!   (k >= 3).
struct NonlinearPotentials {
  std::map<int, OneForm> A;
  std::map<int, CVec> V;
  std::string provenance;

  bool empty() const { return A.empty() && V.empty(); }
  // Throws ParameterError on a nonzero coefficient below the admissible index,
  // on an index above kMaxTruncation, on wrong lengths or non-finite samples.
  void validate(int num_vertices) const;
  NonlinearPotentials operator-(const NonlinearPotentials& o) const;
  NonlinearPotentials scaled(cplx s) const;
};

// Closed-form coefficient fields; sampling them on a mesh gives the discrete
// potentials, and recovery scenarios read the same closures as ground truth.
struct PotentialField {
  std::map<int, std::function<CVec3(const Vec3&)>> A;
  std::map<int, std::function<cplx(const Vec3&)>> V;
  std::string provenance;

  NonlinearPotentials sample(const Mesh& mesh) const;
  CVec3 A_at(int k, const Vec3& x) const;
  cplx V_at(int k, const Vec3& x) const;
};

// C-infinity bump exp(1 - 1/(1 - r^2/w^2)) for r = |x - center| < w, else 0.
double smooth_bump(const Vec3& x, const Vec3& center, double width);

// Named presets. Parameters (all optional): amplitude, amplitude_im, width,
// cx, cy, cz, direction (1..3), order.
//   zero        no coefficients
//   cubic       V_3 = 6 * amplitude (V = amplitude z^3)
//   bump-V      V_order = amplitude * bump
//   bump-A      A_order = amplitude * bump * dx_direction
//   bump-AV     bump-A with order 2 plus bump-V with order 3
//   linear-A    A_2 = amplitude * x1 dx1
PotentialField potential_preset(const std::string& name, const std::map<std::string, double>& params = {});
std::vector<std::string> potential_preset_names();

// CSV with header `kind,k,vertex_id,re1,im1,re2,im2,re3,im3`; kind is A or V,
// V rows use only the first pair.
NonlinearPotentials read_potentials_csv(std::istream& in, int num_vertices);
void write_potentials_csv(std::ostream& out, const NonlinearPotentials& p);

// Nodal lower-order part N(u) of L_{A,V}u = -Delta u + N(u), expanded as
//   sum_k (i/k!) (d*A_k) u^{k+1} - i (k+2)/k! u^k <A_k, du>
//   + sum_{k,l} <A_k, A_l> u^{k+l+1}/(k! l!) + sum_k V_k u^k / k!.
CVec lower_order(const FEOperator& op, const NonlinearPotentials& p, const CVec& u, Exec ex = Exec::Parallel);
// Nodal L_{A,V}u: (K u)/m + N(u).
CVec apply_LAV(const FEOperator& op, const NonlinearPotentials& p, const CVec& u, Exec ex = Exec::Parallel);
// Frechet derivative of u -> K u + M N(u), all rows and columns.
SpMatC jacobian(const FEOperator& op, const NonlinearPotentials& p, const CVec& u);

struct NewtonOptions {
  double delta = 0.05;  // smallness bound on |f|_inf
  int max_iterations = 25;
  double tolerance = 1e-11;  // on the interior nodal residual, relative to |f|_inf
};

struct DNSample {
  CVec f;
  CVec u;
  CVec dnu;
  int iterations = 0;
  std::vector<double> residuals;  // interior nodal residual before each step and at exit
  double stability_constant = 0.0;  // |u|_inf / |f|_inf
};

DNSample solve_nonlinear(const FEOperator& op, const NonlinearPotentials& p, const CVec& f,
                         const NewtonOptions& opt = {});
CVec dn_map(const FEOperator& op, const NonlinearPotentials& p, const CVec& f, const NewtonOptions& opt = {});

// Smallest Dirichlet eigenvalue of the linearization at u = 0, which is -Delta_g
// for admissible potentials; inverse iteration with the Rayleigh quotient.
double zero_eigenvalue_margin(const FEOperator& op, const NonlinearPotentials& p);

void write_dn_csv(std::ostream& out, const FEOperator& op, const DNSample& s);

}  // namespace nlms
