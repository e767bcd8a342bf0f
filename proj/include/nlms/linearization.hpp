#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "nlms/forward.hpp"

namespace nlms {

constexpr int kMaxOrder = 5;

struct LinearizeOptions {
  double h = 0.01;          // stencil step h_eps
  bool richardson = true;   // combine steps h and h/2
  NewtonOptions newton;
  Exec exec = Exec::Parallel;  // corner solves
};

// Mixed derivative d_{eps_1}..d_{eps_m} Lambda(sum eps_k f_k) at eps = 0.
struct MultilinearDN {
  int order = 0;
  std::vector<CVec> fs;
  CVec value;               // boundary field
  double h = 0.0;
  int richardson_level = 0;
  int corner_solves = 0;
  // 2^m eps_solve max|Lambda| / (2h)^m for the finest step used.
  double noise_floor = 0.0;
  // sum |corner terms| / |value|_inf: cancellation inside the stencil.
  double condition = 0.0;
  std::string warning;
};

MultilinearDN multilinearize_dn(const FEOperator& op, const NonlinearPotentials& p, const std::vector<CVec>& fs,
                                int m, const LinearizeOptions& opt = {});

// Volume route: int [(m+1) i <A, d(u_1..u_m)> u_{m+1} - (m i d*A + V) u_1..u_{m+1}] dV_g,
// with d(u_1..u_m) expanded by the Leibniz rule.
cplx integral_identity(const FEOperator& op, const OneForm& A, const CVec& V, const std::vector<CVec>& us, int m);

// Green route: minus the boundary pairing of the difference of the m-th
// multilinear DN outputs with v_extra. With the sign flipped this equals
// integral_identity(A^1_{m-1} - A^2_{m-1}, V^1_m - V^2_m, harmonic extensions)
// when the lower-order coefficients agree.
struct IdentityFromDN {
  cplx value;
  MultilinearDN first;
  MultilinearDN second;
};
IdentityFromDN identity_from_dn(const FEOperator& op, const NonlinearPotentials& p1, const NonlinearPotentials& p2,
                                const std::vector<CVec>& fs, const CVec& v_extra, int m,
                                const LinearizeOptions& opt = {});

void write_multilinear_csv(std::ostream& out, const FEOperator& op, const MultilinearDN& d);

}  // namespace nlms
