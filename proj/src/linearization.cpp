#include "nlms/linearization.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

namespace nlms {

namespace {

struct Stencil {
  CVec value;
  double corner_abs = 0.0;  // sum of |corner term| sup norms
  double max_lambda = 0.0;
};

Stencil corner_stencil(const FEOperator& op, const NonlinearPotentials& p, const std::vector<CVec>& fs, int m,
                       double h, const LinearizeOptions& opt) {
  const int corners = 1 << m;
  std::vector<CVec> out(static_cast<std::size_t>(corners));
  for_each_index(opt.exec, corners, [&](std::ptrdiff_t c) {
    CVec f = CVec::Zero(fs[0].size());
    for (int k = 0; k < m; ++k) f += ((c >> k) & 1 ? -h : h) * fs[static_cast<std::size_t>(k)];
    out[static_cast<std::size_t>(c)] = dn_map(op, p, f, opt.newton);
  });
  Stencil s;
  s.value = CVec::Zero(fs[0].size());
  const double scale = std::pow(2.0 * h, m);
  for (int c = 0; c < corners; ++c) {
    const int neg = __builtin_popcount(static_cast<unsigned>(c));
    const CVec& L = out[static_cast<std::size_t>(c)];
    s.value += (neg % 2 ? -1.0 : 1.0) / scale * L;
    const double a = L.cwiseAbs().maxCoeff();
    s.corner_abs += a / scale;
    s.max_lambda = std::max(s.max_lambda, a);
  }
  return s;
}

}  // namespace

MultilinearDN multilinearize_dn(const FEOperator& op, const NonlinearPotentials& p, const std::vector<CVec>& fs,
                                int m, const LinearizeOptions& opt) {
  if (m < 1 || m > kMaxOrder) throw ParameterError("linearization order must be in 1..5");
  if (static_cast<int>(fs.size()) != m) throw ParameterError("need exactly m boundary traces");
  if (!(opt.h > 0.0)) throw ParameterError("stencil step must be positive");
  double fmax = 0.0;
  for (const CVec& f : fs) {
    if (f.size() != op.mesh().num_boundary()) throw ParameterError("boundary trace has the wrong length");
    fmax = std::max(fmax, f.cwiseAbs().maxCoeff());
  }
  if (!(m * opt.h * fmax < opt.newton.delta)) {
    std::ostringstream msg;
    msg << "stencil corners reach |f|_inf = " << m * opt.h * fmax << ", above delta = " << opt.newton.delta
        << "; reduce h_eps";
    throw SmallnessError(msg.str());
  }

  MultilinearDN d;
  d.order = m;
  d.fs = fs;
  d.h = opt.h;
  const Stencil coarse = corner_stencil(op, p, fs, m, opt.h, opt);
  d.corner_solves = 1 << m;
  Stencil fine = coarse;
  if (opt.richardson) {
    fine = corner_stencil(op, p, fs, m, opt.h / 2, opt);
    d.corner_solves *= 2;
    d.richardson_level = 1;
    d.value = (4.0 * fine.value - coarse.value) / 3.0;
  } else {
    d.value = coarse.value;
  }
  const double eps_solve = std::max(opt.newton.tolerance, 1e-15);
  const double h_used = opt.richardson ? opt.h / 2 : opt.h;
  d.noise_floor = std::pow(2.0, m) * eps_solve * fine.max_lambda / std::pow(2.0 * h_used, m);
  if (opt.richardson) d.noise_floor *= 5.0 / 3.0;
  const double vmax = d.value.cwiseAbs().maxCoeff();
  d.condition = vmax > 0.0 ? fine.corner_abs / vmax : INFINITY;
  if (vmax < d.noise_floor) {
    std::ostringstream msg;
    msg << "order-" << m << " derivative is below the noise floor " << d.noise_floor
        << "; if a nonzero value is expected try h_eps = " << 2.0 * opt.h;
    d.warning = msg.str();
  }
  return d;
}

cplx integral_identity(const FEOperator& op, const OneForm& A, const CVec& V, const std::vector<CVec>& us, int m) {
  if (m < 1 || m > kMaxOrder) throw ParameterError("identity order must be in 1..5");
  if (static_cast<int>(us.size()) != m + 1) throw ParameterError("need m + 1 fields");
  const int n = op.mesh().num_vertices();
  if (A.rows() != n || V.size() != n) throw ParameterError("potential has the wrong number of vertices");
  for (const CVec& u : us)
    if (u.size() != n) throw ParameterError("field has the wrong number of vertices");
  // d(u_1..u_m) by the Leibniz rule on recovered gradients, the same
  // discretization the nonlinear operator uses, so Green's identity is exact.
  CVec prod = CVec::Ones(n);
  CVec leibniz = CVec::Zero(n);
  for (int c = 0; c < m; ++c) {
    CVec others = CVec::Ones(n);
    for (int k = 0; k < m; ++k)
      if (k != c) others = others.cwiseProduct(us[static_cast<std::size_t>(k)]);
    leibniz += others.cwiseProduct(op.pairing_form(A, us[static_cast<std::size_t>(c)]));
    prod = prod.cwiseProduct(us[static_cast<std::size_t>(c)]);
  }
  const CVec& last = us[static_cast<std::size_t>(m)];
  const cplx i(0.0, 1.0);
  const CVec integrand = (double(m + 1) * i * leibniz).cwiseProduct(last) -
                         (double(m) * i * op.codifferential(A) + V).cwiseProduct(prod).cwiseProduct(last);
  return op.integrate(integrand);
}

IdentityFromDN identity_from_dn(const FEOperator& op, const NonlinearPotentials& p1, const NonlinearPotentials& p2,
                                const std::vector<CVec>& fs, const CVec& v_extra, int m, const LinearizeOptions& opt) {
  if (v_extra.size() != op.mesh().num_boundary()) throw ParameterError("v_extra has the wrong length");
  IdentityFromDN r;
  r.first = multilinearize_dn(op, p1, fs, m, opt);
  r.second = multilinearize_dn(op, p2, fs, m, opt);
  r.value = -op.boundary_integrate((r.first.value - r.second.value).cwiseProduct(v_extra));
  return r;
}

void write_multilinear_csv(std::ostream& out, const FEOperator& op, const MultilinearDN& d) {
  out.precision(17);
  out << "boundary_vertex_id,re,im\n";
  const auto& bv = op.mesh().boundary_vertices;
  for (Eigen::Index k = 0; k < d.value.size(); ++k)
    out << bv[static_cast<std::size_t>(k)] << "," << d.value[k].real() << "," << d.value[k].imag() << "\n";
}

}  // namespace nlms
