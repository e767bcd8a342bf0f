#include "nlms/forward.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseLU>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

namespace nlms {

namespace {

constexpr cplx kI(0.0, 1.0);

double factorial(int k) {
  double f = 1.0;
  for (int j = 2; j <= k; ++j) f *= j;
  return f;
}

cplx ipow(cplx u, int k) {
  cplx r = 1.0;
  for (int j = 0; j < k; ++j) r *= u;
  return r;
}

double max_abs(const CVec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// Per-call data shared by the residual and the Jacobian.
struct Prepared {
  std::vector<int> ak;
  std::vector<CVec> dA;    // d*A_k
  std::vector<CVec> Adu;   // <A_k, du>
  std::vector<std::vector<CVec>> AA;  // <A_k, A_l>
};

Prepared prepare(const FEOperator& op, const NonlinearPotentials& p, const CVec& u) {
  Prepared P;
  const OneForm du = op.gradient(u);
  for (const auto& [k, Ak] : p.A) {
    P.ak.push_back(k);
    P.dA.push_back(op.codifferential(Ak));
    P.Adu.push_back(op.pairing(Ak, du));
  }
  for (const auto& [k, Ak] : p.A) {
    std::vector<CVec> row;
    for (const auto& [l, Al] : p.A) row.push_back(op.pairing(Ak, Al));
    P.AA.push_back(std::move(row));
  }
  return P;
}

// Stiffness factorization as a preconditioner for the complex Jacobian.
class StiffnessPreconditioner {
 public:
  StiffnessPreconditioner() = default;
  void set(const FEOperator* op) { op_ = op; }
  template <class M>
  StiffnessPreconditioner& analyzePattern(const M&) { return *this; }
  template <class M>
  StiffnessPreconditioner& factorize(const M&) { return *this; }
  template <class M>
  StiffnessPreconditioner& compute(const M&) { return *this; }
  template <class Rhs>
  CVec solve(const Rhs& b) const { return op_->solve_interior(CVec(b)); }
  Eigen::ComputationInfo info() const { return Eigen::Success; }

 private:
  const FEOperator* op_ = nullptr;
};

SpMatC interior_block(const FEOperator& op, const SpMatC& J) {
  const Mesh& m = op.mesh();
  std::vector<Eigen::Triplet<cplx>> t;
  t.reserve(static_cast<std::size_t>(J.nonZeros()));
  for (int col = 0; col < J.outerSize(); ++col) {
    const int ci = m.interior_index[static_cast<std::size_t>(col)];
    if (ci < 0) continue;
    for (SpMatC::InnerIterator it(J, col); it; ++it) {
      const int ri = m.interior_index[static_cast<std::size_t>(it.row())];
      if (ri >= 0) t.emplace_back(ri, ci, it.value());
    }
  }
  SpMatC Jii(m.num_interior(), m.num_interior());
  Jii.setFromTriplets(t.begin(), t.end());
  return Jii;
}

CVec solve_jacobian(const FEOperator& op, const SpMatC& Jii, const CVec& rhs) {
  Eigen::BiCGSTAB<SpMatC, StiffnessPreconditioner> it;
  it.preconditioner().set(&op);
  it.setTolerance(1e-14);
  it.setMaxIterations(200);
  it.compute(Jii);
  CVec x = it.solve(rhs);
  if (it.info() == Eigen::Success && x.allFinite()) return x;
  Eigen::SparseLU<SpMatC> lu;
  lu.compute(Jii);
  if (lu.info() != Eigen::Success) throw AssumptionError("Jacobian of the nonlinear Dirichlet problem is singular");
  x = lu.solve(rhs);
  if (lu.info() != Eigen::Success || !x.allFinite())
    throw AssumptionError("Jacobian of the nonlinear Dirichlet problem is singular");
  return x;
}

}  // namespace

void NonlinearPotentials::validate(int num_vertices) const {
  for (const auto& [k, Ak] : A) {
    if (Ak.rows() != num_vertices) throw ParameterError("A coefficient has the wrong number of vertices");
    if (!Ak.allFinite()) throw ParameterError("A coefficient is not finite");
    if (k > kMaxTruncation) throw ParameterError("A truncation degree exceeds " + std::to_string(kMaxTruncation));
    if (k < 2 && (k < 0 || Ak.cwiseAbs().maxCoeff() != 0.0))
      throw ParameterError("A_" + std::to_string(k) + " must vanish (A_0 = A_1 = 0)");
  }
  for (const auto& [k, Vk] : V) {
    if (Vk.size() != num_vertices) throw ParameterError("V coefficient has the wrong number of vertices");
    if (!Vk.allFinite()) throw ParameterError("V coefficient is not finite");
    if (k > kMaxTruncation) throw ParameterError("V truncation degree exceeds " + std::to_string(kMaxTruncation));
    if (k < 3 && (k < 0 || max_abs(Vk) != 0.0))
      throw ParameterError("V_" + std::to_string(k) + " must vanish (V_0 = V_1 = V_2 = 0)");
  }
}

NonlinearPotentials NonlinearPotentials::operator-(const NonlinearPotentials& o) const {
  NonlinearPotentials d = *this;
  for (const auto& [k, Ak] : o.A) {
    auto it = d.A.find(k);
    if (it == d.A.end()) d.A.emplace(k, -Ak);
    else it->second -= Ak;
  }
  for (const auto& [k, Vk] : o.V) {
    auto it = d.V.find(k);
    if (it == d.V.end()) d.V.emplace(k, -Vk);
    else it->second -= Vk;
  }
  d.provenance = provenance + " - " + o.provenance;
  return d;
}

NonlinearPotentials NonlinearPotentials::scaled(cplx s) const {
  NonlinearPotentials d = *this;
  for (auto& [k, Ak] : d.A) Ak *= s;
  for (auto& [k, Vk] : d.V) Vk *= s;
  return d;
}

NonlinearPotentials PotentialField::sample(const Mesh& mesh) const {
  NonlinearPotentials p;
  p.provenance = provenance;
  const int n = mesh.num_vertices();
  for (const auto& [k, f] : A) {
    OneForm Ak(n, 3);
    for (int v = 0; v < n; ++v) Ak.row(v) = f(mesh.vertices[static_cast<std::size_t>(v)]).transpose();
    p.A.emplace(k, std::move(Ak));
  }
  for (const auto& [k, f] : V) {
    CVec Vk(n);
    for (int v = 0; v < n; ++v) Vk[v] = f(mesh.vertices[static_cast<std::size_t>(v)]);
    p.V.emplace(k, std::move(Vk));
  }
  p.validate(n);
  return p;
}

CVec3 PotentialField::A_at(int k, const Vec3& x) const {
  auto it = A.find(k);
  return it == A.end() ? CVec3::Zero() : it->second(x);
}

cplx PotentialField::V_at(int k, const Vec3& x) const {
  auto it = V.find(k);
  return it == V.end() ? cplx(0.0) : it->second(x);
}

double smooth_bump(const Vec3& x, const Vec3& center, double width) {
  const double r2 = (x - center).squaredNorm() / (width * width);
  return r2 < 1.0 ? std::exp(1.0 - 1.0 / (1.0 - r2)) : 0.0;
}

std::vector<std::string> potential_preset_names() {
  return {"zero", "cubic", "bump-V", "bump-A", "bump-AV", "linear-A"};
}

PotentialField potential_preset(const std::string& name, const std::map<std::string, double>& params) {
  auto get = [&](const char* key, double def) {
    auto it = params.find(key);
    return it == params.end() ? def : it->second;
  };
  for (const auto& [key, value] : params) {
    static const char* known[] = {"amplitude", "amplitude_im", "width", "cx", "cy", "cz", "direction", "order"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown potential parameter '" + key + "'");
    if (!std::isfinite(value)) throw ConfigError("potential parameter '" + key + "' is not finite");
  }
  const cplx amp(get("amplitude", 1.0), get("amplitude_im", 0.0));
  const double width = get("width", 0.5);
  const Vec3 center(get("cx", 0.0), get("cy", 0.0), get("cz", 0.0));
  const int dir = static_cast<int>(get("direction", 2.0));
  if (!(width > 0.0)) throw ConfigError("bump width must be positive");
  if (dir < 1 || dir > 3) throw ConfigError("direction must be 1, 2 or 3");

  PotentialField p;
  std::ostringstream prov;
  prov << name;
  for (const auto& [key, value] : params) prov << " " << key << "=" << value;
  p.provenance = prov.str();

  auto bump_form = [=](const Vec3& x) {
    CVec3 a = CVec3::Zero();
    a[dir - 1] = amp * smooth_bump(x, center, width);
    return a;
  };
  auto bump_scalar = [=](const Vec3& x) { return amp * smooth_bump(x, center, width); };

  if (name == "zero") {
  } else if (name == "cubic") {
    p.V[3] = [=](const Vec3&) { return 6.0 * amp; };
  } else if (name == "bump-V") {
    const int k = static_cast<int>(get("order", 3.0));
    if (k < 3 || k > kMaxTruncation) throw ConfigError("bump-V order must be in 3..6");
    p.V[k] = bump_scalar;
  } else if (name == "bump-A") {
    const int k = static_cast<int>(get("order", 2.0));
    if (k < 2 || k > kMaxTruncation) throw ConfigError("bump-A order must be in 2..6");
    p.A[k] = bump_form;
  } else if (name == "bump-AV") {
    p.A[2] = bump_form;
    p.V[3] = bump_scalar;
  } else if (name == "linear-A") {
    p.A[2] = [=](const Vec3& x) { return CVec3(amp * x.x(), 0.0, 0.0); };
  } else {
    throw ConfigError("unknown potential preset '" + name + "'");
  }
  return p;
}

NonlinearPotentials read_potentials_csv(std::istream& in, int num_vertices) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("kind,k,vertex_id", 0) != 0)
    throw ConfigError("potential CSV must start with kind,k,vertex_id,re1,im1,re2,im2,re3,im3");
  NonlinearPotentials p;
  p.provenance = "grid";
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<std::string> cols;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 9) throw ConfigError("potential CSV line " + std::to_string(lineno) + ": expected 9 columns");
    try {
      const int k = std::stoi(cols[1]);
      const int v = std::stoi(cols[2]);
      if (v < 0 || v >= num_vertices) throw ConfigError("potential CSV line " + std::to_string(lineno) + ": bad vertex id");
      double c[6];
      for (int j = 0; j < 6; ++j) c[j] = std::stod(cols[static_cast<std::size_t>(3 + j)]);
      if (cols[0] == "A") {
        auto it = p.A.try_emplace(k, OneForm::Zero(num_vertices, 3)).first;
        for (int d = 0; d < 3; ++d) it->second(v, d) = cplx(c[2 * d], c[2 * d + 1]);
      } else if (cols[0] == "V") {
        auto it = p.V.try_emplace(k, CVec::Zero(num_vertices)).first;
        it->second[v] = cplx(c[0], c[1]);
      } else {
        throw ConfigError("potential CSV line " + std::to_string(lineno) + ": kind must be A or V");
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("potential CSV line " + std::to_string(lineno) + ": not a number");
    } catch (const std::out_of_range&) {
      throw ConfigError("potential CSV line " + std::to_string(lineno) + ": number out of range");
    }
  }
  p.validate(num_vertices);
  return p;
}

void write_potentials_csv(std::ostream& out, const NonlinearPotentials& p) {
  out.precision(17);
  out << "kind,k,vertex_id,re1,im1,re2,im2,re3,im3\n";
  for (const auto& [k, Ak] : p.A)
    for (Eigen::Index v = 0; v < Ak.rows(); ++v) {
      out << "A," << k << "," << v;
      for (int d = 0; d < 3; ++d) out << "," << Ak(v, d).real() << "," << Ak(v, d).imag();
      out << "\n";
    }
  for (const auto& [k, Vk] : p.V)
    for (Eigen::Index v = 0; v < Vk.size(); ++v)
      out << "V," << k << "," << v << "," << Vk[v].real() << "," << Vk[v].imag() << ",0,0,0,0\n";
}

CVec lower_order(const FEOperator& op, const NonlinearPotentials& p, const CVec& u, Exec ex) {
  const int n = op.mesh().num_vertices();
  if (u.size() != n) throw ParameterError("field has the wrong number of vertices");
  CVec N = CVec::Zero(n);
  if (p.empty()) return N;
  const Prepared P = prepare(op, p, u);
  const std::size_t na = P.ak.size();
  for_each_index(ex, n, [&](std::ptrdiff_t v) {
    const cplx z = u[v];
    cplx acc = 0.0;
    for (std::size_t a = 0; a < na; ++a) {
      const int k = P.ak[a];
      const double fk = factorial(k);
      acc += kI / fk * P.dA[a][v] * ipow(z, k + 1) - kI * double(k + 2) / fk * ipow(z, k) * P.Adu[a][v];
      for (std::size_t b = 0; b < na; ++b) {
        const int l = P.ak[b];
        acc += P.AA[a][b][v] * ipow(z, k + l + 1) / (fk * factorial(l));
      }
    }
    for (const auto& [k, Vk] : p.V) acc += Vk[v] * ipow(z, k) / factorial(k);
    N[v] = acc;
  });
  return N;
}

CVec apply_LAV(const FEOperator& op, const NonlinearPotentials& p, const CVec& u, Exec ex) {
  return op.laplacian(u) + lower_order(op, p, u, ex);
}

SpMatC jacobian(const FEOperator& op, const NonlinearPotentials& p, const CVec& u) {
  const Mesh& m = op.mesh();
  const int n = m.num_vertices();
  const RVec& mass = op.lumped_mass();
  CVec D = CVec::Zero(n);
  Eigen::Matrix<cplx, Eigen::Dynamic, 3> W = Eigen::Matrix<cplx, Eigen::Dynamic, 3>::Zero(n, 3);
  if (!p.empty()) {
    const Prepared P = prepare(op, p, u);
    const std::size_t na = P.ak.size();
    const auto& ginv = op.vertex_inverse_metric();
    for_each_index(Exec::Parallel, n, [&](std::ptrdiff_t v) {
      const cplx z = u[v];
      cplx d = 0.0;
      Eigen::Matrix<cplx, 1, 3> w = Eigen::Matrix<cplx, 1, 3>::Zero();
      std::size_t a = 0;
      for (const auto& [k, Ak] : p.A) {
        const double fk = factorial(k);
        d += kI * double(k + 1) / fk * P.dA[a][v] * ipow(z, k);
        if (k > 0) d -= kI * double((k + 2) * k) / fk * ipow(z, k - 1) * P.Adu[a][v];
        w -= kI * double(k + 2) / fk * ipow(z, k) * (Ak.row(v) * ginv[static_cast<std::size_t>(v)].cast<cplx>());
        for (std::size_t b = 0; b < na; ++b) {
          const int l = P.ak[b];
          d += P.AA[a][b][v] * double(k + l + 1) * ipow(z, k + l) / (fk * factorial(l));
        }
        ++a;
      }
      for (const auto& [k, Vk] : p.V)
        if (k > 0) d += Vk[v] * ipow(z, k - 1) / factorial(k - 1);
      D[v] = mass[v] * d;
      W.row(v) = mass[v] * w;
    });
  }
  std::vector<Eigen::Triplet<cplx>> t;
  const SpMat& K = op.stiffness();
  t.reserve(static_cast<std::size_t>(4 * K.nonZeros() + n));
  for (int col = 0; col < K.outerSize(); ++col)
    for (SpMat::InnerIterator it(K, col); it; ++it) t.emplace_back(it.row(), it.col(), it.value());
  if (!p.empty()) {
    for (int v = 0; v < n; ++v) t.emplace_back(v, v, D[v]);
    if (!p.A.empty()) {
      const auto& G = op.gradient_recovery();
      for (int dim = 0; dim < 3; ++dim) {
        const SpMat& Gd = G[static_cast<std::size_t>(dim)];
        for (int col = 0; col < Gd.outerSize(); ++col)
          for (SpMat::InnerIterator it(Gd, col); it; ++it)
            t.emplace_back(it.row(), it.col(), W(it.row(), dim) * it.value());
      }
    }
  }
  SpMatC J(n, n);
  J.setFromTriplets(t.begin(), t.end());
  return J;
}

DNSample solve_nonlinear(const FEOperator& op, const NonlinearPotentials& p, const CVec& f, const NewtonOptions& opt) {
  const Mesh& m = op.mesh();
  p.validate(m.num_vertices());
  if (f.size() != m.num_boundary()) throw ParameterError("boundary trace has the wrong length");
  if (!f.allFinite()) throw ParameterError("boundary trace is not finite");
  const double fnorm = max_abs(f);
  if (!(fnorm < opt.delta)) {
    std::ostringstream msg;
    msg << "|f|_inf = " << fnorm << " is not below the smallness bound delta = " << opt.delta;
    throw SmallnessError(msg.str());
  }

  DNSample s;
  s.f = f;
  s.u = op.harmonic_extension(f);
  const RVec mI = op.restrict_interior(op.lumped_mass().cast<cplx>()).real();
  const double target = opt.tolerance * fnorm;

  auto residual = [&](const CVec& u, CVec* N) {
    *N = lower_order(op, p, u);
    const CVec R = op.stiffness().cast<cplx>() * u + op.lumped_mass().cast<cplx>().cwiseProduct(*N);
    return op.restrict_interior(R);
  };

  CVec N;
  CVec RI = residual(s.u, &N);
  double r = max_abs(RI.cwiseQuotient(mI.cast<cplx>()));
  s.residuals.push_back(r);
  const double r0 = r;
  while (r > target) {
    if (s.iterations >= opt.max_iterations || !std::isfinite(r) || r > 1e3 * std::max(r0, fnorm)) {
      std::ostringstream msg;
      msg << "Newton iteration failed after " << s.iterations << " steps (residual " << r
          << "); the data may be too large, try halving delta";
      throw SmallnessError(msg.str());
    }
    const SpMatC Jii = interior_block(op, jacobian(op, p, s.u));
    const CVec step = solve_jacobian(op, Jii, -RI);
    for (int k = 0; k < m.num_interior(); ++k) s.u[m.interior_vertices[static_cast<std::size_t>(k)]] += step[k];
    ++s.iterations;
    RI = residual(s.u, &N);
    r = max_abs(RI.cwiseQuotient(mI.cast<cplx>()));
    s.residuals.push_back(r);
  }
  s.dnu = op.normal_derivative(s.u, &N);
  s.stability_constant = fnorm > 0.0 ? max_abs(s.u) / fnorm : 0.0;
  return s;
}

CVec dn_map(const FEOperator& op, const NonlinearPotentials& p, const CVec& f, const NewtonOptions& opt) {
  return solve_nonlinear(op, p, f, opt).dnu;
}

double zero_eigenvalue_margin(const FEOperator& op, const NonlinearPotentials& p) {
  const Mesh& m = op.mesh();
  p.validate(m.num_vertices());
  const SpMat& K = op.stiffness_ii();
  const RVec mI = op.restrict_interior(op.lumped_mass().cast<cplx>()).real();
  RVec x = RVec::Ones(m.num_interior());
  double lambda = 0.0;
  for (int it = 0; it < 500; ++it) {
    RVec y = op.solve_interior(mI.cwiseProduct(x).cast<cplx>()).real();
    const double mn = std::sqrt(y.dot(mI.cwiseProduct(y)));
    if (!(mn > 0.0)) throw AssumptionError("inverse iteration broke down");
    y /= mn;
    const double next = y.dot(K * y);
    x = y;
    if (it > 0 && std::abs(next - lambda) <= 1e-13 * std::abs(next)) return next;
    lambda = next;
  }
  return lambda;
}

void write_dn_csv(std::ostream& out, const FEOperator& op, const DNSample& s) {
  out.precision(17);
  out << "boundary_vertex_id,f_re,f_im,dnu_re,dnu_im\n";
  const auto& bv = op.mesh().boundary_vertices;
  for (Eigen::Index k = 0; k < s.f.size(); ++k)
    out << bv[static_cast<std::size_t>(k)] << "," << s.f[k].real() << "," << s.f[k].imag() << "," << s.dnu[k].real()
        << "," << s.dnu[k].imag() << "\n";
}

}  // namespace nlms
