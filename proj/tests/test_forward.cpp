#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "nlms/forward.hpp"

using namespace nlms;

namespace {

constexpr double kPi = 3.14159265358979323846;
const cplx kI(0.0, 1.0);

struct Setup {
  Mesh mesh;
  FEOperator op;
  explicit Setup(int n_disk = 16, int n_x1 = 8, ProductManifold M = {})
      : mesh(build_mesh(n_disk, n_x1)), op(mesh, M) {}
  CVec trace(const std::function<cplx(const Vec3&)>& f) const {
    CVec out(mesh.num_boundary());
    for (int k = 0; k < mesh.num_boundary(); ++k) out[k] = f(mesh.vertices[static_cast<std::size_t>(mesh.boundary_vertices[static_cast<std::size_t>(k)])]);
    return out;
  }
  CVec field(const std::function<cplx(const Vec3&)>& f) const {
    CVec out(mesh.num_vertices());
    for (int v = 0; v < mesh.num_vertices(); ++v) out[v] = f(mesh.vertices[static_cast<std::size_t>(v)]);
    return out;
  }
  CVec random_field(unsigned seed, double amp) const {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    CVec out(mesh.num_vertices());
    for (auto& z : out) z = amp * cplx(U(rng), U(rng));
    return out;
  }
};

double max_abs(const CVec& v) { return v.cwiseAbs().maxCoeff(); }

double interior_max(const Setup& s, const CVec& v) { return max_abs(s.op.restrict_interior(v)); }

NonlinearPotentials generic(const Mesh& m) {
  PotentialField f = potential_preset("bump-AV", {{"amplitude", 2.0}, {"amplitude_im", -1.0}, {"width", 0.7}});
  f.A[3] = [](const Vec3& x) { return CVec3(cplx(x.y(), 0.5), cplx(0.0, x.x() * x.z()), 1.0 + x.x()); };
  f.V[4] = [](const Vec3& x) { return cplx(1.0 + x.y() * x.y(), x.z()); };
  return f.sample(m);
}

// Term-by-term evaluation of the operator from the unexpanded grouping
//   i [u d*_x A(x,u) - <u dA/dz + A(x,u), du>] - i <A(x,u), du> + <A,A> u + V(x,u).
CVec oracle_LAV(const FEOperator& op, const NonlinearPotentials& p, const CVec& u) {
  const int n = static_cast<int>(u.size());
  const OneForm du = op.gradient(u);
  std::map<int, CVec> dstar;
  for (const auto& [k, Ak] : p.A) dstar[k] = op.codifferential(Ak);
  const CVec lap = op.laplacian(u);
  CVec out(n);
  for (int v = 0; v < n; ++v) {
    const cplx z = u[v];
    const Eigen::Matrix3cd gi = op.vertex_inverse_metric()[static_cast<std::size_t>(v)].cast<cplx>();
    Eigen::RowVector3cd Au = Eigen::RowVector3cd::Zero(), dAz = Eigen::RowVector3cd::Zero();
    cplx divA = 0.0, Vu = 0.0;
    for (const auto& [k, Ak] : p.A) {
      const double fk = std::tgamma(k + 1.0);
      Au += Ak.row(v) * std::pow(z, k) / fk;
      dAz += Ak.row(v) * double(k) * std::pow(z, k - 1) / fk;
      divA += dstar[k][v] * std::pow(z, k) / fk;
    }
    for (const auto& [k, Vk] : p.V) Vu += Vk[v] * std::pow(z, k) / std::tgamma(k + 1.0);
    auto pair = [&](const Eigen::RowVector3cd& a, const Eigen::RowVector3cd& b) { return cplx(a * gi * b.transpose()); };
    const Eigen::RowVector3cd dU = du.row(v);
    out[v] = lap[v] + kI * (z * divA - pair(z * dAz + Au, dU)) - kI * pair(Au, dU) + pair(Au, Au) * z + Vu;
  }
  return out;
}

}  // namespace

TEST_CASE("potential validation and presets") {
  const Setup s;
  const int n = s.mesh.num_vertices();
  NonlinearPotentials p;
  p.A[1] = OneForm::Zero(n, 3);
  p.V[2] = CVec::Zero(n);
  CHECK_NOTHROW(p.validate(n));
  p.A[1](3, 1) = 1e-20;
  CHECK_THROWS_AS(p.validate(n), ParameterError);
  p.A.erase(1);
  p.V[2][0] = 1.0;
  CHECK_THROWS_AS(p.validate(n), ParameterError);
  p.V.erase(2);
  p.V[7] = CVec::Zero(n);
  CHECK_THROWS_AS(p.validate(n), ParameterError);
  p.V.erase(7);
  p.V[3] = CVec::Zero(n - 1);
  CHECK_THROWS_AS(p.validate(n), ParameterError);

  for (const auto& name : potential_preset_names()) CHECK_NOTHROW(potential_preset(name).sample(s.mesh));
  CHECK_THROWS_AS(potential_preset("nope"), ConfigError);
  CHECK_THROWS_AS(potential_preset("bump-A", {{"order", 1}}), ConfigError);
  CHECK_THROWS_AS(potential_preset("bump-A", {{"colour", 1}}), ConfigError);

  // Bump is compactly supported and equals 1 at its center.
  CHECK(smooth_bump(Vec3(0.1, 0.2, 0), Vec3(0.1, 0.2, 0), 0.3) == doctest::Approx(1.0));
  CHECK(smooth_bump(Vec3(0.5, 0.2, 0), Vec3(0.1, 0.2, 0), 0.4) == 0.0);
}

TEST_CASE("potential CSV round trip") {
  const Setup s(8, 4);
  const NonlinearPotentials p = generic(s.mesh);
  std::stringstream ss;
  write_potentials_csv(ss, p);
  const NonlinearPotentials q = read_potentials_csv(ss, s.mesh.num_vertices());
  REQUIRE(q.A.size() == p.A.size());
  REQUIRE(q.V.size() == p.V.size());
  for (const auto& [k, Ak] : p.A) CHECK((q.A.at(k) - Ak).cwiseAbs().maxCoeff() == 0.0);
  for (const auto& [k, Vk] : p.V) CHECK((q.V.at(k) - Vk).cwiseAbs().maxCoeff() == 0.0);
  std::stringstream bad("kind,k,vertex_id,re1,im1,re2,im2,re3,im3\nV,3,0,1,0,0,0\n");
  CHECK_THROWS_AS(read_potentials_csv(bad, s.mesh.num_vertices()), ConfigError);
}

TEST_CASE("apply_LAV reduces to the Laplacian and to kappa^3") {
  const Setup s;
  const CVec x1 = s.field([](const Vec3& x) { return cplx(x.x()); });
  CHECK(interior_max(s, apply_LAV(s.op, {}, x1)) < 1e-10);
  const CVec u = s.random_field(1, 1.0);
  CHECK(max_abs(apply_LAV(s.op, {}, u) - s.op.laplacian(u)) == 0.0);

  const NonlinearPotentials cubic = potential_preset("cubic").sample(s.mesh);
  const cplx kappa(0.3, -0.2);
  const CVec r = apply_LAV(s.op, cubic, CVec::Constant(s.mesh.num_vertices(), kappa));
  CHECK(max_abs(r - CVec::Constant(s.mesh.num_vertices(), kappa * kappa * kappa)) < 1e-12);
}

TEST_CASE("apply_LAV matches the term-by-term evaluator") {
  const Setup s;
  const NonlinearPotentials p = generic(s.mesh);
  for (unsigned seed : {2u, 3u}) {
    const CVec u = s.random_field(seed, 0.4);
    const CVec ref = oracle_LAV(s.op, p, u);
    const CVec got = apply_LAV(s.op, p, u);
    CHECK(max_abs(got - ref) / max_abs(ref) < 1e-12);
  }
}

TEST_CASE("Jacobian agrees with finite differences") {
  const Setup s;
  const NonlinearPotentials p = generic(s.mesh);
  const CVec u = s.random_field(4, 0.3);
  const CVec d = s.random_field(5, 1.0);
  const RVec& m = s.op.lumped_mass();
  auto R = [&](const CVec& w) { CVec r = apply_LAV(s.op, p, w); return CVec(r.cwiseProduct(m.cast<cplx>())); };
  const CVec Jd = jacobian(s.op, p, u) * d;
  double err[2];
  int k = 0;
  for (double eta : {1e-4, 5e-5}) err[k++] = max_abs((R(u + eta * d) - R(u)) / eta - Jd) / max_abs(Jd);
  CHECK(err[0] < 1e-3);
  // First-order FD error: halving the step halves the deviation.
  CHECK(err[0] / err[1] == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("zero data gives the zero solution") {
  const Setup s;
  const NonlinearPotentials p = generic(s.mesh);
  const DNSample r = solve_nonlinear(s.op, p, CVec::Zero(s.mesh.num_boundary()));
  CHECK(r.iterations == 0);
  CHECK(max_abs(r.u) == 0.0);
  CHECK(max_abs(r.dnu) == 0.0);
}

TEST_CASE("DN map of a linear trace on the flat slab") {
  const Setup s;
  NewtonOptions opt;
  opt.delta = 2.0;
  const CVec dnu = dn_map(s.op, {}, s.trace([](const Vec3& x) { return cplx(x.x()); }), opt);
  int checked = 0;
  for (int k = 0; k < s.mesh.num_boundary(); ++k) {
    const auto tag = s.mesh.vertex_tags[static_cast<std::size_t>(s.mesh.boundary_vertices[static_cast<std::size_t>(k)])];
    if (tag == kOnCapMinus) CHECK(std::abs(dnu[k] + 1.0) < 1e-10);
    else if (tag == kOnCapPlus) CHECK(std::abs(dnu[k] - 1.0) < 1e-10);
    else if (tag == kOnLateral) CHECK(std::abs(dnu[k]) < 1e-10);
    else continue;
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("Newton solve: consistency, smallness and quadratic convergence") {
  const Setup s;
  const NonlinearPotentials cubic = potential_preset("cubic", {{"amplitude", 200.0}}).sample(s.mesh);
  const CVec x1 = s.trace([](const Vec3& x) { return cplx(x.x()); });
  const DNSample r = solve_nonlinear(s.op, cubic, 0.04 * x1);
  CHECK(interior_max(s, apply_LAV(s.op, cubic, r.u)) <= 1e-11 * 0.04);
  REQUIRE(r.residuals.size() >= 3);
  // r_{k+1} <= C r_k^2 with the same C over the observed steps.
  const std::size_t n = r.residuals.size();
  const double c1 = r.residuals[1] / (r.residuals[0] * r.residuals[0]);
  const double c2 = r.residuals[n - 1] / (r.residuals[n - 2] * r.residuals[n - 2]);
  CHECK(c2 < 3.0 * c1);
  CHECK(r.residuals[n - 1] < 1e-3 * r.residuals[n - 2]);

  CHECK_THROWS_AS(solve_nonlinear(s.op, cubic, 0.05 * x1), SmallnessError);
  NewtonOptions tight;
  tight.max_iterations = 1;
  CHECK_THROWS_AS(solve_nonlinear(s.op, cubic, 0.04 * x1, tight), SmallnessError);

  // Stability constant stays bounded over an amplitude sweep.
  const NonlinearPotentials p = generic(s.mesh);
  const CVec f = s.trace([](const Vec3& x) { return cplx(x.y(), x.x() * x.z()); });
  for (double a : {0.005, 0.01, 0.02, 0.04}) {
    const DNSample q = solve_nonlinear(s.op, p, a * f);
    CHECK(q.stability_constant < 2.0);
    CHECK(interior_max(s, apply_LAV(s.op, p, q.u)) <= 1e-11 * max_abs(a * f));
  }
}

TEST_CASE("cubic nonlinearity scales the correction like |f|^3") {
  const Setup s;
  const NonlinearPotentials cubic = potential_preset("cubic").sample(s.mesh);
  const CVec x1 = s.trace([](const Vec3& x) { return cplx(x.x()); });
  std::vector<double> la, le;
  for (double a : {0.01, 0.02, 0.04}) {
    const DNSample r = solve_nonlinear(s.op, cubic, a * x1);
    la.push_back(std::log(a));
    le.push_back(std::log(max_abs(r.u - s.op.harmonic_extension(a * x1))));
  }
  const double slope = ((le[2] - le[0]) / (la[2] - la[0]));
  CHECK(slope == doctest::Approx(3.0).epsilon(0.2 / 3.0));
  CHECK(std::abs((le[1] - le[0]) / (la[1] - la[0]) - 3.0) < 0.2);
}

TEST_CASE("truncation stability") {
  const Setup s;
  PotentialField f = potential_preset("bump-AV", {{"amplitude", 2.0}});
  const NonlinearPotentials p = f.sample(s.mesh);
  f.V[4] = [](const Vec3&) { return cplx(5.0); };
  const NonlinearPotentials q = f.sample(s.mesh);
  const CVec g = s.trace([](const Vec3& x) { return cplx(x.x() + x.y()); });
  for (double a : {0.01, 0.02}) {
    const double fn = max_abs(a * g);
    const double change = max_abs(solve_nonlinear(s.op, p, a * g).u - solve_nonlinear(s.op, q, a * g).u);
    CHECK(change < std::pow(fn, 4));
  }
}

TEST_CASE("DN map determinism") {
  const Setup s;
  const NonlinearPotentials p = generic(s.mesh);
  const NonlinearPotentials q = generic(s.mesh);
  const CVec f = s.trace([](const Vec3& x) { return cplx(0.01 * x.y(), 0.02 * x.x()); });
  const CVec a = dn_map(s.op, p, f), b = dn_map(s.op, q, f);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);
  const CVec u = s.random_field(9, 0.2);
  CHECK(max_abs(apply_LAV(s.op, p, u, Exec::Serial) - apply_LAV(s.op, p, u, Exec::Parallel)) == 0.0);

  std::stringstream out;
  write_dn_csv(out, s.op, solve_nonlinear(s.op, p, f));
  std::string header;
  std::getline(out, header);
  CHECK(header == "boundary_vertex_id,f_re,f_im,dnu_re,dnu_im");
}

TEST_CASE("zero eigenvalue margin") {
  const double exact = kPi * kPi / 4.0 + 2.404825557695773 * 2.404825557695773;
  const Setup coarse(16, 8), fine(24, 12);
  const double m16 = zero_eigenvalue_margin(coarse.op, {});
  const double m24 = zero_eigenvalue_margin(fine.op, {});
  CHECK(m16 > 0.0);
  CHECK(std::abs(m24 - exact) / exact < 0.01);
  CHECK(std::abs(m24 - exact) < std::abs(m16 - exact));

  // Rayleigh quotient of a zero-trace test function bounds the margin from above.
  const CVec b = coarse.field([](const Vec3& x) {
    return cplx(std::cos(kPi * x.x() / 2) * (1.0 - x.y() * x.y() - x.z() * x.z()));
  });
  const CVec bi = coarse.op.restrict_interior(b);
  const RVec mI = coarse.op.restrict_interior(coarse.op.lumped_mass().cast<cplx>()).real();
  const double rq = (bi.adjoint() * coarse.op.stiffness_ii().cast<cplx>() * bi)(0, 0).real() /
                    bi.cwiseAbs2().dot(mI);
  CHECK(m16 <= rq);

  // Admissible potentials leave the linearization at zero untouched.
  CHECK(zero_eigenvalue_margin(coarse.op, generic(coarse.mesh)) == m16);

  ProductManifold M;
  M.conformal_c = [](const Vec3&) { return 2.0; };
  const Setup scaled(16, 8, M);
  CHECK(zero_eigenvalue_margin(scaled.op, {}) == doctest::Approx(m16 / 2.0).epsilon(1e-10));
}
