#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "nlms/linearization.hpp"
#include "oracles.hpp"

using namespace nlms;

namespace {

struct Setup {
  Mesh mesh;
  FEOperator op;
  explicit Setup(int n_disk = 16, int n_x1 = 8) : mesh(build_mesh(n_disk, n_x1)), op(mesh, ProductManifold{}) {}
  CVec trace(const std::function<cplx(const Vec3&)>& f) const {
    CVec out(mesh.num_boundary());
    for (int k = 0; k < mesh.num_boundary(); ++k)
      out[k] = f(mesh.vertices[static_cast<std::size_t>(mesh.boundary_vertices[static_cast<std::size_t>(k)])]);
    return out;
  }
  std::vector<CVec> traces() const {
    return {trace([](const Vec3& x) { return cplx(x.x()); }), trace([](const Vec3& x) { return cplx(x.y() + 0.5); }),
            trace([](const Vec3& x) { return cplx(1.0 + 0.5 * x.z()); }),
            trace([](const Vec3& x) { return cplx(x.x() * x.y()); })};
  }
};

double sup(const CVec& v) { return v.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("first linearization is the harmonic DN map") {
  const Setup s;
  const auto f = s.traces();
  const NonlinearPotentials p = potential_preset("bump-AV").sample(s.mesh);
  const MultilinearDN d = multilinearize_dn(s.op, p, {f[0]}, 1);
  const CVec ref = s.op.normal_derivative(s.op.harmonic_extension(f[0]));
  CHECK(sup(d.value - ref) / sup(ref) < 1e-6);
  CHECK(d.corner_solves == 4);
  CHECK(d.richardson_level == 1);
  CHECK(d.warning.empty());
}

TEST_CASE("second linearization vanishes") {
  const Setup s;
  const auto f = s.traces();
  const NonlinearPotentials p = potential_preset("bump-AV", {{"amplitude", 3.0}}).sample(s.mesh);
  const MultilinearDN d = multilinearize_dn(s.op, p, {f[0], f[1]}, 2);
  CHECK(sup(d.value) < d.noise_floor);
  CHECK(!d.warning.empty());
}

TEST_CASE("third linearization matches the cascade solve") {
  const Setup s;
  const auto f = s.traces();
  const std::vector<CVec> fs{f[0], f[1], f[2]};
  for (const char* name : {"cubic", "bump-AV"}) {
    const NonlinearPotentials p = potential_preset(name).sample(s.mesh);
    const CVec ref = oracle::cascade_third_order(s.op, p, fs);
    const MultilinearDN d = multilinearize_dn(s.op, p, fs, 3);
    CHECK(sup(d.value - ref) / sup(ref) < 1e-6);
  }
}

TEST_CASE("central stencil is second order in h_eps") {
  const Setup s;
  const auto f = s.traces();
  const std::vector<CVec> fs{f[0], f[1], f[2]};
  const NonlinearPotentials p = potential_preset("cubic").sample(s.mesh);
  const CVec ref = oracle::cascade_third_order(s.op, p, fs);
  LinearizeOptions opt;
  opt.richardson = false;
  double err[2];
  int k = 0;
  for (double h : {0.01, 0.005}) {
    opt.h = h;
    err[k++] = sup(multilinearize_dn(s.op, p, fs, 3, opt).value - ref);
  }
  CHECK(err[0] / err[1] == doctest::Approx(4.0).epsilon(0.15));
}

TEST_CASE("multilinear DN is symmetric in its inputs") {
  const Setup s;
  const auto f = s.traces();
  const NonlinearPotentials p = potential_preset("bump-AV").sample(s.mesh);
  const MultilinearDN a = multilinearize_dn(s.op, p, {f[0], f[1], f[3]}, 3);
  const MultilinearDN b = multilinearize_dn(s.op, p, {f[3], f[0], f[1]}, 3);
  CHECK(sup(a.value - b.value) < a.noise_floor);
}

TEST_CASE("linearization argument checks") {
  const Setup s;
  const auto f = s.traces();
  const NonlinearPotentials p = potential_preset("cubic").sample(s.mesh);
  CHECK_THROWS_AS(multilinearize_dn(s.op, p, {f[0]}, 2), ParameterError);
  CHECK_THROWS_AS(multilinearize_dn(s.op, p, std::vector<CVec>(6, f[0]), 6), ParameterError);
  LinearizeOptions big;
  big.h = 0.1;
  CHECK_THROWS_AS(multilinearize_dn(s.op, p, {f[0], f[1]}, 2, big), SmallnessError);
}

TEST_CASE("integral identity special cases") {
  const Setup s;
  const int n = s.mesh.num_vertices();
  const auto f = s.traces();
  std::vector<CVec> us;
  for (const CVec& t : f) us.push_back(s.op.harmonic_extension(t));
  CHECK(integral_identity(s.op, OneForm::Zero(n, 3), CVec::Zero(n), us, 3) == cplx(0.0));

  // Constant fields and compactly supported A: only -int V survives.
  const NonlinearPotentials p = potential_preset("bump-AV", {{"amplitude", 2.0}}).sample(s.mesh);
  const std::vector<CVec> ones(4, CVec::Ones(n));
  const cplx val = integral_identity(s.op, p.A.at(2), p.V.at(3), ones, 3);
  const cplx ref = -s.op.integrate(p.V.at(3));
  CHECK(std::abs(val - ref) < 1e-13 * std::abs(ref));

  const NonlinearPotentials zero = p - p;
  CHECK(integral_identity(s.op, zero.A.at(2), zero.V.at(3), us, 3) == cplx(0.0));
  CHECK_THROWS_AS(integral_identity(s.op, p.A.at(2), p.V.at(3), ones, 2), ParameterError);
}

TEST_CASE("Green route equals the volume route") {
  const Setup s(24, 12);
  const auto f = s.traces();
  const NonlinearPotentials p = potential_preset("bump-AV").sample(s.mesh);
  const NonlinearPotentials p2 = potential_preset("bump-AV", {{"amplitude", 2.0}}).sample(s.mesh);
  std::vector<CVec> us;
  for (const CVec& t : f) us.push_back(s.op.harmonic_extension(t));

  const IdentityFromDN same = identity_from_dn(s.op, p, p, {f[0], f[1], f[2]}, f[3], 3);
  CHECK(same.value == cplx(0.0));

  const IdentityFromDN g = identity_from_dn(s.op, p, {}, {f[0], f[1], f[2]}, f[3], 3);
  const cplx v = integral_identity(s.op, p.A.at(2), p.V.at(3), us, 3);
  CHECK(std::abs(g.value - v) <= 0.02 * std::abs(v));

  // Doubling the potentials doubles the identity.
  const IdentityFromDN g2 = identity_from_dn(s.op, p2, {}, {f[0], f[1], f[2]}, f[3], 3);
  CHECK(std::abs(g2.value - 2.0 * g.value) <= 0.02 * std::abs(2.0 * g.value));
}
