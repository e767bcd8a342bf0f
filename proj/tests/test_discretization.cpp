#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <sstream>

#include "nlms/discretization.hpp"

using namespace nlms;

namespace {

constexpr double kPi = 3.14159265358979323846;

template <class F>
CVec sample(const Mesh& m, F&& f) {
  CVec out(m.num_vertices());
  for (int v = 0; v < m.num_vertices(); ++v) out[v] = f(m.vertices[static_cast<std::size_t>(v)]);
  return out;
}

template <class F>
OneForm sample_form(const Mesh& m, F&& f) {
  OneForm out(m.num_vertices(), 3);
  for (int v = 0; v < m.num_vertices(); ++v) out.row(v) = f(m.vertices[static_cast<std::size_t>(v)]).transpose();
  return out;
}

double l2(const FEOperator& op, const CVec& e) { return std::sqrt(std::abs(op.integrate(e.cwiseAbs2().cast<cplx>()))); }

bool only(const Mesh& m, int v, std::uint8_t tag) { return m.vertex_tags[static_cast<std::size_t>(v)] == tag; }

}  // namespace

TEST_CASE("mesh construction") {
  const Mesh m = build_mesh(16, 8);
  CHECK(m.h_max >= 0.25);
  CHECK(m.h_max < 0.25 * 1.5);
  const Mesh r = build_mesh(32, 16);
  CHECK(std::abs(r.h_max / m.h_max - 0.5) < 0.05);
  CHECK_THROWS_AS(build_mesh(6, 8), ParameterError);
  CHECK_THROWS_AS(build_mesh(16, 2), ParameterError);
  // Faces: every tag present and every face tagged once.
  int counts[3] = {0, 0, 0};
  for (FaceTag t : m.face_tags) ++counts[static_cast<int>(t)];
  CHECK(counts[0] == counts[1]);
  CHECK(counts[2] > 0);
  CHECK(m.faces.size() == m.face_tags.size());
}

TEST_CASE("mesh text round trip") {
  const Mesh m = build_mesh(8, 4);
  std::stringstream ss;
  write_mesh(m, ss);
  const Mesh r = read_mesh(ss);
  CHECK(r.cells == m.cells);
  CHECK(r.boundary_vertices == m.boundary_vertices);
  double err = 0.0;
  for (std::size_t v = 0; v < m.vertices.size(); ++v) err = std::max(err, (m.vertices[v] - r.vertices[v]).norm());
  CHECK(err == 0.0);
  std::stringstream bad("nlms-mesh 1\nresolution 8 4 -1 1\nvertices 2\n0 0 0\n");
  CHECK_THROWS_AS(read_mesh(bad), MeshError);
}

TEST_CASE("volume converges to 2 pi at second order") {
  double err[3];
  int k = 0;
  for (int n : {8, 16, 32}) {
    const Mesh m = build_mesh(n, 4);
    const FEOperator op(m, ProductManifold{});
    err[k++] = std::abs(op.integrate(CVec::Ones(m.num_vertices())).real() - 2 * kPi);
  }
  CHECK(err[2] < err[1]);
  const double order = std::log2(err[1] / err[2]);
  CHECK(order > 1.7);
  CHECK(order < 2.3);
  // Richardson on the h^2 model lands on 2 pi.
  CHECK(std::abs((4 * (2 * kPi - err[2]) - (2 * kPi - err[1])) / 3 - 2 * kPi) < 1e-3);
}

TEST_CASE("integration") {
  const Mesh m = build_mesh(16, 8);
  const FEOperator op(m, ProductManifold{});
  CHECK(std::abs(op.integrate(sample(m, [](const Vec3& x) { return cplx(x.x()); }))) < 1e-12);

  // Gaussian bump against a tensor Gauss reference integral; mesh values are
  // Richardson-extrapolated in h^2. Width 0.2 keeps both meshes in the
  // asymptotic regime (at 0.1 the n=32 error still changes sign).
  constexpr double w = 0.2;
  auto bump = [](const Vec3& x) { return cplx(std::exp(-(x.squaredNorm()) / w)); };
  const double exact = std::pow(kPi * w, 1.5) * std::erf(1.0 / std::sqrt(w)) * (1.0 - std::exp(-1.0 / w));
  double vals[2];
  int k = 0;
  for (int n : {32, 64}) {
    const Mesh mm = build_mesh(n, n / 2);
    const FEOperator o(mm, ProductManifold{});
    vals[k++] = o.integrate(sample(mm, bump)).real();
  }
  const double rich = (4 * vals[1] - vals[0]) / 3;
  CHECK(std::abs(rich - exact) / exact < 1e-4);
}

TEST_CASE("harmonic extension") {
  const Mesh m = build_mesh(16, 8);
  const FEOperator op(m, ProductManifold{});
  const CVec one = op.harmonic_extension(CVec::Ones(m.num_boundary()));
  CHECK((one - CVec::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-12);
  const CVec x1 = sample(m, [](const Vec3& x) { return cplx(x.x()); });
  CHECK((op.harmonic_extension(op.restrict_boundary(x1)) - x1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(op.harmonic_extension(CVec::Ones(3)), ParameterError);
}

TEST_CASE("harmonic extension converges at second order") {
  auto exact = [](const Vec3& x) { return cplx(std::exp(x.x()) * std::cos(x.y())); };
  std::vector<double> errs, hs;
  for (int n : {8, 16, 32}) {
    const Mesh m = build_mesh(n, n / 2);
    const FEOperator op(m, ProductManifold{});
    const CVec u = sample(m, exact);
    errs.push_back(l2(op, op.harmonic_extension(op.restrict_boundary(u)) - u));
    hs.push_back(m.h_max);
  }
  for (int k = 0; k < 2; ++k) {
    const double order = std::log(errs[k] / errs[k + 1]) / std::log(hs[k] / hs[k + 1]);
    CHECK(order > 1.7);
    CHECK(order < 2.3);
  }
}

TEST_CASE("normal derivative") {
  const Mesh m = build_mesh(16, 8);
  const FEOperator op(m, ProductManifold{});
  const CVec x1 = sample(m, [](const Vec3& x) { return cplx(x.x()); });
  const CVec dn = op.normal_derivative(x1);
  double err = 0.0;
  for (int b = 0; b < m.num_boundary(); ++b) {
    const int v = m.boundary_vertices[static_cast<std::size_t>(b)];
    if (only(m, v, kOnCapPlus)) err = std::max(err, std::abs(dn[b] - 1.0));
    if (only(m, v, kOnCapMinus)) err = std::max(err, std::abs(dn[b] + 1.0));
    if (only(m, v, kOnLateral)) err = std::max(err, std::abs(dn[b]));
  }
  CHECK(err < 1e-12);
  CHECK(op.normal_derivative(CVec::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-12);

  std::mt19937 rng(7);
  std::normal_distribution<double> N;
  CVec f1(m.num_boundary()), f2(m.num_boundary());
  for (int b = 0; b < m.num_boundary(); ++b) {
    f1[b] = cplx(N(rng), N(rng));
    f2[b] = cplx(N(rng), N(rng));
  }
  const CVec u1 = op.harmonic_extension(f1), u2 = op.harmonic_extension(f2);
  const cplx green = (op.boundary_flux(u1).cwiseProduct(f2) - op.boundary_flux(u2).cwiseProduct(f1)).sum();
  CHECK(std::abs(green) < 1e-10 * u1.norm() * u2.norm());
}

TEST_CASE("pairing of forms") {
  const Mesh m = build_mesh(16, 8);
  const FEOperator op(m, ProductManifold{});
  const CVec x1 = sample(m, [](const Vec3& x) { return cplx(x.x()); });
  const OneForm dx1 = sample_form(m, [](const Vec3&) { return Eigen::Vector3cd(1, 0, 0); });
  const OneForm dx2 = sample_form(m, [](const Vec3&) { return Eigen::Vector3cd(0, 1, 0); });
  CHECK((op.pairing_form(dx1, x1) - CVec::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(op.pairing_form(dx2, x1).cwiseAbs().maxCoeff() < 1e-12);

  ProductManifold conf;
  conf.conformal_c = [](const Vec3& x) { return 1.5 + 0.3 * x.x(); };
  const FEOperator oc(m, conf);
  const CVec p = oc.pairing(dx1, dx1);
  double err = 0.0;
  for (int v = 0; v < m.num_vertices(); ++v)
    err = std::max(err, std::abs(p[v] - 1.0 / (1.5 + 0.3 * m.vertices[static_cast<std::size_t>(v)].x())));
  CHECK(err < 1e-14);
}

TEST_CASE("codifferential") {
  const Mesh m = build_mesh(16, 8);
  const FEOperator op(m, ProductManifold{});
  const OneForm dx1 = sample_form(m, [](const Vec3&) { return Eigen::Vector3cd(1, 0, 0); });
  const OneForm x1dx1 = sample_form(m, [](const Vec3& x) { return Eigen::Vector3cd(x.x(), 0, 0); });
  CHECK(op.codifferential(dx1).cwiseAbs().maxCoeff() < 1e-11);
  CHECK((op.codifferential(x1dx1) + CVec::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-11);
}

TEST_CASE("codifferential adjointness for zero-trace test functions") {
  const Mesh m = build_mesh(16, 8);
  ProductManifold M;
  M.transversal = TransversalManifold::conformal_bump();
  const FEOperator op(m, M);
  const OneForm A = sample_form(m, [](const Vec3& x) {
    return Eigen::Vector3cd(cplx(std::sin(x.y()), x.x()), cplx(x.z() * x.x(), 0.3), cplx(0.2, std::cos(x.x())));
  });
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> U(-1, 1);
  CVec phi = CVec::Zero(m.num_vertices());
  for (int v : m.interior_vertices) phi[v] = cplx(U(rng), U(rng));
  // Oracle: cellwise exact integral of <A, d phi>_g for P1 fields with the
  // centroid metric, computed independently of the operator.
  cplx lhs = 0.0;
  for (const auto& c : m.cells) {
    Mat3 D;
    const Vec3& p0 = m.vertices[static_cast<std::size_t>(c[0])];
    for (int k = 0; k < 3; ++k) D.col(k) = m.vertices[static_cast<std::size_t>(c[k + 1])] - p0;
    const Mat3 Dinv = D.inverse();
    Eigen::Vector3cd gphi = Eigen::Vector3cd::Zero();
    for (int k = 0; k < 3; ++k) gphi += (phi[c[k + 1]] - phi[c[0]]) * Dinv.row(k).transpose().cast<cplx>();
    Eigen::Vector3cd Abar = Eigen::Vector3cd::Zero();
    Vec3 centroid = Vec3::Zero();
    for (int v : c) {
      Abar += A.row(v).transpose();
      centroid += m.vertices[static_cast<std::size_t>(v)];
    }
    Abar /= 4.0;
    centroid /= 4.0;
    const Mat3 g = M.metric(centroid);
    lhs += std::sqrt(g.determinant()) * D.determinant() / 6.0 *
           (Abar.transpose() * g.inverse().cast<cplx>() * gphi)(0, 0);
  }
  const cplx rhs = op.integrate(op.codifferential(A).cwiseProduct(phi));
  CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
}

TEST_CASE("Leibniz residual of the codifferential decays like h") {
  auto Afn = [](const Vec3& x) { return Eigen::Vector3cd(std::cos(x.y()), x.x() * x.z(), std::sin(x.x())); };
  auto vfn = [](const Vec3& x) { return cplx(std::exp(0.5 * x.x()) * std::cos(x.z())); };
  std::vector<double> res;
  for (int n : {8, 16, 32}) {
    const Mesh m = build_mesh(n, n / 2);
    const FEOperator op(m, ProductManifold{});
    const OneForm A = sample_form(m, Afn);
    const CVec v = sample(m, vfn);
    OneForm Av = A;
    for (int k = 0; k < m.num_vertices(); ++k) Av.row(k) *= v[k];
    // Interior vertices only: the lumped boundary rows carry an O(1) trace error.
    CVec r = op.codifferential(Av) - op.codifferential(A).cwiseProduct(v) + op.pairing_form(A, v);
    for (int b : m.boundary_vertices) r[b] = 0.0;
    res.push_back(l2(op, r));
  }
  CHECK(res[1] < res[0]);
  CHECK(res[2] < res[1]);
  CHECK(std::log2(res[1] / res[2]) > 0.8);
}

TEST_CASE("assembly determinism and metric consistency") {
  const Mesh m = build_mesh(16, 8);
  ProductManifold flat;
  ProductManifold unit_c;
  unit_c.conformal_c = [](const Vec3&) { return 1.0; };
  const SpMat a = assemble_stiffness(m, flat, Exec::Serial);
  const SpMat b = assemble_stiffness(m, unit_c, Exec::Serial);
  const SpMat c = assemble_stiffness(m, flat, Exec::Parallel);
  CHECK(a.nonZeros() == b.nonZeros());
  bool same_ab = true, same_ac = true;
  for (Eigen::Index k = 0; k < a.nonZeros(); ++k) {
    same_ab = same_ab && a.valuePtr()[k] == b.valuePtr()[k];
    same_ac = same_ac && a.valuePtr()[k] == c.valuePtr()[k];
  }
  CHECK(same_ab);
  CHECK(same_ac);
  // Symmetric, constants in the kernel.
  CHECK((SpMat(a.transpose()) - a).norm() < 1e-13 * a.norm());
  CHECK((a * RVec::Ones(m.num_vertices())).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("resolution budget") {
  CHECK_NOTHROW(check_resolution(8.0, 0.05, "test"));
  CHECK_THROWS_AS(check_resolution(16.0, 0.05, "test"), ResolutionError);
}
