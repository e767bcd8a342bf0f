#include "nlms/discretization.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

namespace nlms {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct CellData {
  double weight;                         // sqrt|g| * |T|
  Eigen::Matrix<double, 3, 4> grad;      // barycentric gradients (covectors)
  Mat3 ginv;
  Eigen::Matrix4d local;                 // local stiffness
};

CellData cell_data(const Mesh& mesh, const ProductManifold& manifold, std::size_t c) {
  const auto& cell = mesh.cells[c];
  const Vec3& p0 = mesh.vertices[static_cast<std::size_t>(cell[0])];
  Mat3 D;
  for (int k = 0; k < 3; ++k) D.col(k) = mesh.vertices[static_cast<std::size_t>(cell[k + 1])] - p0;
  const double vol = D.determinant() / 6.0;
  const Mat3 Dinv = D.inverse();
  CellData out;
  for (int k = 0; k < 3; ++k) out.grad.col(k + 1) = Dinv.row(k).transpose();
  out.grad.col(0) = -(out.grad.col(1) + out.grad.col(2) + out.grad.col(3));
  Vec3 centroid = Vec3::Zero();
  for (int v : cell) centroid += mesh.vertices[static_cast<std::size_t>(v)];
  centroid /= 4.0;
  const Mat3 g = manifold.metric(centroid);
  out.ginv = g.inverse();
  out.weight = std::sqrt(g.determinant()) * vol;
  out.local = out.weight * out.grad.transpose() * out.ginv * out.grad;
  return out;
}

std::vector<CellData> all_cells(const Mesh& mesh, const ProductManifold& manifold, Exec ex) {
  std::vector<CellData> cells(mesh.cells.size());
  for_each_index(ex, static_cast<std::ptrdiff_t>(cells.size()),
                 [&](std::ptrdiff_t c) { cells[static_cast<std::size_t>(c)] = cell_data(mesh, manifold, static_cast<std::size_t>(c)); });
  return cells;
}

SpMat stiffness_from(const Mesh& mesh, const std::vector<CellData>& cells) {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(cells.size() * 16);
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) trip.emplace_back(mesh.cells[c][a], mesh.cells[c][b], cells[c].local(a, b));
  const int n = mesh.num_vertices();
  SpMat K(n, n);
  K.setFromTriplets(trip.begin(), trip.end());
  return K;
}

}  // namespace

double max_resolved_s(double h) { return 2.0 * kPi / (10.0 * h); }

void check_resolution(double s, double h, const char* what) {
  if (!(2.0 * kPi / std::abs(s) > 10.0 * h)) {
    std::ostringstream msg;
    msg << what << ": s = " << s << " is under-resolved at h = " << h << " (largest admissible s is "
        << max_resolved_s(h) << ")";
    throw ResolutionError(msg.str());
  }
}

SpMat assemble_stiffness(const Mesh& mesh, const ProductManifold& manifold, Exec ex) {
  return stiffness_from(mesh, all_cells(mesh, manifold, ex));
}

FEOperator::FEOperator(const Mesh& mesh, const ProductManifold& manifold, Exec ex)
    : mesh_(std::make_shared<Mesh>(mesh)), manifold_(manifold) {
  const Mesh& m = *mesh_;
  const int n = m.num_vertices();
  for (const Vec3& x : m.vertices)
    if (!(manifold.c(x) > 0.0)) throw ParameterError("conformal factor must be positive");

  const auto cells = all_cells(m, manifold, ex);
  K_ = stiffness_from(m, cells);

  mass_ = RVec::Zero(n);
  RVec wsum = RVec::Zero(n);
  std::array<std::vector<Eigen::Triplet<double>>, 3> gtrip;
  cell_weight_.resize(cells.size());
  cell_grad_.resize(cells.size());
  cell_ginv_.resize(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    cell_weight_[c] = cells[c].weight;
    cell_grad_[c] = cells[c].grad;
    cell_ginv_[c] = cells[c].ginv;
    for (int a = 0; a < 4; ++a) {
      const int v = m.cells[c][a];
      mass_[v] += cells[c].weight / 4.0;
      wsum[v] += cells[c].weight;
      for (int b = 0; b < 4; ++b)
        for (int d = 0; d < 3; ++d) gtrip[static_cast<std::size_t>(d)].emplace_back(v, m.cells[c][b], cells[c].weight * cells[c].grad(d, b));
    }
  }
  for (int d = 0; d < 3; ++d) {
    SpMat G(n, n);
    G.setFromTriplets(gtrip[static_cast<std::size_t>(d)].begin(), gtrip[static_cast<std::size_t>(d)].end());
    grad_[static_cast<std::size_t>(d)] = RVec(wsum.cwiseInverse()).asDiagonal() * G;
  }

  ginv_.resize(static_cast<std::size_t>(n));
  for_each_index(ex, n, [&](std::ptrdiff_t v) {
    ginv_[static_cast<std::size_t>(v)] = manifold.metric(m.vertices[static_cast<std::size_t>(v)]).inverse();
  });

  bmass_ = RVec::Zero(m.num_boundary());
  face_flux_.resize(m.faces.size());
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const auto& F = m.faces[f];
    const Vec3& a = m.vertices[static_cast<std::size_t>(F[0])];
    const Vec3& b = m.vertices[static_cast<std::size_t>(F[1])];
    const Vec3& c = m.vertices[static_cast<std::size_t>(F[2])];
    Vec3 nrm = (b - a).cross(c - a);
    const double area = 0.5 * nrm.norm();
    nrm.normalize();
    const Vec3 centroid = (a + b + c) / 3.0;
    double orient;
    switch (m.face_tags[f]) {
      case FaceTag::CapMinus: orient = -nrm.x(); break;
      case FaceTag::CapPlus: orient = nrm.x(); break;
      default: orient = nrm.y() * centroid.y() + nrm.z() * centroid.z(); break;
    }
    if (orient < 0) nrm = -nrm;
    const Mat3 g = manifold.metric(centroid);
    const Mat3 gi = g.inverse();
    const double sg = std::sqrt(g.determinant());
    face_flux_[f] = sg * area * (gi * nrm);
    const double area_g = std::sqrt(nrm.dot(gi * nrm)) * sg * area;
    for (int v : F) bmass_[m.boundary_index[static_cast<std::size_t>(v)]] += area_g / 3.0;
  }

  std::vector<Eigen::Triplet<double>> tii, tib;
  for (int col = 0; col < K_.outerSize(); ++col)
    for (SpMat::InnerIterator it(K_, col); it; ++it) {
      const int ri = m.interior_index[static_cast<std::size_t>(it.row())];
      if (ri < 0) continue;
      const int ci = m.interior_index[static_cast<std::size_t>(it.col())];
      if (ci >= 0) tii.emplace_back(ri, ci, it.value());
      else tib.emplace_back(ri, m.boundary_index[static_cast<std::size_t>(it.col())], it.value());
    }
  K_ii_.resize(m.num_interior(), m.num_interior());
  K_ii_.setFromTriplets(tii.begin(), tii.end());
  K_ib_.resize(m.num_interior(), m.num_boundary());
  K_ib_.setFromTriplets(tib.begin(), tib.end());
}

const Eigen::SimplicialLDLT<SpMat>& FEOperator::factor() const {
  std::call_once(*ldlt_once_, [this] {
    auto f = std::make_shared<Eigen::SimplicialLDLT<SpMat>>();
    f->compute(K_ii_);
    ldlt_ = f;
  });
  if (ldlt_->info() != Eigen::Success) throw ConvergenceError("factorization of the interior stiffness failed");
  return *ldlt_;
}

CVec FEOperator::restrict_boundary(const CVec& u) const {
  CVec out(mesh_->num_boundary());
  for (int k = 0; k < mesh_->num_boundary(); ++k) out[k] = u[mesh_->boundary_vertices[static_cast<std::size_t>(k)]];
  return out;
}

CVec FEOperator::restrict_interior(const CVec& u) const {
  CVec out(mesh_->num_interior());
  for (int k = 0; k < mesh_->num_interior(); ++k) out[k] = u[mesh_->interior_vertices[static_cast<std::size_t>(k)]];
  return out;
}

CVec FEOperator::assemble(const CVec& interior, const CVec& boundary) const {
  CVec u(mesh_->num_vertices());
  for (int k = 0; k < mesh_->num_interior(); ++k) u[mesh_->interior_vertices[static_cast<std::size_t>(k)]] = interior[k];
  for (int k = 0; k < mesh_->num_boundary(); ++k) u[mesh_->boundary_vertices[static_cast<std::size_t>(k)]] = boundary[k];
  return u;
}

CVec FEOperator::solve_interior(const CVec& b) const {
  const auto& F = factor();
  const RVec re = F.solve(RVec(b.real()));
  const RVec im = F.solve(RVec(b.imag()));
  CVec x(b.size());
  x.real() = re;
  x.imag() = im;
  return x;
}

CVec FEOperator::solve_dirichlet(const CVec& interior_load, const CVec& f) const {
  if (f.size() != mesh_->num_boundary()) throw ParameterError("boundary trace has the wrong length");
  if (!f.allFinite()) throw ParameterError("boundary trace is not finite");
  const CVec rhs = interior_load - K_ib_.cast<cplx>() * f;
  return assemble(solve_interior(rhs), f);
}

CVec FEOperator::harmonic_extension(const CVec& f) const {
  return solve_dirichlet(CVec::Zero(mesh_->num_interior()), f);
}

CVec FEOperator::boundary_flux(const CVec& u, const CVec* nodal_lower_order) const {
  CVec r = K_.cast<cplx>() * u;
  if (nodal_lower_order) r += mass_.cast<cplx>().cwiseProduct(*nodal_lower_order);
  return restrict_boundary(r);
}

CVec FEOperator::normal_derivative(const CVec& u, const CVec* nodal_lower_order) const {
  return boundary_flux(u, nodal_lower_order).cwiseQuotient(bmass_.cast<cplx>());
}

CVec FEOperator::laplacian(const CVec& u) const {
  return (K_.cast<cplx>() * u).cwiseQuotient(mass_.cast<cplx>());
}

OneForm FEOperator::gradient(const CVec& u) const {
  OneForm du(u.size(), 3);
  for (int d = 0; d < 3; ++d) du.col(d) = grad_[static_cast<std::size_t>(d)].cast<cplx>() * u;
  return du;
}

CVec FEOperator::pairing(const OneForm& A, const OneForm& B) const {
  CVec out(A.rows());
  for (Eigen::Index v = 0; v < A.rows(); ++v)
    out[v] = A.row(v) * ginv_[static_cast<std::size_t>(v)].cast<cplx>() * B.row(v).transpose();
  return out;
}

CVec FEOperator::codifferential(const OneForm& A) const {
  const Mesh& m = *mesh_;
  CVec acc = CVec::Zero(m.num_vertices());
  for (std::size_t c = 0; c < m.cells.size(); ++c) {
    Eigen::Matrix<cplx, 1, 3> Abar = Eigen::Matrix<cplx, 1, 3>::Zero();
    for (int v : m.cells[c]) Abar += A.row(v);
    Abar /= 4.0;
    const Eigen::Matrix<cplx, 1, 4> w = cell_weight_[c] * (Abar * cell_ginv_[c].cast<cplx>() * cell_grad_[c].cast<cplx>());
    for (int a = 0; a < 4; ++a) acc[m.cells[c][a]] += w[a];
  }
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const auto& F = m.faces[f];
    cplx sum = 0.0;
    std::array<cplx, 3> an;
    for (int k = 0; k < 3; ++k) {
      an[static_cast<std::size_t>(k)] = A.row(F[k]) * face_flux_[f].cast<cplx>();
      sum += an[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < 3; ++k) acc[F[k]] -= (an[static_cast<std::size_t>(k)] + sum) / 12.0;
  }
  return acc.cwiseQuotient(mass_.cast<cplx>());
}

cplx FEOperator::integrate(const CVec& f) const { return mass_.cast<cplx>().dot(f); }

cplx FEOperator::boundary_integrate(const CVec& fb) const { return bmass_.cast<cplx>().dot(fb); }

void write_field_csv(std::ostream& out, const CVec& values, const std::vector<int>* ids) {
  out.precision(17);
  out << "vertex_id,re,im\n";
  for (Eigen::Index k = 0; k < values.size(); ++k)
    out << (ids ? (*ids)[static_cast<std::size_t>(k)] : static_cast<int>(k)) << "," << values[k].real() << ","
        << values[k].imag() << "\n";
}

}  // namespace nlms
