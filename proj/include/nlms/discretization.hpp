#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <complex>
#include <iosfwd>
#include <memory>
#include <mutex>

#include "nlms/mesh.hpp"
#include "nlms/parallel.hpp"

namespace nlms {

using cplx = std::complex<double>;
using CVec = Eigen::VectorXcd;
using RVec = Eigen::VectorXd;
// Per-vertex covector components (dx1, dx2, dx3).
using OneForm = Eigen::Matrix<cplx, Eigen::Dynamic, 3>;
using SpMat = Eigen::SparseMatrix<double>;
using SpMatC = Eigen::SparseMatrix<cplx>;

// Refuse oscillatory work when the wavelength 2 pi / s is not above 10 h.
void check_resolution(double s, double h, const char* what);
double max_resolved_s(double h);

// P1 discretization of -Delta_g on a mesh: stiffness with centroid metric,
// lumped volume and boundary masses, volume-weighted gradient recovery and a
// cached factorization of the interior stiffness block.
class FEOperator {
 public:
  FEOperator(const Mesh& mesh, const ProductManifold& manifold, Exec ex = Exec::Parallel);

  const Mesh& mesh() const { return *mesh_; }
  const ProductManifold& manifold() const { return manifold_; }
  const SpMat& stiffness() const { return K_; }
  const SpMat& stiffness_ii() const { return K_ii_; }
  const SpMat& stiffness_ib() const { return K_ib_; }
  const RVec& lumped_mass() const { return mass_; }
  const RVec& boundary_mass() const { return bmass_; }  // per boundary vertex
  const std::array<SpMat, 3>& gradient_recovery() const { return grad_; }
  // Inverse metric at each vertex.
  const std::vector<Mat3>& vertex_inverse_metric() const { return ginv_; }

  // Restrictions and prolongation between full, interior and boundary vectors.
  CVec restrict_boundary(const CVec& u) const;
  CVec restrict_interior(const CVec& u) const;
  CVec assemble(const CVec& interior, const CVec& boundary) const;

  // Solve K_ii x = b with the cached factorization.
  CVec solve_interior(const CVec& b) const;
  // Discrete Dirichlet problem K u = load on interior rows with u = f on the boundary.
  CVec solve_dirichlet(const CVec& interior_load, const CVec& f) const;
  CVec harmonic_extension(const CVec& f) const;
  // Boundary rows of K u + M n: the flux functional against boundary hat functions.
  CVec boundary_flux(const CVec& u, const CVec* nodal_lower_order = nullptr) const;
  // Pointwise normal derivative: flux divided by the lumped boundary mass.
  CVec normal_derivative(const CVec& u, const CVec* nodal_lower_order = nullptr) const;
  // Nodal -Delta_h u = (K u) / m.
  CVec laplacian(const CVec& u) const;

  OneForm gradient(const CVec& u) const;
  // <A, B>_g at vertices.
  CVec pairing(const OneForm& A, const OneForm& B) const;
  // <A, du>_g at vertices.
  CVec pairing_form(const OneForm& A, const CVec& u) const { return pairing(A, gradient(u)); }
  // Weak d*A with lumped mass; the boundary term keeps it exact for linear A.
  CVec codifferential(const OneForm& A) const;
  cplx integrate(const CVec& f) const;
  cplx boundary_integrate(const CVec& fb) const;

  double h_max() const { return mesh_->h_max; }

 private:
  std::shared_ptr<const Mesh> mesh_;
  ProductManifold manifold_;
  SpMat K_, K_ii_, K_ib_;
  RVec mass_, bmass_;
  std::array<SpMat, 3> grad_;
  std::vector<Mat3> ginv_;
  // Per boundary face: sqrt|g| g^{-1} n_E area_E, used for <A, nu> dS.
  std::vector<Vec3> face_flux_;
  // Per cell: volume weight sqrt|g| |T| and g^{-1} grad(lambda_i) columns.
  std::vector<double> cell_weight_;
  std::vector<Eigen::Matrix<double, 3, 4>> cell_grad_;
  std::vector<Mat3> cell_ginv_;
  const Eigen::SimplicialLDLT<SpMat>& factor() const;
  mutable std::shared_ptr<Eigen::SimplicialLDLT<SpMat>> ldlt_;
  mutable std::shared_ptr<std::once_flag> ldlt_once_ = std::make_shared<std::once_flag>();
};

// Element-loop assembly of the stiffness matrix alone, for benchmarks and
// serial/parallel agreement tests.
SpMat assemble_stiffness(const Mesh& mesh, const ProductManifold& manifold, Exec ex);

void write_field_csv(std::ostream& out, const CVec& values, const std::vector<int>* ids = nullptr);

}  // namespace nlms
