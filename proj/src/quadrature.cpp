#include "nlms/quadrature.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

#include "nlms/errors.hpp"

namespace nlms {

QuadratureRule gauss_legendre(int n, double a, double b) {
  if (n < 1) throw ParameterError("gauss_legendre needs n >= 1");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double beta = k / std::sqrt(4.0 * k * k - 1.0);
    J(k, k - 1) = J(k - 1, k) = beta;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  QuadratureRule r;
  const double half = 0.5 * (b - a), mid = 0.5 * (a + b);
  for (int k = 0; k < n; ++k) {
    const double v0 = es.eigenvectors()(0, k);
    r.x.push_back(mid + half * es.eigenvalues()(k));
    r.w.push_back(2.0 * v0 * v0 * half);
  }
  return r;
}

std::vector<double> trapezoid_weights(int n, double h) {
  std::vector<double> w(static_cast<std::size_t>(n), h);
  if (n > 0) {
    w.front() *= 0.5;
    w.back() *= 0.5;
  }
  if (n == 1) w[0] = h;
  return w;
}

}  // namespace nlms
