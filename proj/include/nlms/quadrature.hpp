#pragma once

#include <vector>

namespace nlms {

struct QuadratureRule {
  std::vector<double> x;
  std::vector<double> w;
};

// n-point Gauss-Legendre rule on [a, b] (Golub-Welsch).
QuadratureRule gauss_legendre(int n, double a, double b);

// Composite trapezoid weights on a uniform grid of n points with spacing h.
std::vector<double> trapezoid_weights(int n, double h);

}  // namespace nlms
