#include "nlms/recovery.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "nlms/quadrature.hpp"

namespace nlms {

namespace {

constexpr double kPi = std::numbers::pi;
const cplx I1(0.0, 1.0);

double max_sv_ratio(const Eigen::MatrixXcd& M) {
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(M);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv[0] == 0.0) return INFINITY;
  const double smin = sv[sv.size() - 1];
  return smin > 0.0 ? sv[0] / smin : INFINITY;
}

}  // namespace

Extrapolation richardson(const std::vector<double>& x, const std::vector<cplx>& values, double p_default,
                         double p_min, double p_max) {
  const std::size_t n = x.size();
  if (n != values.size() || n < 2) throw ParameterError("extrapolation needs at least two matching samples");
  const double r = x[1] / x[0];
  if (!(r > 0.0) || r == 1.0) throw ParameterError("extrapolation sweep must be geometric");
  for (std::size_t k = 2; k < n; ++k)
    if (std::abs(x[k] / x[k - 1] - r) > 1e-9 * r) throw ParameterError("extrapolation sweep must be geometric");
  const double R = std::max(r, 1.0 / r);

  Extrapolation e;
  e.monotone = true;
  for (std::size_t k = 2; k < n; ++k)
    if (!(std::abs(values[k] - values[k - 1]) < std::abs(values[k - 1] - values[k - 2]))) e.monotone = false;

  double p = p_default;
  const cplx d2 = values[n - 1] - values[n - 2];
  if (n >= 3) {
    const cplx d1 = values[n - 2] - values[n - 3];
    if (std::abs(d2) > 0.0 && std::abs(d2) < std::abs(d1) && std::real(d2 * std::conj(d1)) > 0.0) {
      p = std::clamp(-std::log(std::abs(d2) / std::abs(d1)) / std::log(R), p_min, p_max);
      e.exponent_fitted = true;
    }
  }
  const double rho = std::pow(R, -p);
  e.exponent = p;
  e.limit = values[n - 1] + d2 * rho / (1.0 - rho);
  for (const cplx& v : values) e.residuals.push_back(std::abs(v - e.limit));
  return e;
}

StationaryPhaseReport rough_stationary_phase(const std::function<double(const Vec2&)>& psi,
                                             const std::function<double(const Vec2&)>& a,
                                             const std::vector<double>& s_list, const StationaryPhaseOptions& opt) {
  if (s_list.empty()) throw ParameterError("stationary phase needs an s sweep");
  if (opt.points < 3 || opt.points % 2 == 0) throw ParameterError("stationary phase grid needs an odd point count");
  const double hd = 1e-3;
  if (std::abs(psi(Vec2::Zero())) > 1e-10) throw ParameterError("phase does not vanish at the origin");
  Vec2 grad;
  Mat2 H;
  for (int i = 0; i < 2; ++i) {
    const Vec2 ei = hd * Vec2::Unit(i);
    grad[i] = (psi(ei) - psi(-ei)) / (2 * hd);
    H(i, i) = (psi(ei) - 2 * psi(Vec2::Zero()) + psi(-ei)) / (hd * hd);
  }
  const Vec2 e0 = hd * Vec2::Unit(0), e1 = hd * Vec2::Unit(1);
  H(0, 1) = H(1, 0) = (psi(e0 + e1) - psi(e0 - e1) - psi(-e0 + e1) + psi(-e0 - e1)) / (4 * hd * hd);
  if (grad.norm() > 1e-6) throw ParameterError("phase is not stationary at the origin");
  Eigen::SelfAdjointEigenSolver<Mat2> es(H);
  if (!(es.eigenvalues()[0] > 1e-8)) throw ParameterError("phase Hessian at the origin is not positive definite");

  const double h = 2.0 * opt.radius / (opt.points - 1);
  const double smax = *std::max_element(s_list.begin(), s_list.end());
  if (h * std::sqrt(smax * es.eigenvalues()[1]) > opt.resolution) {
    std::ostringstream msg;
    msg << "stationary phase grid h = " << h << " does not resolve the Gaussian at s = " << smax;
    throw ResolutionError(msg.str());
  }
  const std::ptrdiff_t np = opt.points;
  const std::ptrdiff_t total = np * np;
  std::vector<double> P(static_cast<std::size_t>(total)), Aw(static_cast<std::size_t>(total));
  for_each_index(opt.exec, total, [&](std::ptrdiff_t k) {
    const std::ptrdiff_t i = k / np, j = k % np;
    const Vec2 z(-opt.radius + h * static_cast<double>(i), -opt.radius + h * static_cast<double>(j));
    const double wi = (i == 0 || i == np - 1) ? 0.5 : 1.0;
    const double wj = (j == 0 || j == np - 1) ? 0.5 : 1.0;
    P[static_cast<std::size_t>(k)] = psi(z);
    Aw[static_cast<std::size_t>(k)] = wi * wj * h * h * a(z);
  });

  StationaryPhaseReport r;
  r.hessian = H;
  r.s = s_list;
  std::vector<cplx> vals;
  for (double s : s_list) {
    const double sum = blocked_sum(opt.exec, total, 0.0, [&](std::ptrdiff_t k) {
      return std::exp(-s * P[static_cast<std::size_t>(k)]) * Aw[static_cast<std::size_t>(k)];
    });
    r.values.push_back(s * sum);
    vals.emplace_back(s * sum);
  }
  r.closed_form = 2.0 * kPi / std::sqrt(H.determinant()) * a(Vec2::Zero());
  if (s_list.size() >= 2) {
    r.extrapolation = richardson(s_list, vals, 0.5);
    r.limit = r.extrapolation.limit.real();
    r.exponent = r.extrapolation.exponent;
  } else {
    r.limit = r.values.back();
  }
  r.relative_error = std::abs(r.limit - r.closed_form) / std::abs(r.closed_form);
  return r;
}

namespace {

// eta'(y') on the unit disk and the normal profile theta(t): 1 on [0, 1/2], 0 past 1.
double bump2(const Vec2& y, Vec2* grad) {
  const double r2 = y.squaredNorm();
  if (r2 >= 1.0) {
    *grad = Vec2::Zero();
    return 0.0;
  }
  const double q = 1.0 - r2;
  const double v = std::exp(1.0 - 1.0 / q);
  *grad = v * (-2.0 / (q * q)) * y;
  return v;
}

double smooth_step(double u, double* du) {
  // 0 for u <= 0, 1 for u >= 1.
  if (u <= 0.0) {
    *du = 0.0;
    return 0.0;
  }
  if (u >= 1.0) {
    *du = 0.0;
    return 1.0;
  }
  const double f = std::exp(-1.0 / u), g = std::exp(-1.0 / (1.0 - u));
  const double df = f / (u * u), dg = g / ((1.0 - u) * (1.0 - u));
  *du = (df * (f + g) - f * (df - dg)) / ((f + g) * (f + g));
  return f / (f + g);
}

double theta(double t, double* dt) {
  double du;
  const double v = smooth_step(2.0 * (1.0 - t), &du);
  *dt = -2.0 * du;
  return v;
}

struct PacketNode {
  Vec3 xc;      // chart coordinates
  Vec3 x;       // product coordinates
  double w;     // scaled weight: Gauss weights times sqrt det of the chart metric
  double eta;   // eta(x / l^alpha)
  Vec3 deta;    // gradient of y -> eta(y) at y = x / l^alpha
  double decay; // e^{-2 y_n}
  Mat3 ginv;
  Mat3 J;
  double yn;
};

// Nodes of the packet integral for one lambda. The scaled weights make
//   sum_nodes w f = l^{-alpha(n-1)-1} int f dV_g.
std::vector<PacketNode> packet_nodes(const BoundaryChart& chart, double lambda, const PacketOptions& opt) {
  const double la = std::pow(lambda, opt.alpha);
  if (!(la <= opt.chart_extent)) {
    std::ostringstream msg;
    msg << "packet scale lambda^alpha = " << la << " exceeds the chart extent " << opt.chart_extent;
    throw ResolutionError(msg.str());
  }
  const QuadratureRule qt = gauss_legendre(opt.tangential_nodes, -1.0, 1.0);
  const double yn_max = std::min(std::pow(lambda, opt.alpha - 1.0), 20.0);
  const QuadratureRule qn = gauss_legendre(opt.normal_nodes, 0.0, yn_max);
  // Normalize int eta'^2 = 1 with the same tangential rule.
  double norm = 0.0;
  Vec2 gdummy;
  for (std::size_t i = 0; i < qt.x.size(); ++i)
    for (std::size_t j = 0; j < qt.x.size(); ++j) {
      const double b = bump2(Vec2(qt.x[i], qt.x[j]), &gdummy);
      norm += qt.w[i] * qt.w[j] * b * b;
    }
  const double c = 1.0 / std::sqrt(norm);

  std::vector<PacketNode> nodes;
  for (std::size_t i = 0; i < qt.x.size(); ++i)
    for (std::size_t j = 0; j < qt.x.size(); ++j) {
      const Vec2 yp(qt.x[i], qt.x[j]);
      Vec2 gb;
      const double b = c * bump2(yp, &gb);
      if (b == 0.0) continue;
      gb *= c;
      for (std::size_t k = 0; k < qn.x.size(); ++k) {
        const double yn = qn.x[k];
        const double t = lambda * yn / la;
        double dth;
        const double th = theta(t, &dth);
        if (th == 0.0) continue;
        PacketNode nd;
        nd.xc = Vec3(la * yp.x(), la * yp.y(), lambda * yn);
        nd.x = chart.to_point(nd.xc);
        nd.J = chart.jacobian(nd.xc);
        const Mat3 G = chart.metric(nd.xc);
        nd.ginv = G.inverse();
        nd.w = qt.w[i] * qt.w[j] * qn.w[k] * std::sqrt(G.determinant());
        nd.eta = b * th;
        nd.deta = Vec3(gb.x() * th, gb.y() * th, b * dth);
        nd.decay = std::exp(-2.0 * yn);
        nd.yn = yn;
        nodes.push_back(nd);
      }
    }
  return nodes;
}

}  // namespace

ScalarTraceReport boundary_trace_scalar(const ProductManifold& M, const ComplexField& V, const Vec3& x0,
                                        const PacketOptions& opt) {
  if (!(opt.alpha >= 1.0 / 3.0 && opt.alpha < 0.5)) throw ParameterError("packet exponent alpha must be in [1/3, 1/2)");
  if (opt.lambdas.size() < 3) throw ParameterError("boundary trace needs at least three packet scales");
  const BoundaryChart chart(M, x0);
  ScalarTraceReport r;
  r.x0 = x0;
  r.alpha = opt.alpha;
  r.lambdas = opt.lambdas;
  const int nl = static_cast<int>(opt.lambdas.size());
  Eigen::MatrixXcd Bm(nl, 3);
  Eigen::VectorXcd rhs(nl);
  for (int l = 0; l < nl; ++l) {
    const double lam = opt.lambdas[static_cast<std::size_t>(l)];
    const std::vector<PacketNode> nodes = packet_nodes(chart, lam, opt);
    cplx f = 0.0;
    double mass = 0.0, mom = 0.0;
    for (const PacketNode& nd : nodes) {
      const double dens = nd.w * nd.eta * nd.eta * nd.decay;
      f += dens * V(nd.x);
      mass += dens;
      mom += dens * nd.yn;  // l^{-1} x_n = y_n
    }
    r.scaled.push_back(f);
    r.bilinear.push_back(f * std::pow(lam, 2.0 * opt.alpha + 1.0));
    r.mass.push_back(mass);
    r.moment.push_back(mom);
    Bm(l, 0) = mass;
    Bm(l, 1) = lam * mom;
    Bm(l, 2) = std::pow(lam, 2.0 * opt.alpha) * mass;
    rhs[l] = f;
  }
  const Eigen::VectorXcd c = Bm.colPivHouseholderQr().solve(rhs);
  r.value = c[0];
  r.d_xn = c[1];
  r.d_nu = -c[1];
  r.condition = max_sv_ratio(Bm);
  const double scale = std::max(rhs.norm(), 1e-300);
  r.fit_residual = rhs.norm() > 0.0 ? (Bm * c - rhs).norm() / scale : 0.0;
  r.low_confidence = r.fit_residual > 1e-3 || r.condition > 1e8;
  return r;
}

OneFormTraceReport boundary_trace_oneform(const ProductManifold& M, const OneFormField& A, const Vec3& x0,
                                          const PacketOptions& opt) {
  if (!(opt.alpha >= 1.0 / 3.0 && opt.alpha < 0.5)) throw ParameterError("packet exponent alpha must be in [1/3, 1/2)");
  if (opt.lambdas.size() < 2) throw ParameterError("boundary trace needs at least two packet scales");
  const BoundaryChart chart(M, x0);
  OneFormTraceReport r;
  r.x0 = x0;
  r.alpha = opt.alpha;
  r.lambdas = opt.lambdas;
  r.directions = {Vec2(1, 0), Vec2(-1, 0), Vec2(0, 1), Vec2(0, -1)};
  const int nl = static_cast<int>(opt.lambdas.size());
  const int nd = static_cast<int>(r.directions.size());
  Eigen::MatrixXcd Bm(nl * nd, 6);
  Eigen::VectorXcd rhs(nl * nd);
  r.scaled.assign(static_cast<std::size_t>(nd), {});
  for (int l = 0; l < nl; ++l) {
    const double lam = opt.lambdas[static_cast<std::size_t>(l)];
    const double la = std::pow(lam, opt.alpha);
    const std::vector<PacketNode> nodes = packet_nodes(chart, lam, opt);
    std::vector<Eigen::Vector3cd> Ac(nodes.size());
    for (std::size_t k = 0; k < nodes.size(); ++k) Ac[k] = nodes[k].J.transpose().cast<cplx>() * A(nodes[k].x);
    for (int d = 0; d < nd; ++d) {
      const Vec2 tau = r.directions[static_cast<std::size_t>(d)];
      // l^{-alpha(n-1)} B1 = l * sum w e^{-2 y_n} eta <A, eta (i / l)(tau, i) + l^{-alpha} grad eta>.
      cplx f = 0.0;
      Eigen::Vector3cd P = Eigen::Vector3cd::Zero(), Q = Eigen::Vector3cd::Zero();
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const PacketNode& n = nodes[k];
        const Eigen::Vector3cd dv =
            n.eta * (I1 / lam) * Eigen::Vector3cd(tau.x(), tau.y(), I1) + (1.0 / la) * n.deta.cast<cplx>();
        const Eigen::Vector3cd gdv = n.ginv.cast<cplx>() * dv;
        const cplx wt = lam * n.w * n.decay * n.eta;
        f += wt * (Ac[k].transpose() * gdv)(0);
        P += wt * gdv;
        Q += wt * n.yn * gdv;  // l^{-1} x_n = y_n
      }
      r.scaled[static_cast<std::size_t>(d)].push_back(f);
      const int row = l * nd + d;
      for (int c = 0; c < 3; ++c) {
        Bm(row, c) = P[c];
        Bm(row, 3 + c) = lam * Q[c];
      }
      rhs[row] = f;
    }
  }
  const Eigen::VectorXcd c = Bm.colPivHouseholderQr().solve(rhs);
  r.value = c.head<3>();
  r.d_xn = c.tail<3>();
  r.condition = max_sv_ratio(Bm);
  r.fit_residual = rhs.norm() > 0.0 ? (Bm * c - rhs).norm() / rhs.norm() : 0.0;
  if (r.condition > 1e6) {
    std::ostringstream msg;
    msg << "direction system condition " << r.condition;
    r.warning = msg.str();
  }
  return r;
}

double choose_L_times(const std::vector<std::vector<double>>& times_eta,
                      const std::vector<std::vector<double>>& times_gamma, double alpha_sep, double margin) {
  if (times_eta.empty() || times_eta.size() != times_gamma.size())
    throw ParameterError("choose_L needs matching, nonempty intersection time lists");
  const double L0 = std::isfinite(alpha_sep) ? 3.0 / alpha_sep : 2.0;
  for (double L = std::ceil(L0 - 1e-12); L < L0 + 1000.0; L += 1.0) {
    std::vector<double> vals;
    for (std::size_t r = 0; r < times_eta.size(); ++r)
      for (double t : times_eta[r])
        for (double tau : times_gamma[r]) vals.push_back(L * (tau - t) + t);
    std::sort(vals.begin(), vals.end());
    bool ok = true;
    for (std::size_t k = 1; k < vals.size(); ++k) ok = ok && vals[k] - vals[k - 1] > margin;
    if (ok) return L;
  }
  throw ParameterError("no L up to 1000 separates the phase combinations");
}

double choose_L(const Geodesic& gamma, const Geodesic& eta, const IntersectionSet& X, double margin) {
  if (X.points.empty()) throw ParameterError("choose_L needs at least one intersection");
  if (!X.boundary_warnings.empty()) throw ParameterError("geodesics meet at the boundary");
  double alpha_sep = INFINITY;
  for (std::size_t r = 0; r < X.points.size(); ++r) {
    const auto& tg = X.times_gamma[r];
    const Mat2 g = gamma.manifold.metric(X.points[r]);
    for (std::size_t m = 0; m < tg.size(); ++m)
      for (std::size_t j = m + 1; j < tg.size(); ++j) {
        const Vec2 d = gamma.at(tg[m]).v - gamma.at(tg[j]).v;
        alpha_sep = std::min(alpha_sep, std::sqrt(d.dot(g * d)));
      }
  }
  (void)eta;
  return choose_L_times(X.times_eta, X.times_gamma, alpha_sep, margin);
}

void check_zero_boundary_jet(const OneFormField& A, const ProductManifold& M, double tol) {
  const double dn = 1e-4;
  const double dtol = std::sqrt(tol);
  auto test = [&](const Vec3& xb, const Vec3& inward) {
    const double a0 = A(xb).norm();
    const double a1 = A(xb + dn * inward).norm();
    if (a0 > tol || a1 / dn > dtol) {
      std::ostringstream msg;
      msg << "A does not vanish to first order on the boundary at (" << xb.transpose() << ")";
      throw ParameterError(msg.str());
    }
  };
  for (int i = 0; i < 48; ++i) {
    const double th = 2 * kPi * i / 48;
    const Vec2 b(std::cos(th), std::sin(th));
    for (int k = 0; k <= 8; ++k) {
      const double x1 = M.x1_min + (M.x1_max - M.x1_min) * k / 8.0;
      test(Vec3(x1, b.x(), b.y()), Vec3(0.0, -b.x(), -b.y()));
    }
    for (double rad : {0.0, 0.3, 0.6, 0.9}) {
      const Vec2 q = rad * b;
      test(Vec3(M.x1_min, q.x(), q.y()), Vec3(1, 0, 0));
      test(Vec3(M.x1_max, q.x(), q.y()), Vec3(-1, 0, 0));
    }
  }
}

namespace {

struct Branch {
  cplx v;
  Vec2c grad;
  cplx phi;
  Vec2c dphi;
};

void beam_branches(const GaussianBeam& beam, const Vec2& x, double s, std::vector<Branch>& out) {
  out.clear();
  std::vector<FermiPoint> fp;
  try {
    fp = beam.chart().from_point(x);
  } catch (const OutOfTubeError&) {
    return;
  }
  for (const FermiPoint& f : fp) {
    if (std::abs(f.y) >= 0.5 * beam.delta_prime()) continue;
    const GaussianBeam::Local L = beam.local(f.t, f.y, s);
    const Eigen::Matrix2cd JinvT = beam.chart().jacobian(f.t, f.y).inverse().transpose().cast<cplx>();
    out.push_back({L.v, JinvT * L.dv, L.phi, JinvT * L.dphi});
  }
}

struct Carrier {
  cplx v = 0.0;
  Vec2c grad = Vec2c::Zero();
};

// Sum over branches of the beam with its carrier e^{-c phi}.
Carrier with_carrier(const std::vector<Branch>& bs, double c) {
  Carrier out;
  for (const Branch& b : bs) {
    const cplx e = std::exp(-c * b.phi);
    out.v += e * b.v;
    out.grad += e * (b.grad - c * b.v * b.dphi);
  }
  return out;
}

struct Site {
  Vec2 x;
  double weight;  // h^2 sqrt det g0
  int cell;
  Mat2 ginv;
};

// x1-Fourier data at one transversal site and one xi.
struct Reduced {
  Eigen::Vector3cd A = Eigen::Vector3cd::Zero();
  cplx codiff = 0.0;  // (d*A)^
  cplx V = 0.0;
};

enum class Integrand { Moment, Identity };

struct PairGeometry {
  IntersectionSet X;
  GaussianBeam eta_beam;
  GaussianBeam gamma_beam;
};

struct RawSweep {
  // raw[pair][cell][s]
  std::vector<std::vector<std::vector<cplx>>> raw;
  std::vector<Vec2> points;
  std::vector<double> t_eta, t_gamma;
  std::vector<Vec2> eta_dir, gamma_dir;
  std::vector<double> imH_eta, imH_gamma;
  std::vector<cplx> a_eta, a_gamma;
};

RawSweep raw_sweep(const OneFormField& A, const ComplexField& V, Integrand mode, const ProductManifold& M,
                   const Geodesic& gamma, const Geodesic& eta, double L,
                   const std::vector<std::pair<double, double>>& lambda_mu, const MomentOptions& opt) {
  if (!M.unit_conformal()) throw ParameterError("recovery is implemented for c = 1");
  if (!(L > 0.0)) throw ParameterError("L must be positive");
  if (opt.s_list.empty()) throw ParameterError("moment sweep needs an s list");
  if (opt.beam.order != 0) throw ParameterError("moments use order-0 beams (carriers enter as e^{-mu phi})");
  const IntersectionSet X = find_intersections(gamma, eta, 1e-6);
  if (X.points.empty()) throw ParameterError("geodesics do not intersect");
  if (!X.boundary_warnings.empty()) throw ParameterError("geodesics meet at the boundary");
  for (std::size_t r = 0; r < X.points.size(); ++r)
    if (X.times_eta[r].size() != 1 || X.times_gamma[r].size() != 1)
      throw ParameterError("an intersection is passed more than once; separate the passes first");

  BeamParams pe = opt.beam, pg = opt.beam;
  pe.alpha = 1.0;
  pe.lambda = 0.0;
  pg.alpha = L;
  pg.lambda = 0.0;
  const GaussianBeam be(eta, M, pe), bg(gamma, M, pg);

  RawSweep out;
  out.points = X.points;
  const double smax = *std::max_element(opt.s_list.begin(), opt.s_list.end());
  for (std::size_t r = 0; r < X.points.size(); ++r) {
    const double te = X.times_eta[r][0], tg = X.times_gamma[r][0];
    out.t_eta.push_back(te);
    out.t_gamma.push_back(tg);
    out.eta_dir.push_back(eta.at(te).v);
    out.gamma_dir.push_back(gamma.at(tg).v);
    out.imH_eta.push_back(be.H(te).imag());
    out.imH_gamma.push_back(bg.H(tg).imag());
    out.a_eta.push_back(be.a00(te));
    out.a_gamma.push_back(bg.a00(tg));
    const double width = 1.0 / std::sqrt(smax * std::max(out.imH_eta.back(), L * out.imH_gamma.back()));
    if (opt.h > opt.resolution * width) {
      std::ostringstream msg;
      msg << "moment grid h = " << opt.h << " does not resolve the Gaussian width " << width << " at s = " << smax;
      throw ResolutionError(msg.str());
    }
  }

  // Transversal grid, Voronoi cells around the intersection points.
  std::vector<Site> sites;
  const int n = static_cast<int>(std::ceil(1.0 / opt.h));
  for (int i = -n; i <= n; ++i)
    for (int j = -n; j <= n; ++j) {
      const Vec2 x(i * opt.h, j * opt.h);
      if (!TransversalManifold::inside(x)) continue;
      const Mat2 g = M.transversal.metric(x);
      int cell = 0;
      for (std::size_t r = 1; r < X.points.size(); ++r)
        if ((x - X.points[r]).norm() < (x - X.points[static_cast<std::size_t>(cell)]).norm()) cell = static_cast<int>(r);
      sites.push_back({x, opt.h * opt.h * std::sqrt(g.determinant()), cell, g.inverse()});
    }
  const std::ptrdiff_t ns = static_cast<std::ptrdiff_t>(sites.size());

  // Fourier reduction in x1 at every site and every xi.
  std::vector<double> xis;
  for (const auto& [lam, mu] : lambda_mu) xis.push_back(2.0 * (L * lam - mu));
  const QuadratureRule qx = gauss_legendre(opt.x1_nodes, M.x1_min, M.x1_max);
  const std::size_t nxi = xis.size();
  std::vector<Reduced> red(static_cast<std::size_t>(ns) * nxi);
  const double hd = 1e-4;
  for_each_index(opt.exec, ns, [&](std::ptrdiff_t si) {
    const Site& st = sites[static_cast<std::size_t>(si)];
    Reduced* rr = &red[static_cast<std::size_t>(si) * nxi];
    for (std::size_t q = 0; q < qx.x.size(); ++q) {
      const Vec3 x(qx.x[q], st.x.x(), st.x.y());
      Eigen::Vector3cd a = Eigen::Vector3cd::Zero();
      cplx div = 0.0;  // transversal g0-divergence of A'
      cplx vv = 0.0;
      if (A) {
        a = A(x);
        if (mode == Integrand::Identity) {
          for (int c = 0; c < 2; ++c) {
            auto flux = [&](double sg) {
              Vec2 y = st.x;
              y[c] += sg * hd;
              const Mat2 g = M.transversal.metric(y);
              const Eigen::Vector3cd ay = A(Vec3(x.x(), y.x(), y.y()));
              const Vec2c f = std::sqrt(g.determinant()) * g.inverse().cast<cplx>() * ay.tail<2>();
              return f[c];
            };
            div += (flux(1.0) - flux(-1.0)) / (2 * hd);
          }
          div /= std::sqrt(M.transversal.metric(st.x).determinant());
        }
      }
      if (V) vv = V(x);
      for (std::size_t k = 0; k < nxi; ++k) {
        const cplx e = qx.w[q] * std::exp(-I1 * xis[k] * x.x());
        rr[k].A += e * a;
        rr[k].codiff -= e * div;
        rr[k].V += e * vv;
      }
    }
    // d*A = -d_1 A_1 - div' A'; the x1 part transforms to -i xi A1^ (A vanishes on the caps).
    for (std::size_t k = 0; k < nxi; ++k) rr[k].codiff -= I1 * xis[k] * rr[k].A[0];
  });

  const std::size_t ncell = X.points.size();
  out.raw.assign(lambda_mu.size(), std::vector<std::vector<cplx>>(ncell, std::vector<cplx>(opt.s_list.size(), 0.0)));
  std::vector<std::vector<Branch>> bv(static_cast<std::size_t>(ns)), bw(static_cast<std::size_t>(ns));
  for (std::size_t is = 0; is < opt.s_list.size(); ++is) {
    const double s = opt.s_list[is];
    for_each_index(opt.exec, ns, [&](std::ptrdiff_t si) {
      beam_branches(be, sites[static_cast<std::size_t>(si)].x, s, bv[static_cast<std::size_t>(si)]);
      if (bv[static_cast<std::size_t>(si)].empty())
        bw[static_cast<std::size_t>(si)].clear();
      else
        beam_branches(bg, sites[static_cast<std::size_t>(si)].x, s, bw[static_cast<std::size_t>(si)]);
    });
    for (std::size_t k = 0; k < lambda_mu.size(); ++k) {
      const double lam = lambda_mu[k].first, mu = lambda_mu[k].second;
      const cplx c1 = 2.0 * I1 * mu - L * cplx(s, lam);
      for (std::size_t r = 0; r < ncell; ++r) {
        const Vec2 p = X.points[r];
        out.raw[k][r][is] = blocked_sum(opt.exec, ns, cplx(0.0), [&](std::ptrdiff_t si) -> cplx {
          const Site& st = sites[static_cast<std::size_t>(si)];
          if (st.cell != static_cast<int>(r)) return 0.0;
          const auto& b1 = bv[static_cast<std::size_t>(si)];
          const auto& b2 = bw[static_cast<std::size_t>(si)];
          if (b1.empty() || b2.empty()) return 0.0;
          const Carrier v = with_carrier(b1, mu);
          const Carrier w = with_carrier(b2, L * lam);
          const double vv = std::norm(v.v), ww = std::norm(w.v);
          const Vec2c dvv = (2.0 * (std::conj(v.v) * v.grad).real()).cast<cplx>();
          const Vec2c G = dvv * ww + vv * w.grad * std::conj(w.v);
          const Reduced& R = red[static_cast<std::size_t>(si) * nxi + k];
          const cplx TA = c1 * R.A[0] * vv * ww + (R.A.tail<2>().transpose() * st.ginv.cast<cplx>() * G)(0);
          cplx T = mode == Integrand::Moment ? TA : 4.0 * I1 * TA - (3.0 * I1 * R.codiff + R.V) * vv * ww;
          if (opt.phase_shift.squaredNorm() > 0.0) T *= std::exp(I1 * s * opt.phase_shift.dot(st.x - p));
          return st.weight * T;
        });
      }
    }
  }
  return out;
}

double normalization(const RawSweep& rs, std::size_t r, double L, double lambda, double mu, const Mat2& g) {
  const Vec2 a = rs.eta_dir[r], b = rs.gamma_dir[r];
  const double cs = a.dot(g * b) / std::sqrt(a.dot(g * a) * b.dot(g * b));
  const double sin2 = std::max(1.0 - cs * cs, 0.0);
  const double det = 4.0 * L * rs.imH_eta[r] * rs.imH_gamma[r] * sin2;
  if (!(det > 0.0)) throw ParameterError("geodesics are tangent at an intersection");
  return 2.0 * kPi / std::sqrt(det) * std::exp(-2.0 * mu * rs.t_eta[r] - 2.0 * L * lambda * rs.t_gamma[r]) *
         std::norm(rs.a_eta[r]) * std::norm(rs.a_gamma[r]);
}

}  // namespace

std::vector<std::vector<DirectionalMoment>> moment_sweep(const OneFormField& A, const ProductManifold& M,
                                                         const Geodesic& gamma, const Geodesic& eta, double L,
                                                         const std::vector<std::pair<double, double>>& lambda_mu,
                                                         const MomentOptions& opt) {
  if (A) check_zero_boundary_jet(A, M);
  const RawSweep rs = raw_sweep(A, ComplexField{}, Integrand::Moment, M, gamma, eta, L, lambda_mu, opt);
  std::vector<std::vector<DirectionalMoment>> out(lambda_mu.size());
  for (std::size_t k = 0; k < lambda_mu.size(); ++k)
    for (std::size_t r = 0; r < rs.points.size(); ++r) {
      DirectionalMoment m;
      m.p = rs.points[r];
      m.direction = rs.gamma_dir[r];
      m.t_eta = rs.t_eta[r];
      m.t_gamma = rs.t_gamma[r];
      m.lambda = lambda_mu[k].first;
      m.mu = lambda_mu[k].second;
      m.L = L;
      m.xi = 2.0 * (L * m.lambda - m.mu);
      m.normalization = normalization(rs, r, L, m.lambda, m.mu, M.transversal.metric(m.p));
      m.s = opt.s_list;
      m.raw = rs.raw[k][r];
      for (std::size_t is = 0; is < m.s.size(); ++is)
        m.values.push_back(m.raw[is] / (std::sqrt(m.s[is]) * L * m.normalization));
      if (m.s.size() >= 2) {
        m.extrapolation = richardson(m.s, m.values, 1.0);
        m.limit = m.extrapolation.limit;
      } else {
        m.limit = m.values.back();
      }
      out[k].push_back(m);
    }
  return out;
}

std::vector<DirectionalMoment> directional_moment(const OneFormField& A, const ProductManifold& M,
                                                  const Geodesic& gamma, const Geodesic& eta, double lambda,
                                                  double mu, double L, const MomentOptions& opt) {
  return moment_sweep(A, M, gamma, eta, L, {{lambda, mu}}, opt).front();
}

Eigen::Vector3cd solve_pairing(const std::vector<Vec2>& directions, const Eigen::VectorXcd& D, double* condition,
                               double* residual) {
  const int nd = static_cast<int>(directions.size());
  if (nd != D.size()) throw ParameterError("one moment per direction is required");
  Eigen::MatrixXcd Mx(nd, 3);
  for (int d = 0; d < nd; ++d) {
    Mx(d, 0) = -1.0;
    Mx(d, 1) = I1 * directions[static_cast<std::size_t>(d)].x();
    Mx(d, 2) = I1 * directions[static_cast<std::size_t>(d)].y();
  }
  const double cond = nd < 3 ? INFINITY : max_sv_ratio(Mx);
  if (condition) *condition = cond;
  if (!(cond < 1e8)) {
    std::ostringstream msg;
    msg << "direction system is rank deficient (condition " << cond << ")";
    throw ConditioningError(msg.str());
  }
  const Eigen::Vector3cd x = Mx.colPivHouseholderQr().solve(D);
  if (residual) *residual = D.norm() > 0.0 ? (Mx * x - D).norm() / D.norm() : 0.0;
  return x;
}

std::vector<double> uniform_xi_grid(double xi_max, double dxi) {
  if (!(xi_max > 0.0 && dxi > 0.0)) throw ParameterError("xi grid needs positive extent and spacing");
  const int n = static_cast<int>(std::lround(xi_max / dxi));
  std::vector<double> xi;
  for (int k = -n; k <= n; ++k) xi.push_back(k * dxi);
  return xi;
}

cplx inverse_fourier(const std::vector<double>& xi, const std::vector<cplx>& f_hat, double x1) {
  if (xi.size() != f_hat.size() || xi.size() < 2) throw ParameterError("inverse Fourier needs matching samples");
  const double d = xi[1] - xi[0];
  cplx sum = 0.0;
  for (std::size_t k = 0; k < xi.size(); ++k) {
    const double w = (k == 0 || k + 1 == xi.size()) ? 0.5 * d : d;
    sum += w * std::exp(I1 * xi[k] * x1) * f_hat[k];
  }
  return sum / (2.0 * kPi);
}

CovectorRecovery recover_A_point(const MomentSet& m, double x1) {
  const int nx = static_cast<int>(m.xi.size());
  if (m.D.rows() != nx || m.D.cols() != static_cast<int>(m.directions.size()))
    throw ParameterError("moment matrix does not match the xi grid and directions");
  CovectorRecovery out;
  std::vector<std::vector<cplx>> comp(3);
  for (int k = 0; k < nx; ++k) {
    double cond = 0.0, res = 0.0;
    const Eigen::Vector3cd a = solve_pairing(m.directions, m.D.row(k).transpose(), &cond, &res);
    out.condition = std::max(out.condition, cond);
    out.residual = std::max(out.residual, res);
    out.A_hat.push_back(a);
    for (int c = 0; c < 3; ++c) comp[static_cast<std::size_t>(c)].push_back(a[c]);
  }
  for (int c = 0; c < 3; ++c) out.complex_value[c] = inverse_fourier(m.xi, comp[static_cast<std::size_t>(c)], x1);
  out.A = out.complex_value.real();
  return out;
}

MomentSet collect_moments(const OneFormField& A, const ProductManifold& M, const std::vector<Geodesic>& lines,
                          const Vec2& p, const std::vector<double>& xi, double L, const MomentOptions& opt,
                          std::vector<DirectionalMoment>* details) {
  if (lines.size() < 2) throw ParameterError("need at least two lines through p");
  std::vector<std::pair<double, double>> lm;
  for (double x : xi) {
    const double lam = x / (2.0 * (2.0 * L - 1.0));
    lm.emplace_back(lam, (1.0 - L) * lam);
  }
  MomentSet ms;
  ms.p = p;
  ms.xi = xi;
  std::vector<std::vector<cplx>> cols;
  for (std::size_t i = 0; i < lines.size(); ++i)
    for (std::size_t j = 0; j < lines.size(); ++j) {
      if (i == j) continue;
      for (int orient = 0; orient < 2; ++orient) {
        const Geodesic gamma = orient == 0 ? lines[j] : lines[j].reversed();
        const auto sweep = moment_sweep(A, M, gamma, lines[i], L, lm, opt);
        std::size_t r = 0;
        for (std::size_t q = 1; q < sweep.front().size(); ++q)
          if ((sweep.front()[q].p - p).norm() < (sweep.front()[r].p - p).norm()) r = q;
        if ((sweep.front()[r].p - p).norm() > 1e-3) throw ParameterError("a line pair does not cross at p");
        std::vector<cplx> col;
        for (const auto& per_xi : sweep) {
          col.push_back(per_xi[r].limit);
          if (details) details->push_back(per_xi[r]);
        }
        ms.directions.push_back(sweep.front()[r].direction);
        cols.push_back(col);
      }
    }
  ms.D.resize(static_cast<Eigen::Index>(xi.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    for (std::size_t k = 0; k < xi.size(); ++k)
      ms.D(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c)) = cols[c][k];
  return ms;
}

VRecovery recover_V_point(const IdentityOracle& truth, const OneFormField& known_A, const ProductManifold& M,
                          const Geodesic& gamma, const Geodesic& eta, const Vec2& p, double x1,
                          const std::vector<double>& xi, double L, const MomentOptions& opt) {
  if (truth.A) check_zero_boundary_jet(truth.A, M);
  if (truth.V) check_zero_boundary_jet([&](const Vec3& x) { return Eigen::Vector3cd(truth.V(x), 0.0, 0.0); }, M);
  // The identity is linear in A, so subtracting the known A term through the
  // same quadrature is the quadrature of the difference.
  OneFormField A = truth.A;
  if (known_A) {
    if (truth.A)
      A = [&](const Vec3& x) -> Eigen::Vector3cd { return truth.A(x) - known_A(x); };
    else
      A = [&](const Vec3& x) -> Eigen::Vector3cd { return -known_A(x); };
  }
  std::vector<std::pair<double, double>> lm;
  for (double x : xi) {
    const double lam = x / (2.0 * (2.0 * L - 1.0));
    lm.emplace_back(lam, (1.0 - L) * lam);
  }
  const RawSweep rs = raw_sweep(A, truth.V, Integrand::Identity, M, gamma, eta, L, lm, opt);
  std::size_t r = 0;
  for (std::size_t q = 1; q < rs.points.size(); ++q)
    if ((rs.points[q] - p).norm() < (rs.points[r] - p).norm()) r = q;
  if ((rs.points[r] - p).norm() > 1e-3) throw ParameterError("the geodesics do not cross at p");

  VRecovery out;
  out.xi = xi;
  out.subtracted = static_cast<bool>(known_A);
  for (std::size_t k = 0; k < lm.size(); ++k) {
    const double C = normalization(rs, r, L, lm[k].first, lm[k].second, M.transversal.metric(rs.points[r]));
    std::vector<cplx> d;
    for (std::size_t is = 0; is < opt.s_list.size(); ++is)
      d.push_back(rs.raw[k][r][is] * std::sqrt(opt.s_list[is]) / C);
    const cplx lim = d.size() >= 2 ? richardson(opt.s_list, d, 1.0).limit : d.back();
    out.D.push_back(d);
    out.q_hat.push_back(-lim);
  }
  out.value = inverse_fourier(xi, out.q_hat, x1);
  return out;
}

SeparationReport separate_exponential_sums(const std::vector<double>& lambdas, const std::vector<cplx>& samples,
                                           const std::vector<double>& a_list, int degree) {
  if (lambdas.size() != samples.size()) throw ParameterError("one sample per grid point is required");
  if (a_list.empty() || degree < 0) throw ParameterError("separation needs exponents and a nonnegative degree");
  const int N = static_cast<int>(a_list.size()), P = degree + 1, m = static_cast<int>(lambdas.size());
  if (m < N * P) throw ParameterError("grid has fewer points than unknown coefficients");
  SeparationReport rep;
  double sep = INFINITY;
  for (int i = 0; i < N; ++i)
    for (int j = i + 1; j < N; ++j) sep = std::min(sep, std::abs(a_list[static_cast<std::size_t>(i)] - a_list[static_cast<std::size_t>(j)]));
  Eigen::MatrixXcd B(m, N * P);
  Eigen::VectorXcd y(m);
  for (int i = 0; i < m; ++i) {
    const double l = lambdas[static_cast<std::size_t>(i)];
    y[i] = samples[static_cast<std::size_t>(i)];
    for (int j = 0; j < N; ++j)
      for (int q = 0; q < P; ++q) B(i, j * P + q) = std::pow(l, q) * std::exp(a_list[static_cast<std::size_t>(j)] * l);
  }
  rep.condition = max_sv_ratio(B);
  const Eigen::VectorXcd c = B.colPivHouseholderQr().solve(y);
  rep.coefficients.resize(N, P);
  rep.f_values.resize(N, m);
  for (int j = 0; j < N; ++j) {
    for (int q = 0; q < P; ++q) rep.coefficients(j, q) = c[j * P + q];
    for (int i = 0; i < m; ++i) {
      cplx f = 0.0;
      for (int q = 0; q < P; ++q) f += c[j * P + q] * std::pow(lambdas[static_cast<std::size_t>(i)], q);
      rep.f_values(j, i) = f;
    }
  }
  rep.residual = y.norm() > 0.0 ? (B * c - y).norm() / y.norm() : (B * c).norm();
  if (sep < 1e-6 || rep.condition > 1e10) {
    std::ostringstream msg;
    msg << "exponents are nearly degenerate (min separation " << sep << ", condition " << rep.condition << ")";
    rep.warning = msg.str();
  }
  return rep;
}

void write_moment_csv(std::ostream& out, const std::vector<DirectionalMoment>& moments) {
  out.precision(17);
  out << "p_x,p_y,dir_x,dir_y,xi,lambda,mu,L,s,re_raw,im_raw,re_D,im_D,re_limit,im_limit\n";
  for (const DirectionalMoment& m : moments)
    for (std::size_t k = 0; k < m.s.size(); ++k)
      out << m.p.x() << "," << m.p.y() << "," << m.direction.x() << "," << m.direction.y() << "," << m.xi << ","
          << m.lambda << "," << m.mu << "," << m.L << "," << m.s[k] << "," << m.raw[k].real() << ","
          << m.raw[k].imag() << "," << m.values[k].real() << "," << m.values[k].imag() << "," << m.limit.real()
          << "," << m.limit.imag() << "\n";
}

void write_stationary_csv(std::ostream& out, const StationaryPhaseReport& r) {
  out.precision(17);
  out << "s,value,limit,closed_form\n";
  for (std::size_t k = 0; k < r.s.size(); ++k)
    out << r.s[k] << "," << r.values[k] << "," << r.limit << "," << r.closed_form << "\n";
}

}  // namespace nlms
