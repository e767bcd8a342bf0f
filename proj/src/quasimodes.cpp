#include "nlms/quasimodes.hpp"

#include <cmath>
#include <map>
#include <ostream>

#include "nlms/forward.hpp"
#include "nlms/quadrature.hpp"

namespace nlms {

namespace {

constexpr cplx I1(0.0, 1.0);

// Truncated power series in y.
constexpr int kDeg = 7;
using Poly = std::array<cplx, kDeg + 1>;

Poly operator+(Poly a, const Poly& b) {
  for (int i = 0; i <= kDeg; ++i) a[i] += b[i];
  return a;
}
Poly operator-(Poly a, const Poly& b) {
  for (int i = 0; i <= kDeg; ++i) a[i] -= b[i];
  return a;
}
Poly operator*(Poly a, cplx c) {
  for (auto& x : a) x *= c;
  return a;
}
Poly operator*(const Poly& a, const Poly& b) {
  Poly c{};
  for (int i = 0; i <= kDeg; ++i)
    if (a[i] != 0.0)
      for (int j = 0; i + j <= kDeg; ++j) c[i + j] += a[i] * b[j];
  return c;
}
Poly dy(const Poly& a) {
  Poly c{};
  for (int i = 0; i < kDeg; ++i) c[i] = double(i + 1) * a[i + 1];
  return c;
}
Poly inverse(const Poly& a) {
  Poly c{};
  c[0] = 1.0 / a[0];
  for (int n = 1; n <= kDeg; ++n) {
    cplx acc = 0.0;
    for (int k = 1; k <= n; ++k) acc += a[k] * c[n - k];
    c[n] = -acc / a[0];
  }
  return c;
}
Poly constant(cplx c) {
  Poly p{};
  p[0] = c;
  return p;
}
// Natural cubic spline on a uniform grid.
class Spline {
 public:
  Spline() = default;
  Spline(double t0, double h, std::vector<double> y) : t0_(t0), h_(h), y_(std::move(y)) {
    const int n = static_cast<int>(y_.size());
    m_.assign(y_.size(), 0.0);
    if (n < 3) return;
    std::vector<double> c(y_.size(), 0.0), d(y_.size(), 0.0);
    for (int i = 1; i < n - 1; ++i) {
      const double rhs = 6.0 * (y_[i + 1] - 2.0 * y_[i] + y_[i - 1]) / (h_ * h_);
      const double denom = 4.0 - (i > 1 ? c[i - 1] : 0.0);
      c[i] = 1.0 / denom;
      d[i] = (rhs - (i > 1 ? d[i - 1] : 0.0)) / denom;
    }
    for (int i = n - 2; i >= 1; --i) m_[i] = d[i] - c[i] * (i < n - 2 ? m_[i + 1] : 0.0);
  }
  // Value and the first two derivatives, clamped to the grid.
  std::array<double, 3> operator()(double t) const {
    const int n = static_cast<int>(y_.size());
    if (n == 0) return {0.0, 0.0, 0.0};
    if (n == 1) return {y_[0], 0.0, 0.0};
    t = std::clamp(t, t0_, t0_ + h_ * (n - 1));
    int i = std::min(n - 2, static_cast<int>(std::floor((t - t0_) / h_)));
    const double a = (t0_ + (i + 1) * h_ - t) / h_, b = 1.0 - a;
    const double v = a * y_[i] + b * y_[i + 1] + ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h_ * h_ / 6.0;
    const double d1 = (y_[i + 1] - y_[i]) / h_ + ((1.0 - 3.0 * a * a) * m_[i] + (3.0 * b * b - 1.0) * m_[i + 1]) * h_ / 6.0;
    const double d2 = a * m_[i] + b * m_[i + 1];
    return {v, d1, d2};
  }

 private:
  double t0_ = 0.0, h_ = 1.0;
  std::vector<double> y_, m_;
};

// State layout: p_2..p_5, a_0..a_3, b_0..b_1.
constexpr int kP = 0, kA = 4, kB = 8, kN = 10;
using State = Eigen::Matrix<cplx, kN, 1>;

double chi_unit(double u, int deriv) {
  // 1 on [0, 1/4], 0 on [1/2, inf), quintic smoothstep in between.
  u = std::abs(u);
  if (u <= 0.25) return deriv == 0 ? 1.0 : 0.0;
  if (u >= 0.5) return 0.0;
  const double r = 4.0 * (u - 0.25);
  if (deriv == 0) return 1.0 - r * r * r * (10.0 - 15.0 * r + 6.0 * r * r);
  if (deriv == 1) return -4.0 * 30.0 * r * r * (1.0 - r) * (1.0 - r);
  return -16.0 * 60.0 * r * (1.0 - r) * (1.0 - 2.0 * r);
}

bool q_depends_on_x1(const ProductManifold& M, const ScalarField& q, const Geodesic& g) {
  if (M.unit_conformal()) return false;
  const double mid = 0.5 * (M.x1_min + M.x1_max);
  for (int i = 0; i <= 8; ++i) {
    const Vec2 x = g.at(g.t_min() + (g.t_max() - g.t_min()) * i / 8.0).x;
    const double q0 = q(Vec3(mid, x.x(), x.y()));
    for (double x1 : {M.x1_min, M.x1_max})
      if (std::abs(q(Vec3(x1, x.x(), x.y())) - q0) > 1e-10 * (1.0 + std::abs(q0))) return true;
  }
  return false;
}

}  // namespace

ScalarField conformal_bump_factor(double eps, const Vec3& center, double width) {
  if (!(width > 0.0)) throw ParameterError("conformal bump width must be positive");
  if (!(eps > -1.0)) throw ParameterError("conformal bump needs eps > -1 so that c stays positive");
  return [=](const Vec3& x) { return 1.0 + eps * smooth_bump(x, center, width); };
}

ScalarField conformal_weight(const ProductManifold& M, double h) {
  if (M.unit_conformal()) return [](const Vec3&) { return 0.0; };
  return [M, h](const Vec3& x) {
    auto u = [&](const Vec3& y) { return std::pow(M.c(y), -0.25); };
    auto flux = [&](const Vec3& y, int i) {
      Vec3 du;
      for (int j = 0; j < 3; ++j) {
        Vec3 e = Vec3::Zero();
        e[j] = h;
        du[j] = (u(y + e) - u(y - e)) / (2.0 * h);
      }
      const Mat3 g = M.metric(y);
      return std::sqrt(g.determinant()) * (g.inverse() * du)[i];
    };
    double div = 0.0;
    for (int i = 0; i < 3; ++i) {
      Vec3 e = Vec3::Zero();
      e[i] = 0.5 * h;
      div += (flux(x + e, i) - flux(x - e, i)) / h;
    }
    const double lap = div / std::sqrt(M.metric(x).determinant());
    return -std::pow(M.c(x), 1.25) * lap;
  };
}

RVec sample_field(const Mesh& mesh, const ScalarField& f) {
  RVec out(mesh.num_vertices());
  for (int i = 0; i < mesh.num_vertices(); ++i) out[i] = f(mesh.vertices[static_cast<std::size_t>(i)]);
  return out;
}

struct GaussianBeam::Tracks {
  const FermiChart* chart = nullptr;
  bool flat = true;
  bool order1 = false;
  bool has_q = false;
  std::array<Spline, 4> f;  // f_2..f_5 along t
  std::array<Spline, 2> q;  // q and dq/dy on the axis
  double t0 = 0.0, dt = 0.0;
  int k_lo = 0;
  std::vector<State> X, Xd;

  static constexpr double eps_p = 1e-4, eps_a = 1e-3, eps_b = 1e-3;

  Poly fpoly(double t, int deriv) const {
    Poly F{};
    if (deriv == 0) F[0] = 1.0;
    if (flat) return F;
    for (int j = 0; j < 4; ++j) F[j + 2] = f[static_cast<std::size_t>(j)](t)[static_cast<std::size_t>(deriv)];
    return F;
  }

  struct Metric {
    Poly invF, invF2, invF3, Ft, FyF;
  };
  Metric metric(double t) const {
    Metric m;
    const Poly F = fpoly(t, 0);
    m.invF = inverse(F);
    m.invF2 = m.invF * m.invF;
    m.invF3 = m.invF2 * m.invF;
    m.Ft = fpoly(t, 1);
    m.FyF = dy(F) * m.invF;
    return m;
  }

  static Poly phase_y(const State& X) {
    Poly p{};
    for (int j = 2; j <= kPhaseDegree; ++j) p[j - 1] = double(j) * X[kP + j - 2];
    return p;
  }
  static Poly phase_t(const State& Xd, double lead) {
    Poly p = constant(lead);
    for (int j = 2; j <= kPhaseDegree; ++j) p[j] = Xd[kP + j - 2];
    return p;
  }
  static Poly amp(const State& X, int off, int deg) {
    Poly p{};
    for (int j = 0; j <= deg; ++j) p[j] = X[off + j];
    return p;
  }

  // p_j' from the y^j coefficient of |dphi|^2 - 1, lowest order first.
  State phase_rates(double t, const State& X) const {
    const Metric m = metric(t);
    const Poly py = phase_y(X);
    const Poly py2 = py * py;
    State Xd = State::Zero();
    for (int j = 2; j <= kPhaseDegree; ++j) {
      const Poly pt = phase_t(Xd, 1.0);
      const Poly E = pt * pt * m.invF2 + py2 - constant(1.0);
      Xd[kP + j - 2] = -0.5 * E[j];
    }
    return Xd;
  }
  State phase_accel(double t, const State& X, const State& Xd) const {
    return (phase_rates(t + eps_p, X + eps_p * Xd) - phase_rates(t - eps_p, X - eps_p * Xd)) / (2.0 * eps_p);
  }

  static Poly laplace_phase(const Metric& m, const Poly& pt, const Poly& ptt, const Poly& py) {
    return ptt * m.invF2 - m.Ft * pt * m.invF3 + dy(py) + m.FyF * py;
  }
  static Poly transport(const Metric& m, const Poly& pt, const Poly& py, const Poly& lphi, const Poly& a,
                        const Poly& at) {
    return (pt * at * m.invF2 + py * dy(a)) * cplx(2.0) + lphi * a;
  }
  static Poly laplace(const Metric& m, const Poly& a, const Poly& at, const Poly& att) {
    return att * m.invF2 - m.Ft * at * m.invF3 + dy(dy(a)) + m.FyF * dy(a);
  }

  // a_j' so that T(a0) vanishes to O(y^4).
  State amplitude_rates(double t, const State& X) const {
    State Xd = phase_rates(t, X);
    const State Xdd = phase_accel(t, X, Xd);
    const Metric m = metric(t);
    const Poly py = phase_y(X), pt = phase_t(Xd, 1.0), ptt = phase_t(Xdd, 0.0);
    const Poly lphi = laplace_phase(m, pt, ptt, py);
    const Poly a = amp(X, kA, kAmplitudeDegree);
    for (int j = 0; j <= kAmplitudeDegree; ++j) {
      const Poly T = transport(m, pt, py, lphi, a, amp(Xd, kA, kAmplitudeDegree));
      Xd[kA + j] = -0.5 * T[j];
    }
    return Xd;
  }

  Poly q_poly(double t) const {
    Poly p{};
    if (!has_q) return p;
    p[0] = q[0](t)[0];
    p[1] = q[1](t)[0];
    return p;
  }

  // Full right-hand side; the corrector solves T(b) = i (Delta a0 - q a0) to O(y^2).
  State rates(double t, const State& X) const {
    State Xd = amplitude_rates(t, X);
    if (!order1) return Xd;
    const State Xdd =
        (amplitude_rates(t + eps_a, X + eps_a * Xd) - amplitude_rates(t - eps_a, X - eps_a * Xd)) / (2.0 * eps_a);
    const Metric m = metric(t);
    const Poly py = phase_y(X), pt = phase_t(Xd, 1.0), ptt = phase_t(Xdd, 0.0);
    const Poly lphi = laplace_phase(m, pt, ptt, py);
    const Poly a = amp(X, kA, kAmplitudeDegree);
    const Poly src =
        (laplace(m, a, amp(Xd, kA, kAmplitudeDegree), amp(Xdd, kA, kAmplitudeDegree)) - q_poly(t) * a) * I1;
    const Poly b = amp(X, kB, kCorrectorDegree);
    for (int j = 0; j <= kCorrectorDegree; ++j) {
      const Poly T = transport(m, pt, py, lphi, b, amp(Xd, kB, kCorrectorDegree));
      Xd[kB + j] = 0.5 * (src[j] - T[j]);
    }
    return Xd;
  }

  State second(double t, const State& X, const State& Xd) const {
    State Xdd = (rates(t + eps_b, X + eps_b * Xd) - rates(t - eps_b, X - eps_b * Xd)) / (2.0 * eps_b);
    Xdd.segment<4>(kP) = phase_accel(t, X, Xd).segment<4>(kP);
    return Xdd;
  }

  State rk4(double t, const State& X, double h) const {
    const State k1 = rates(t, X);
    const State k2 = rates(t + 0.5 * h, X + 0.5 * h * k1);
    const State k3 = rates(t + 0.5 * h, X + 0.5 * h * k2);
    const State k4 = rates(t + h, X + h * k3);
    return X + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  State step(double t, const State& X, double h) const {
    State Y = rk4(t, X, h);
    if (std::imag(Y[kP]) > 0.0 && Y.allFinite()) return Y;
    // Retry with refined steps before giving up.
    Y = X;
    constexpr int sub = 16;
    for (int i = 0; i < sub; ++i) Y = rk4(t + i * h / sub, Y, h / sub);
    if (!(std::imag(Y[kP]) > 0.0) || !Y.allFinite())
      throw ConvergenceError("Riccati solution left the Siegel domain (Im H <= 0)");
    return Y;
  }

  // Cubic Hermite interpolation of the tracks.
  void interpolate(double t, State& X_out, State& Xd_out) const {
    const int n = static_cast<int>(X.size());
    double u = (t - t0) / dt - k_lo;
    u = std::clamp(u, 0.0, double(n - 1));
    const int i = std::min(n - 2, static_cast<int>(std::floor(u)));
    const double s = u - i;
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s), h01 = s * s * (3 - 2 * s),
                 h11 = s * s * (s - 1);
    const double d00 = 6 * s * s - 6 * s, d10 = 3 * s * s - 4 * s + 1, d01 = -d00, d11 = 3 * s * s - 2 * s;
    const auto& a = X[static_cast<std::size_t>(i)];
    const auto& b = X[static_cast<std::size_t>(i + 1)];
    const auto& da = Xd[static_cast<std::size_t>(i)];
    const auto& db = Xd[static_cast<std::size_t>(i + 1)];
    X_out = h00 * a + h10 * dt * da + h01 * b + h11 * dt * db;
    Xd_out = (d00 * a + d10 * dt * da + d01 * b + d11 * dt * db) / dt;
  }
};

GaussianBeam::GaussianBeam(const Geodesic& g, const ProductManifold& M, const BeamParams& p)
    : params_(p), manifold_(M) {
  if (p.order != 0 && p.order != 1) throw ParameterError("beam order N must be 0 or 1");
  if (!(p.alpha > 0.0)) throw ParameterError("beam alpha must be positive");
  if (!(p.track_step > 0.0) || p.track_step > 0.05) throw ParameterError("track_step must be in (0, 0.05]");
  if (!is_nontangential(g)) throw ParameterError("beam geodesic must be non-tangential");
  chart_ = std::make_shared<const FermiChart>(g);
  const double rho = chart_->tube_radius();
  if (params_.delta_prime <= 0.0) params_.delta_prime = std::min(2.0 * rho, 4.0);
  if (params_.delta_prime > 2.0 * rho + 1e-12) throw ParameterError("cutoff width delta' exceeds the Fermi tube");

  auto tr = std::make_shared<Tracks>();
  tr->chart = chart_.get();
  tr->flat = chart_->flat();
  tr->order1 = p.order == 1;
  const double lo = chart_->t_lo(), hi = chart_->t_hi();
  const double table_h = 0.01;
  const int nt = static_cast<int>(std::ceil((hi - lo) / table_h));
  const double th = (hi - lo) / nt;
  if (!tr->flat) {
    // Taylor coefficients of K along the normal geodesic give f through f_yy = -K f.
    constexpr int m = 3;
    constexpr double hk = 0.04;
    Eigen::Matrix<double, 2 * m + 1, 2 * m + 1> V;
    for (int r = 0; r <= 2 * m; ++r)
      for (int c = 0; c <= 2 * m; ++c) V(r, c) = std::pow((r - m) * hk, c);
    const auto lu = V.fullPivLu();
    std::array<std::vector<double>, 4> fj;
    for (int i = 0; i <= nt; ++i) {
      const auto line = chart_->normal_line(lo + i * th, hk, m);
      Eigen::Matrix<double, 2 * m + 1, 1> kv;
      for (int r = 0; r <= 2 * m; ++r)
        kv[r] = g.manifold.gaussian_curvature(line[static_cast<std::size_t>(r)].x);
      const Eigen::Matrix<double, 2 * m + 1, 1> K = lu.solve(kv);
      fj[0].push_back(-K[0] / 2.0);
      fj[1].push_back(-K[1] / 6.0);
      fj[2].push_back((K[0] * K[0] / 2.0 - K[2]) / 12.0);
      fj[3].push_back((2.0 / 3.0 * K[0] * K[1] - K[3]) / 20.0);
    }
    for (int j = 0; j < 4; ++j) tr->f[static_cast<std::size_t>(j)] = Spline(lo, th, fj[static_cast<std::size_t>(j)]);
  }
  const ScalarField qf = conformal_weight(M);
  if (!M.unit_conformal()) {
    if (p.order == 1 && q_depends_on_x1(M, qf, chart_->geodesic()))
      throw ParameterError("the N = 1 corrector needs a conformal weight q independent of x1");
    tr->has_q = true;
    const double x1 = 0.5 * (M.x1_min + M.x1_max);
    const double hq = 1e-3;
    std::vector<double> q0, q1;
    for (int i = 0; i <= nt; ++i) {
      const double t = lo + i * th;
      auto at = [&](double y) {
        const Vec2 x = chart_->to_point(t, y);
        return qf(Vec3(x1, x.x(), x.y()));
      };
      q0.push_back(at(0.0));
      q1.push_back((at(hq) - at(-hq)) / (2.0 * hq));
    }
    tr->q[0] = Spline(lo, th, q0);
    tr->q[1] = Spline(lo, th, q1);
  }

  tr->t0 = -g.S1;
  tr->dt = p.track_step;
  tr->k_lo = static_cast<int>(std::floor((lo - tr->t0) / tr->dt));
  const int k_hi = static_cast<int>(std::ceil((hi - tr->t0) / tr->dt));
  const int n = k_hi - tr->k_lo + 1;
  tr->X.assign(static_cast<std::size_t>(n), State::Zero());
  tr->Xd.assign(static_cast<std::size_t>(n), State::Zero());
  State X0 = State::Zero();
  X0[kP] = 0.5 * I1;  // H(-S1) = 2 p_2 = i
  X0[kA] = 1.0;
  const int i0 = -tr->k_lo;
  tr->X[static_cast<std::size_t>(i0)] = X0;
  for (int i = i0; i + 1 < n; ++i) {
    const double t = tr->t0 + (i + tr->k_lo) * tr->dt;
    tr->X[static_cast<std::size_t>(i + 1)] = tr->step(t, tr->X[static_cast<std::size_t>(i)], tr->dt);
  }
  for (int i = i0; i > 0; --i) {
    const double t = tr->t0 + (i + tr->k_lo) * tr->dt;
    tr->X[static_cast<std::size_t>(i - 1)] = tr->step(t, tr->X[static_cast<std::size_t>(i)], -tr->dt);
  }
  for (int i = 0; i < n; ++i)
    tr->Xd[static_cast<std::size_t>(i)] =
        tr->rates(tr->t0 + (i + tr->k_lo) * tr->dt, tr->X[static_cast<std::size_t>(i)]);
  tracks_ = tr;
}

GaussianBeam GaussianBeam::with_carrier(double alpha, double lambda) const {
  if (!(alpha > 0.0)) throw ParameterError("beam alpha must be positive");
  GaussianBeam b = *this;
  b.params_.alpha = alpha;
  b.params_.lambda = lambda;
  return b;
}

double GaussianBeam::t_start() const { return tracks_->t0; }

std::array<GaussianBeam::Jets, 3> GaussianBeam::jets(double t) const {
  State X, Xd;
  tracks_->interpolate(t, X, Xd);
  Xd = tracks_->rates(t, X);
  const State Xdd = tracks_->second(t, X, Xd);
  std::array<Jets, 3> out{};
  const State* S[3] = {&X, &Xd, &Xdd};
  for (int d = 0; d < 3; ++d) {
    for (int j = 2; j <= kPhaseDegree; ++j) out[d].p[j] = (*S[d])[kP + j - 2];
    for (int j = 0; j <= kAmplitudeDegree; ++j) out[d].a[j] = (*S[d])[kA + j];
    for (int j = 0; j <= kCorrectorDegree; ++j) out[d].b[j] = (*S[d])[kB + j];
  }
  return out;
}

cplx GaussianBeam::H(double t) const {
  State X, Xd;
  tracks_->interpolate(t, X, Xd);
  return 2.0 * X[kP];
}

cplx GaussianBeam::a00(double t) const {
  State X, Xd;
  tracks_->interpolate(t, X, Xd);
  return X[kA];
}

cplx GaussianBeam::corrector00(double t) const {
  State X, Xd;
  tracks_->interpolate(t, X, Xd);
  return X[kB];
}

double GaussianBeam::min_imag_H() const {
  double m = INFINITY;
  for (const State& X : tracks_->X) m = std::min(m, 2.0 * std::imag(X[kP]));
  return m;
}

double GaussianBeam::cutoff(double y) const { return chi_unit(y / params_.delta_prime, 0); }

GaussianBeam::Local GaussianBeam::local(double t, double y, double s) const {
  State X, Xd;
  tracks_->interpolate(t, X, Xd);
  const cplx kk = k(s);
  cplx phi = t, phit = 1.0, phiy = 0.0;
  for (int j = kPhaseDegree; j >= 2; --j) {
    phi += X[kP + j - 2] * std::pow(y, j);
    phit += Xd[kP + j - 2] * std::pow(y, j);
    phiy += double(j) * X[kP + j - 2] * std::pow(y, j - 1);
  }
  cplx A = 0.0, At = 0.0, Ay = 0.0;
  for (int j = 0; j <= kAmplitudeDegree; ++j) {
    A += X[kA + j] * std::pow(y, j);
    At += Xd[kA + j] * std::pow(y, j);
    if (j > 0) Ay += double(j) * X[kA + j] * std::pow(y, j - 1);
  }
  if (params_.order == 1) {
    for (int j = 0; j <= kCorrectorDegree; ++j) {
      A += X[kB + j] * std::pow(y, j) / kk;
      At += Xd[kB + j] * std::pow(y, j) / kk;
      if (j > 0) Ay += double(j) * X[kB + j] * std::pow(y, j - 1) / kk;
    }
  }
  const double sgn = y < 0 ? -1.0 : 1.0;
  const double c0 = chi_unit(y / params_.delta_prime, 0);
  const double c1 = sgn * chi_unit(y / params_.delta_prime, 1) / params_.delta_prime;
  const cplx E = std::pow(s, 0.125) * std::exp(I1 * kk * phi);
  Local L;
  L.phi = phi;
  L.dphi = Vec2c(phit, phiy);
  L.v = E * A * c0;
  L.dv = Vec2c(E * (I1 * kk * phit * A + At) * c0, E * ((I1 * kk * phiy * A + Ay) * c0 + A * c1));
  return L;
}

GaussianBeam::Value GaussianBeam::evaluate(const Vec2& x, double s) const {
  Value out;
  std::vector<FermiPoint> branches;
  try {
    branches = chart_->from_point(x);
  } catch (const OutOfTubeError&) {
    return out;
  }
  for (const FermiPoint& b : branches) {
    if (std::abs(b.y) >= 0.5 * params_.delta_prime) continue;
    const Local L = local(b.t, b.y, s);
    const Mat2 J = chart_->jacobian(b.t, b.y);
    const Mat2 JinvT = J.inverse().transpose();
    out.v += L.v;
    out.grad += JinvT.cast<cplx>() * L.dv;
    ++out.branches;
  }
  return out;
}

CVec GaussianBeam::sample(const Mesh& mesh, double s, Exec ex) const {
  std::map<std::pair<double, double>, int> index;
  std::vector<Vec2> pts;
  std::vector<int> slot(static_cast<std::size_t>(mesh.num_vertices()));
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    const Vec3& x = mesh.vertices[static_cast<std::size_t>(i)];
    auto [it, fresh] = index.try_emplace({x.y(), x.z()}, static_cast<int>(pts.size()));
    if (fresh) pts.emplace_back(x.y(), x.z());
    slot[static_cast<std::size_t>(i)] = it->second;
  }
  std::vector<cplx> vals(pts.size());
  for_each_index(ex, static_cast<std::ptrdiff_t>(pts.size()),
                 [&](std::ptrdiff_t i) { vals[static_cast<std::size_t>(i)] = evaluate(pts[static_cast<std::size_t>(i)], s).v; });
  CVec out(mesh.num_vertices());
  for (int i = 0; i < mesh.num_vertices(); ++i) out[i] = vals[static_cast<std::size_t>(slot[static_cast<std::size_t>(i)])];
  return out;
}

std::vector<GaussianBeam::PhaseSample> GaussianBeam::phase_at(const Vec2& x) const {
  std::vector<PhaseSample> out;
  for (const FermiPoint& b : chart_->from_point(x)) {
    const Local L = local(b.t, b.y, 1.0);
    const Mat2 J = chart_->jacobian(b.t, b.y);
    const Vec2c dphi = J.inverse().transpose().cast<cplx>() * L.dphi;
    const Mat2 ginv = geodesic().manifold.metric(x).inverse();
    out.push_back({b.t, b.y, L.phi, ginv.cast<cplx>() * dphi});
  }
  return out;
}

ResidualReport beam_residual(const GaussianBeam& b, double s, const ResidualOptions& opt) {
  if (!(opt.dt > 0.0) || !(opt.dy > 0.0)) throw ParameterError("residual grid steps must be positive");
  check_resolution(b.params().alpha * s, std::max(opt.dt, opt.dy), "beam_residual");
  const FermiChart& chart = b.chart();
  const ProductManifold& M = b.manifold();
  const ScalarField qf = conformal_weight(M);
  // x1 nodes: one node carrying |I| unless q varies in x1.
  QuadratureRule x1q{{0.5 * (M.x1_min + M.x1_max)}, {M.x1_max - M.x1_min}};
  if (!M.unit_conformal() && q_depends_on_x1(M, qf, chart.geodesic()))
    x1q = gauss_legendre(opt.x1_nodes, M.x1_min, M.x1_max);
  const double len = M.x1_max - M.x1_min;

  const cplx k = b.k(s);
  const double norm = std::pow(s, 0.125);
  const double dp = b.delta_prime();
  const double ymax = std::min(0.5 * dp, chart.tube_radius());
  const int ny = static_cast<int>(std::floor(ymax / opt.dy));
  const int nt = static_cast<int>(std::floor((chart.t_hi() - chart.t_lo()) / opt.dt));
  const double eps_t = 1e-3;

  ResidualReport rep;
  rep.s = s;
  double r2 = 0.0, v2 = 0.0, v4 = 0.0;
  for (int it = 0; it <= nt; ++it) {
    const double t = chart.t_lo() + it * opt.dt;
    const auto J = b.jets(t);
    const auto line = chart.normal_line(t, opt.dy, ny);
    std::vector<FermiChart::NormalSample> lp, lm;
    const double tp = std::min(t + eps_t, chart.t_hi()), tm = std::max(t - eps_t, chart.t_lo());
    if (!chart.flat()) {
      lp = chart.normal_line(tp, opt.dy, ny);
      lm = chart.normal_line(tm, opt.dy, ny);
    }
    const double tw = (it == 0 || it == nt) ? 0.5 : 1.0;
    for (int iy = -ny; iy <= ny; ++iy) {
      const std::size_t idx = static_cast<std::size_t>(iy + ny);
      const auto& ns = line[idx];
      if (!TransversalManifold::inside(ns.x)) continue;
      const double y = iy * opt.dy;
      const double f = ns.f, fy = ns.f_y;
      const double ft = chart.flat() ? 0.0 : (lp[idx].f - lm[idx].f) / (tp - tm);
      cplx phi = t, pt = 1.0, ptt = 0.0, py = 0.0, pyy = 0.0;
      for (int j = 2; j <= kPhaseDegree; ++j) {
        phi += J[0].p[j] * std::pow(y, j);
        pt += J[1].p[j] * std::pow(y, j);
        ptt += J[2].p[j] * std::pow(y, j);
        py += double(j) * J[0].p[j] * std::pow(y, j - 1);
        pyy += double(j * (j - 1)) * J[0].p[j] * std::pow(y, j - 2);
      }
      // Amplitude and its y-derivatives, indexed by the order of t-derivative.
      std::array<cplx, 3> A{}, Ay{}, Ayy{};
      for (int d = 0; d < 3; ++d) {
        for (int j = 0; j <= kAmplitudeDegree; ++j) {
          A[d] += J[d].a[j] * std::pow(y, j);
          if (j > 0) Ay[d] += double(j) * J[d].a[j] * std::pow(y, j - 1);
          if (j > 1) Ayy[d] += double(j * (j - 1)) * J[d].a[j] * std::pow(y, j - 2);
        }
        if (b.params().order == 1)
          for (int j = 0; j <= kCorrectorDegree; ++j) {
            A[d] += J[d].b[j] * std::pow(y, j) / k;
            if (j > 0) Ay[d] += double(j) * J[d].b[j] * std::pow(y, j - 1) / k;
          }
      }
      const double sg = y < 0 ? -1.0 : 1.0;
      const double c0 = chi_unit(y / dp, 0), c1 = sg * chi_unit(y / dp, 1) / dp, c2 = chi_unit(y / dp, 2) / (dp * dp);
      const cplx W = A[0] * c0, Wt = A[1] * c0, Wtt = A[2] * c0;
      const cplx Wy = Ay[0] * c0 + A[0] * c1;
      const cplx Wyy = Ayy[0] * c0 + 2.0 * Ay[0] * c1 + A[0] * c2;
      const double f2 = f * f;
      const cplx E = pt * pt / f2 + py * py - 1.0;
      const cplx lphi = ptt / f2 - ft * pt / (f2 * f) + pyy + fy / f * py;
      const cplx T = 2.0 * (pt * Wt / f2 + py * Wy) + lphi * W;
      const cplx LW = Wtt / f2 - ft * Wt / (f2 * f) + Wyy + fy / f * Wy;
      const double mod = norm * std::exp(-std::imag(k * phi));
      const double wgt = tw * opt.dt * opt.dy * f;
      const cplx base = k * k * E * W - I1 * k * T - LW;
      for (std::size_t q = 0; q < x1q.x.size(); ++q) {
        const double qv = M.unit_conformal() ? 0.0 : qf(Vec3(x1q.x[q], ns.x.x(), ns.x.y()));
        r2 += x1q.w[q] * wgt * std::norm(mod * (base + qv * W));
      }
      const double vv = std::norm(mod * W);
      v2 += len * wgt * vv;
      v4 += len * wgt * vv * vv;
      ++rep.grid_points;
    }
  }
  rep.residual = std::sqrt(r2);
  rep.v_l2 = std::sqrt(v2);
  rep.v_l4 = std::pow(v4, 0.25);
  return rep;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ParameterError("slope fit needs two or more points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw ParameterError("slope fit needs positive values");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

ResidualSweep residual_sweep(const GaussianBeam& b, const std::vector<double>& s_list, const ResidualOptions& opt) {
  ResidualSweep out;
  std::vector<double> r;
  for (double s : s_list) {
    out.reports.push_back(beam_residual(b, s, opt));
    r.push_back(out.reports.back().residual);
  }
  out.slope = loglog_slope(s_list, r);
  return out;
}

double tube_mass_fraction(const GaussianBeam& b, double s, double width, const ResidualOptions& opt) {
  const FermiChart& chart = b.chart();
  const double ymax = std::min(0.5 * b.delta_prime(), chart.tube_radius());
  const int ny = static_cast<int>(std::floor(ymax / opt.dy));
  const int nt = static_cast<int>(std::floor((chart.t_hi() - chart.t_lo()) / opt.dt));
  double inside = 0.0, outside = 0.0;
  for (int it = 0; it <= nt; ++it) {
    const double t = chart.t_lo() + it * opt.dt;
    const auto line = chart.normal_line(t, opt.dy, ny);
    for (int iy = -ny; iy <= ny; ++iy) {
      const auto& ns = line[static_cast<std::size_t>(iy + ny)];
      if (!TransversalManifold::inside(ns.x)) continue;
      const double y = iy * opt.dy;
      const double m = std::norm(b.local(t, y, s).v) * ns.f;
      (std::abs(y) > width ? outside : inside) += m;
    }
  }
  return outside / (inside + outside);
}

CGOHarmonic build_cgo(const FEOperator& op, const GaussianBeam& b, int sign, double s) {
  if (sign != 1 && sign != -1) throw ParameterError("CGO sign must be +1 or -1");
  check_resolution(b.params().alpha * s, op.h_max(), "build_cgo");
  const Mesh& mesh = op.mesh();
  const ProductManifold& M = op.manifold();
  CGOHarmonic c;
  c.sign = sign;
  c.s = s;
  c.k = b.k(s);
  c.v = b.sample(mesh, s);
  const int n = mesh.num_vertices();
  CVec carrier(n), weight(n);
  for (int i = 0; i < n; ++i) {
    const Vec3& x = mesh.vertices[static_cast<std::size_t>(i)];
    carrier[i] = std::exp(double(sign) * c.k * x.x());
    weight[i] = std::pow(M.c(x), -0.25);
  }
  c.quasimode = carrier.cwiseProduct(weight).cwiseProduct(c.v);
  c.u = op.harmonic_extension(op.restrict_boundary(c.quasimode));
  c.r = c.u.cwiseQuotient(carrier.cwiseProduct(weight)) - c.v;
  const double vn = std::sqrt(std::abs(op.integrate(c.v.cwiseAbs2().cast<cplx>())));
  const double rn = std::sqrt(std::abs(op.integrate(c.r.cwiseAbs2().cast<cplx>())));
  c.remainder_rel = vn > 0.0 ? rn / vn : 0.0;
  const CVec Ku = op.stiffness().cast<cplx>() * c.u;
  RVec row_abs = RVec::Zero(n);
  const SpMat& K = op.stiffness();
  for (int j = 0; j < K.outerSize(); ++j)
    for (SpMat::InnerIterator it(K, j); it; ++it) row_abs[it.row()] += std::abs(it.value());
  const double scale = row_abs.maxCoeff() * c.u.cwiseAbs().maxCoeff();
  c.harmonic_residual = scale > 0.0 ? op.restrict_interior(Ku).cwiseAbs().maxCoeff() / scale : 0.0;
  return c;
}

QuadrupleSpec make_quadruple(const Geodesic& eta, const Geodesic& gamma, const ProductManifold& M, double s,
                             double mu, double lambda, double L, const BeamParams& base) {
  if (!(L >= 1.0)) throw ParameterError("quadruple needs L >= 1");
  const IntersectionSet X = find_intersections(gamma, eta, 1e-6);
  if (!X.boundary_warnings.empty()) throw ParameterError("geodesics intersect on the boundary");
  QuadrupleSpec q;
  BeamParams pv = base, pw = base;
  pv.alpha = 1.0;
  pv.lambda = mu;
  pw.alpha = L;
  pw.lambda = lambda;
  q.v = std::make_shared<const GaussianBeam>(eta, M, pv);
  q.w = std::make_shared<const GaussianBeam>(gamma, M, pw);
  q.manifold = M;
  q.s = s;
  q.mu = mu;
  q.lambda = lambda;
  q.L = L;
  return q;
}

QuadruplePoint quadruple_at(const QuadrupleSpec& q, const Vec3& x) {
  QuadruplePoint p;
  const Vec2 xp = x.tail<2>();
  p.v = q.v->evaluate(xp, q.s);
  p.w = q.w->evaluate(xp, q.s);
  const double cw = std::pow(q.manifold.c(x), -0.25);
  const cplx kv(q.s, q.mu), kw = q.L * cplx(q.s, q.lambda);
  p.u[0] = std::exp(kv * x.x()) * cw * p.v.v;
  p.u[1] = std::conj(std::exp(-kv * x.x()) * cw * p.v.v);
  p.u[2] = std::exp(-kw * x.x()) * cw * p.w.v;
  p.u[3] = std::conj(std::exp(kw * x.x()) * cw * p.w.v);
  return p;
}

QuadrupleReport quadruple_l1(const QuadrupleSpec& q, double h, int x1_nodes) {
  const QuadratureRule x1q = gauss_legendre(x1_nodes, q.manifold.x1_min, q.manifold.x1_max);
  const int n = static_cast<int>(std::ceil(1.0 / h));
  const double hh = 1.0 / n;
  QuadrupleReport rep;
  const cplx kv(q.s, q.mu), kw = q.L * cplx(q.s, q.lambda);
  for (double x1 : x1q.x) {
    const double carrier =
        std::abs(std::exp(kv * x1) * std::conj(std::exp(-kv * x1)) * std::exp(-kw * x1) * std::conj(std::exp(kw * x1)));
    rep.carrier_deviation = std::max(rep.carrier_deviation, std::abs(carrier - 1.0));
  }
  std::vector<Vec2> pts;
  for (int i = -n; i <= n; ++i)
    for (int j = -n; j <= n; ++j) {
      const Vec2 xp(i * hh, j * hh);
      if (TransversalManifold::inside(xp)) pts.push_back(xp);
    }
  std::vector<double> acc(pts.size(), 0.0);
  for_each_index(Exec::Parallel, static_cast<std::ptrdiff_t>(pts.size()), [&](std::ptrdiff_t i) {
    const Vec2& xp = pts[static_cast<std::size_t>(i)];
    const double dV = std::sqrt(q.v->geodesic().manifold.metric(xp).determinant()) * hh * hh;
    double a = 0.0;
    for (std::size_t m = 0; m < x1q.x.size(); ++m) {
      const Vec3 x(x1q.x[m], xp.x(), xp.y());
      const QuadruplePoint p = quadruple_at(q, x);
      const double c = q.manifold.c(x);
      a += x1q.w[m] * std::abs(p.u[0] * p.u[1] * p.u[2] * p.u[3]) * std::pow(c, 1.5) * dV;
    }
    acc[static_cast<std::size_t>(i)] = a;
  });
  for (double a : acc) rep.l1 += a;
  rep.grid_points = static_cast<int>(pts.size());
  return rep;
}

std::array<CGOHarmonic, 4> quadruple_cgo(const FEOperator& op, const QuadrupleSpec& q) {
  auto conj_all = [](CGOHarmonic c) {
    c.u = c.u.conjugate();
    c.quasimode = c.quasimode.conjugate();
    c.v = c.v.conjugate();
    c.r = c.r.conjugate();
    c.k = std::conj(c.k);
    return c;
  };
  return {build_cgo(op, *q.v, 1, q.s), conj_all(build_cgo(op, *q.v, -1, q.s)), build_cgo(op, *q.w, -1, q.s),
          conj_all(build_cgo(op, *q.w, 1, q.s))};
}

void write_beam_csv(std::ostream& out, const GaussianBeam& b, int samples) {
  out.precision(17);
  out << "t,H_re,H_im,a00_re,a00_im,a10_re,a10_im\n";
  const Geodesic& g = b.geodesic();
  for (int i = 0; i < samples; ++i) {
    const double t = -g.S1 + (g.S1 + g.S2) * i / std::max(1, samples - 1);
    const cplx H = b.H(t), a = b.a00(t), c = b.corrector00(t);
    out << t << "," << H.real() << "," << H.imag() << "," << a.real() << "," << a.imag() << "," << c.real() << ","
        << c.imag() << "\n";
  }
}

}  // namespace nlms
