#include "nlms/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace nlms {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Catmull-Rom weights and their u-derivatives.
void cubic_weights(double u, double w[4], double dw[4]) {
  const double u2 = u * u, u3 = u2 * u;
  w[0] = 0.5 * (-u3 + 2 * u2 - u);
  w[1] = 0.5 * (3 * u3 - 5 * u2 + 2);
  w[2] = 0.5 * (-3 * u3 + 4 * u2 + u);
  w[3] = 0.5 * (u3 - u2);
  dw[0] = 0.5 * (-3 * u2 + 4 * u - 1);
  dw[1] = 0.5 * (9 * u2 - 10 * u);
  dw[2] = 0.5 * (-9 * u2 + 8 * u + 1);
  dw[3] = 0.5 * (3 * u2 - 2 * u);
}

double hermite(double p0, double m0, double p1, double m1, double u, double h) {
  const double u2 = u * u, u3 = u2 * u;
  return (2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * h * m0 + (-2 * u3 + 3 * u2) * p1 +
         (u3 - u2) * h * m1;
}

Vec2 hermite(const Vec2& p0, const Vec2& m0, const Vec2& p1, const Vec2& m1, double u, double h) {
  return {hermite(p0.x(), m0.x(), p1.x(), m1.x(), u, h), hermite(p0.y(), m0.y(), p1.y(), m1.y(), u, h)};
}

Vec2 quad_form(const std::array<Mat2, 2>& gam, const Vec2& a, const Vec2& b) {
  return {a.dot(gam[0] * b), a.dot(gam[1] * b)};
}

struct GeoState {
  Vec2 x, v, e;
};

GeoState geo_rhs(const TransversalManifold& m, const GeoState& s) {
  const auto gam = m.christoffel(s.x);
  return {s.v, -quad_form(gam, s.v, s.v), -quad_form(gam, s.v, s.e)};
}

GeoState axpy(const GeoState& s, double h, const GeoState& k) {
  return {s.x + h * k.x, s.v + h * k.v, s.e + h * k.e};
}

GeoState rk4(const TransversalManifold& m, const GeoState& s, double h) {
  const GeoState k1 = geo_rhs(m, s);
  const GeoState k2 = geo_rhs(m, axpy(s, 0.5 * h, k1));
  const GeoState k3 = geo_rhs(m, axpy(s, 0.5 * h, k2));
  const GeoState k4 = geo_rhs(m, axpy(s, h, k3));
  return {s.x + h / 6 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x),
          s.v + h / 6 * (k1.v + 2 * k2.v + 2 * k3.v + k4.v),
          s.e + h / 6 * (k1.e + 2 * k2.e + 2 * k3.e + k4.e)};
}

Vec2 unit_normal(const Mat2& g, const Vec2& w) {
  Vec2 e(-w.y(), w.x());
  e -= e.dot(g * w) / w.dot(g * w) * w;
  return e / std::sqrt(e.dot(g * e));
}

struct HalfRun {
  std::vector<GeoState> states;
  std::vector<double> t;
  bool exited = false;
};

// Integrate until the boundary is crossed; the crossing is located by
// bisection on the size of the last step.
HalfRun integrate_to_exit(const TransversalManifold& m, GeoState s, double dt, double max_length) {
  HalfRun run;
  run.states.push_back(s);
  run.t.push_back(0.0);
  double t = 0.0;
  while (t < max_length) {
    GeoState next = rk4(m, s, dt);
    if (next.x.squaredNorm() >= 1.0) {
      double lo = 0.0, hi = dt;
      while (hi - lo > 1e-13) {
        const double mid = 0.5 * (lo + hi);
        if (rk4(m, s, mid).x.squaredNorm() >= 1.0) hi = mid; else lo = mid;
      }
      GeoState exit = rk4(m, s, hi);
      exit.x /= exit.x.norm();
      if (hi > 1e-12) {
        run.states.push_back(exit);
        run.t.push_back(t + hi);
      } else {
        run.states.back().x = exit.x;
      }
      run.exited = true;
      return run;
    }
    s = next;
    t += dt;
    run.states.push_back(s);
    run.t.push_back(t);
  }
  return run;
}

std::vector<GeoState> integrate_free(const TransversalManifold& m, GeoState s, double dt, double length) {
  std::vector<GeoState> out;
  const int n = static_cast<int>(std::ceil(length / dt - 1e-9));
  for (int k = 0; k < n; ++k) {
    s = rk4(m, s, dt);
    out.push_back(s);
  }
  return out;
}

// Exponential map: geodesic with initial velocity v followed for unit time.
Vec2 exp_map(const TransversalManifold& m, const Vec2& x, const Vec2& v, Vec2* vel = nullptr) {
  const double len = std::sqrt(v.dot(m.metric(x) * v));
  if (m.kind() == MetricKind::Flat || len == 0.0) {
    if (vel) *vel = v;
    return x + v;
  }
  const int n = std::max(1, static_cast<int>(std::ceil(len / 0.005)));
  GeoState s{x, v, Vec2::Zero()};
  for (int k = 0; k < n; ++k) s = rk4(m, s, 1.0 / n);
  if (vel) *vel = s.v;
  return s.x;
}

ExitKind classify_exit(const TransversalManifold& m, const Vec2& x, const Vec2& v, double* dot) {
  const Vec2 n = m.outward_normal(x);
  *dot = v.dot(m.metric(x) * n);
  return std::abs(*dot) > kTangencyTol ? ExitKind::Nontangential : ExitKind::Tangential;
}

}  // namespace

TransversalManifold TransversalManifold::flat() { return TransversalManifold(); }

TransversalManifold TransversalManifold::conformal_bump(double beta, double sigma) {
  if (!(sigma > 0.0) || !(beta > -1.0)) throw ParameterError("conformal bump needs sigma > 0 and beta > -1");
  TransversalManifold m;
  m.kind_ = MetricKind::ConformalBump;
  m.beta_ = beta;
  m.sigma_ = sigma;
  return m;
}

TransversalManifold TransversalManifold::custom_grid(std::vector<double> xs, std::vector<double> ys,
                                                     std::vector<Mat2> values) {
  if (xs.size() < 4 || ys.size() < 4) throw ParameterError("metric grid needs at least 4x4 nodes");
  if (values.size() != xs.size() * ys.size()) throw ParameterError("metric grid size mismatch");
  for (const auto* axis : {&xs, &ys}) {
    const double h = (*axis)[1] - (*axis)[0];
    for (std::size_t i = 1; i < axis->size(); ++i)
      if (std::abs((*axis)[i] - (*axis)[i - 1] - h) > 1e-9 * std::max(1.0, std::abs(h)) || h <= 0)
        throw ParameterError("metric grid must be uniform and increasing");
  }
  if (xs.front() > -1.0 || xs.back() < 1.0 || ys.front() > -1.0 || ys.back() < 1.0)
    throw ParameterError("metric grid must cover the unit disk");
  for (const Mat2& g : values) {
    if (std::abs(g(0, 1) - g(1, 0)) > 1e-12) throw ParameterError("metric grid tensor not symmetric");
    if (g(0, 0) <= 0 || g.determinant() <= 0) throw ParameterError("metric grid tensor not positive definite");
  }
  TransversalManifold m;
  m.kind_ = MetricKind::CustomGrid;
  m.grid_ = std::make_shared<Grid>(Grid{std::move(xs), std::move(ys), std::move(values)});
  return m;
}

TransversalManifold TransversalManifold::load_grid_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open metric grid " + path);
  std::string line;
  std::getline(in, line);
  line.erase(std::remove_if(line.begin(), line.end(), ::isspace), line.end());
  if (line != "x,y,g11,g12,g22") throw ParameterError("metric grid header must be x,y,g11,g12,g22");
  std::map<std::pair<double, double>, Mat2> rows;
  std::vector<double> xs, ys;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    double x, y, a, b, c;
    if (!(ss >> x >> y >> a >> b >> c)) throw ParameterError("malformed metric grid row: " + line);
    Mat2 g;
    g << a, b, b, c;
    rows[{y, x}] = g;
    xs.push_back(x);
    ys.push_back(y);
  }
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  std::sort(ys.begin(), ys.end());
  ys.erase(std::unique(ys.begin(), ys.end()), ys.end());
  std::vector<Mat2> values;
  for (double y : ys)
    for (double x : xs) {
      auto it = rows.find({y, x});
      if (it == rows.end()) throw ParameterError("metric grid is not a full tensor grid");
      values.push_back(it->second);
    }
  return custom_grid(xs, ys, values);
}

MetricJet TransversalManifold::grid_jet(const Vec2& x) const {
  const Grid& G = *grid_;
  const double hx = G.xs[1] - G.xs[0], hy = G.ys[1] - G.ys[0];
  const int nx = static_cast<int>(G.xs.size()), ny = static_cast<int>(G.ys.size());
  auto locate = [](double v, double lo, double h, int n, int* i, double* u) {
    double p = std::clamp((v - lo) / h, 0.0, static_cast<double>(n - 1));
    int k = std::min(static_cast<int>(std::floor(p)), n - 2);
    *i = k;
    *u = p - k;
  };
  int i, j;
  double u, w;
  locate(x.x(), G.xs[0], hx, nx, &i, &u);
  locate(x.y(), G.ys[0], hy, ny, &j, &w);
  double wu[4], dwu[4], ww[4], dww[4];
  cubic_weights(u, wu, dwu);
  cubic_weights(w, ww, dww);
  MetricJet jet{Mat2::Zero(), {Mat2::Zero(), Mat2::Zero()}};
  for (int b = 0; b < 4; ++b) {
    const int jj = std::clamp(j - 1 + b, 0, ny - 1);
    for (int a = 0; a < 4; ++a) {
      const int ii = std::clamp(i - 1 + a, 0, nx - 1);
      const Mat2& g = G.values[static_cast<std::size_t>(jj * nx + ii)];
      jet.g += wu[a] * ww[b] * g;
      jet.dg[0] += dwu[a] / hx * ww[b] * g;
      jet.dg[1] += wu[a] * dww[b] / hy * g;
    }
  }
  return jet;
}

MetricJet TransversalManifold::jet(const Vec2& x) const {
  switch (kind_) {
    case MetricKind::Flat:
      return {Mat2::Identity(), {Mat2::Zero(), Mat2::Zero()}};
    case MetricKind::ConformalBump: {
      const double e = beta_ * std::exp(-x.squaredNorm() / (sigma_ * sigma_));
      const double s2 = sigma_ * sigma_;
      return {(1.0 + e) * Mat2::Identity(),
              {(-2.0 * x.x() / s2 * e) * Mat2::Identity(), (-2.0 * x.y() / s2 * e) * Mat2::Identity()}};
    }
    case MetricKind::CustomGrid:
      return grid_jet(x);
  }
  return {};
}

std::array<Mat2, 2> TransversalManifold::christoffel(const Vec2& x) const {
  std::array<Mat2, 2> gam{Mat2::Zero(), Mat2::Zero()};
  if (kind_ == MetricKind::Flat) return gam;
  const MetricJet J = jet(x);
  const Mat2 ginv = J.g.inverse();
  // lower[l](i, j) = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
  std::array<Mat2, 2> lower;
  for (int l = 0; l < 2; ++l)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j)
        lower[l](i, j) = 0.5 * (J.dg[i](j, l) + J.dg[j](i, l) - J.dg[l](i, j));
  for (int k = 0; k < 2; ++k) gam[k] = ginv(k, 0) * lower[0] + ginv(k, 1) * lower[1];
  return gam;
}

double TransversalManifold::gaussian_curvature(const Vec2& x) const {
  switch (kind_) {
    case MetricKind::Flat:
      return 0.0;
    case MetricKind::ConformalBump: {
      // g = c0 I with c0 = 1 + b; K = -Laplacian(log c0 / 2) / c0.
      const double s2 = sigma_ * sigma_;
      const double r2 = x.squaredNorm();
      const double b = beta_ * std::exp(-r2 / s2);
      const double c0 = 1.0 + b;
      const double lap_c = b * (4.0 * r2 / (s2 * s2) - 4.0 / s2);
      const double grad_c2 = 4.0 * r2 / (s2 * s2) * b * b;
      const double lap_omega = lap_c / (2.0 * c0) - grad_c2 / (2.0 * c0 * c0);
      return -lap_omega / c0;
    }
    case MetricKind::CustomGrid:
      return gaussian_curvature_fd(x);
  }
  return 0.0;
}

double TransversalManifold::gaussian_curvature_fd(const Vec2& x, double h) const {
  // R^k_{212} = d_1 Gamma^k_22 - d_2 Gamma^k_12 + Gamma^k_1m Gamma^m_22 - Gamma^k_2m Gamma^m_12
  const auto gam = christoffel(x);
  const auto gx_p = christoffel(x + Vec2(h, 0)), gx_m = christoffel(x - Vec2(h, 0));
  const auto gy_p = christoffel(x + Vec2(0, h)), gy_m = christoffel(x - Vec2(0, h));
  Vec2 R;
  for (int k = 0; k < 2; ++k) {
    const double d1 = (gx_p[k](1, 1) - gx_m[k](1, 1)) / (2 * h);
    const double d2 = (gy_p[k](0, 1) - gy_m[k](0, 1)) / (2 * h);
    double q = 0.0;
    for (int m = 0; m < 2; ++m) q += gam[k](0, m) * gam[m](1, 1) - gam[k](1, m) * gam[m](0, 1);
    R[k] = d1 - d2 + q;
  }
  const Mat2 g = metric(x);
  return (g(0, 0) * R[0] + g(0, 1) * R[1]) / g.determinant();
}

Vec2 TransversalManifold::outward_normal(const Vec2& x) const {
  const Mat2 g = metric(x);
  const Vec2 n = g.inverse() * x;
  return n / std::sqrt(n.dot(g * n));
}

Mat2 metric_at(const TransversalManifold& m, const Vec2& x) {
  if (!TransversalManifold::inside(x, 1e-12)) throw DomainError("metric_at: point outside the disk");
  return m.metric(x);
}

Mat3 ProductManifold::metric(const Vec3& x) const {
  const double cx = c(x);
  Mat3 g = Mat3::Zero();
  g(0, 0) = cx;
  g.block<2, 2>(1, 1) = cx * transversal.metric(x.tail<2>());
  return g;
}

GeodesicSample Geodesic::at(double t) const {
  if (t <= samples.front().t) return samples.front();
  if (t >= samples.back().t) return samples.back();
  auto it = std::upper_bound(samples.begin(), samples.end(), t,
                             [](double v, const GeodesicSample& s) { return v < s.t; });
  const GeodesicSample& b = *it;
  const GeodesicSample& a = *(it - 1);
  const double h = b.t - a.t;
  const double u = (t - a.t) / h;
  const auto ga = manifold.christoffel(a.x), gb = manifold.christoffel(b.x);
  GeodesicSample s;
  s.t = t;
  s.x = hermite(a.x, a.v, b.x, b.v, u, h);
  s.v = hermite(a.v, -quad_form(ga, a.v, a.v), b.v, -quad_form(gb, b.v, b.v), u, h);
  s.e = hermite(a.e, -quad_form(ga, a.v, a.e), b.e, -quad_form(gb, b.v, b.e), u, h);
  return s;
}

Geodesic Geodesic::reversed() const {
  Geodesic r = *this;
  r.samples.clear();
  for (auto it = samples.rbegin(); it != samples.rend(); ++it)
    r.samples.push_back({-it->t, it->x, -it->v, -it->e});
  std::swap(r.S1, r.S2);
  std::swap(r.exit_flags[0], r.exit_flags[1]);
  r.exit_dot = {exit_dot[1], exit_dot[0]};
  return r;
}

Geodesic shoot_geodesic(const TransversalManifold& m, const Vec2& y0, const Vec2& w, double dt,
                        double max_length) {
  if (!(dt > 0.0)) throw ParameterError("shoot_geodesic: dt must be positive");
  if (y0.squaredNorm() >= 1.0) throw DomainError("shoot_geodesic: start point must be interior");
  const Mat2 g = m.metric(y0);
  if (std::abs(std::sqrt(w.dot(g * w)) - 1.0) > 1e-8) throw ParameterError("shoot_geodesic: w must be g0-unit");
  const Vec2 e0 = unit_normal(g, w);

  HalfRun fwd = integrate_to_exit(m, {y0, w, e0}, dt, max_length);
  HalfRun bwd = integrate_to_exit(m, {y0, -w, e0}, dt, max_length);
  if (!fwd.exited || !bwd.exited) throw TrappedGeodesicError("geodesic did not exit within the arclength budget");

  Geodesic geo;
  geo.manifold = m;
  geo.dt = dt;
  for (std::size_t k = bwd.states.size(); k-- > 1;) {
    const GeoState& s = bwd.states[k];
    geo.samples.push_back({-bwd.t[k], s.x, -s.v, s.e});
  }
  for (std::size_t k = 0; k < fwd.states.size(); ++k) {
    const GeoState& s = fwd.states[k];
    geo.samples.push_back({fwd.t[k], s.x, s.v, s.e});
  }
  geo.S1 = bwd.t.back();
  geo.S2 = fwd.t.back();
  double dot0, dot1;
  geo.exit_flags[0] = classify_exit(m, geo.samples.front().x, -geo.samples.front().v, &dot0);
  geo.exit_flags[1] = classify_exit(m, geo.samples.back().x, geo.samples.back().v, &dot1);
  geo.exit_dot = {dot0, dot1};
  return geo;
}

Geodesic extend_geodesic(const Geodesic& g, double margin) {
  if (margin <= 0.0) return g;
  Geodesic out = g;
  const GeodesicSample& first = g.samples.front();
  const GeodesicSample& last = g.samples.back();
  const auto fwd = integrate_free(g.manifold, {last.x, last.v, last.e}, g.dt, margin);
  const auto bwd = integrate_free(g.manifold, {first.x, -first.v, first.e}, g.dt, margin);
  std::vector<GeodesicSample> head;
  for (std::size_t k = bwd.size(); k-- > 0;)
    head.push_back({first.t - g.dt * static_cast<double>(k + 1), bwd[k].x, -bwd[k].v, bwd[k].e});
  out.samples.insert(out.samples.begin(), head.begin(), head.end());
  for (std::size_t k = 0; k < fwd.size(); ++k)
    out.samples.push_back({last.t + g.dt * static_cast<double>(k + 1), fwd[k].x, fwd[k].v, fwd[k].e});
  return out;
}

bool is_nontangential(const Geodesic& g) {
  if (g.exit_flags[0] != ExitKind::Nontangential || g.exit_flags[1] != ExitKind::Nontangential) return false;
  for (const auto& s : g.samples) {
    if (s.t <= -g.S1 || s.t >= g.S2) continue;
    if (s.x.squaredNorm() >= 1.0) return false;
  }
  return true;
}

namespace {

struct Segment {
  Vec2 a, b;
  double ta, tb;
};

std::vector<Segment> segments_in_span(const Geodesic& g) {
  std::vector<Segment> segs;
  for (std::size_t k = 0; k + 1 < g.samples.size(); ++k) {
    const auto& a = g.samples[k];
    const auto& b = g.samples[k + 1];
    if (a.t < -g.S1 - 1e-12 || b.t > g.S2 + 1e-12) continue;
    segs.push_back({a.x, b.x, a.t, b.t});
  }
  return segs;
}

double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

// Parameters (u, w) of the crossing of two segments, if any (with slack).
bool segment_cross(const Segment& p, const Segment& q, double* u, double* w) {
  const Vec2 r = p.b - p.a, s = q.b - q.a;
  const double den = cross2(r, s);
  if (std::abs(den) < 1e-14 * r.norm() * s.norm()) return false;
  const Vec2 d = q.a - p.a;
  *u = cross2(d, s) / den;
  *w = cross2(d, r) / den;
  const double slack = 1e-6;
  return *u >= -slack && *u <= 1 + slack && *w >= -slack && *w <= 1 + slack;
}

struct Box {
  Vec2 lo, hi;
  std::size_t begin, end;
};

std::vector<Box> chunk_boxes(const std::vector<Segment>& segs, std::size_t chunk) {
  std::vector<Box> boxes;
  for (std::size_t b = 0; b < segs.size(); b += chunk) {
    Box box{Vec2::Constant(1e300), Vec2::Constant(-1e300), b, std::min(segs.size(), b + chunk)};
    for (std::size_t k = box.begin; k < box.end; ++k) {
      box.lo = box.lo.cwiseMin(segs[k].a).cwiseMin(segs[k].b);
      box.hi = box.hi.cwiseMax(segs[k].a).cwiseMax(segs[k].b);
    }
    box.lo.array() -= 1e-9;
    box.hi.array() += 1e-9;
    boxes.push_back(box);
  }
  return boxes;
}

bool overlap(const Box& a, const Box& b) {
  return a.lo.x() <= b.hi.x() && b.lo.x() <= a.hi.x() && a.lo.y() <= b.hi.y() && b.lo.y() <= a.hi.y();
}

struct Crossing {
  Vec2 p;
  double t_first, t_second;
};

std::vector<Crossing> raw_crossings(const Geodesic& g1, const Geodesic& g2, bool self, double min_sep) {
  const auto s1 = segments_in_span(g1);
  const auto s2 = segments_in_span(g2);
  const auto b1 = chunk_boxes(s1, 32), b2 = chunk_boxes(s2, 32);
  std::vector<Crossing> out;
  for (const Box& A : b1)
    for (const Box& B : b2) {
      if (!overlap(A, B)) continue;
      for (std::size_t i = A.begin; i < A.end; ++i)
        for (std::size_t j = B.begin; j < B.end; ++j) {
          if (self && (j <= i || s2[j].ta - s1[i].tb < min_sep)) continue;
          double u, w;
          if (!segment_cross(s1[i], s2[j], &u, &w)) continue;
          // Newton refinement on gamma(t) - eta(s) = 0 with interpolated curves.
          double t = s1[i].ta + u * (s1[i].tb - s1[i].ta);
          double s = s2[j].ta + w * (s2[j].tb - s2[j].ta);
          for (int it = 0; it < 30; ++it) {
            const GeodesicSample a = g1.at(t), b = g2.at(s);
            const Vec2 F = a.x - b.x;
            if (F.norm() < 1e-15) break;
            Mat2 J;
            J.col(0) = a.v;
            J.col(1) = -b.v;
            if (std::abs(J.determinant()) < 1e-14) break;
            const Vec2 d = J.fullPivLu().solve(F);
            t -= d.x();
            s -= d.y();
            if (d.norm() < 1e-15) break;
          }
          t = std::clamp(t, -g1.S1, g1.S2);
          s = std::clamp(s, -g2.S1, g2.S2);
          out.push_back({g1.at(t).x, t, s});
        }
    }
  return out;
}

IntersectionSet group_crossings(const std::vector<Crossing>& raw, double tol, bool self) {
  IntersectionSet set;
  set.tol = tol;
  const double merge = std::max(100.0 * tol, 1e-6);
  auto add_time = [merge](std::vector<double>& v, double t) {
    for (double x : v)
      if (std::abs(x - t) < merge) return;
    v.push_back(t);
  };
  for (const Crossing& c : raw) {
    if (1.0 - c.p.norm() <= tol) {
      bool dup = false;
      for (const Vec2& q : set.boundary_warnings) dup = dup || (q - c.p).norm() < merge;
      if (!dup) set.boundary_warnings.push_back(c.p);
      continue;
    }
    std::size_t r = 0;
    for (; r < set.points.size(); ++r)
      if ((set.points[r] - c.p).norm() < merge) break;
    if (r == set.points.size()) {
      set.points.push_back(c.p);
      set.times_eta.emplace_back();
      set.times_gamma.emplace_back();
    }
    add_time(set.times_gamma[r], c.t_first);
    add_time(set.times_eta[r], c.t_second);
    if (self) {
      add_time(set.times_gamma[r], c.t_second);
      add_time(set.times_eta[r], c.t_first);
    }
  }
  for (auto& v : set.times_eta) std::sort(v.begin(), v.end());
  for (auto& v : set.times_gamma) std::sort(v.begin(), v.end());
  return set;
}

}  // namespace

IntersectionSet find_intersections(const Geodesic& gamma, const Geodesic& eta, double tol) {
  return group_crossings(raw_crossings(gamma, eta, false, 0.0), tol, false);
}

IntersectionSet find_self_intersections(const Geodesic& g, double tol, double min_separation) {
  return group_crossings(raw_crossings(g, g, true, min_separation), tol, true);
}

namespace {

struct NormalState {
  Vec2 x, v;
  double f, fy;
};

NormalState normal_rhs(const TransversalManifold& m, const NormalState& s) {
  const auto gam = m.christoffel(s.x);
  return {s.v, -quad_form(gam, s.v, s.v), s.fy, -m.gaussian_curvature(s.x) * s.f};
}

NormalState normal_step(const TransversalManifold& m, const NormalState& s, double h) {
  auto ax = [](const NormalState& a, double c, const NormalState& k) {
    return NormalState{a.x + c * k.x, a.v + c * k.v, a.f + c * k.f, a.fy + c * k.fy};
  };
  const NormalState k1 = normal_rhs(m, s);
  const NormalState k2 = normal_rhs(m, ax(s, 0.5 * h, k1));
  const NormalState k3 = normal_rhs(m, ax(s, 0.5 * h, k2));
  const NormalState k4 = normal_rhs(m, ax(s, h, k3));
  return {s.x + h / 6 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x), s.v + h / 6 * (k1.v + 2 * k2.v + 2 * k3.v + k4.v),
          s.f + h / 6 * (k1.f + 2 * k2.f + 2 * k3.f + k4.f),
          s.fy + h / 6 * (k1.fy + 2 * k2.fy + 2 * k3.fy + k4.fy)};
}

constexpr double kNormalStep = 0.005;

}  // namespace

FermiChart::FermiChart(const Geodesic& g, double margin, double radius_cap) : geo_(extend_geodesic(g, margin)) {
  if (flat()) {
    rho_ = radius_cap;
    return;
  }
  // Tube radius: the normal Jacobi factor f must stay above 1/2, well before
  // neighbouring normal geodesics can focus.
  rho_ = radius_cap;
  const int nt = 48;
  for (int i = 0; i <= nt; ++i) {
    const double t = t_lo() + (t_hi() - t_lo()) * i / nt;
    const GeodesicSample s = geo_.at(t);
    for (double sign : {1.0, -1.0}) {
      NormalState st{s.x, sign * s.e, 1.0, 0.0};
      double y = 0.0;
      while (y < rho_) {
        st = normal_step(geo_.manifold, st, kNormalStep);
        y += kNormalStep;
        if (st.f < 0.5) {
          rho_ = std::min(rho_, y);
          break;
        }
      }
    }
  }
  build_seed_grid();
}

void FermiChart::build_seed_grid() {
  const int ny = static_cast<int>(std::floor(rho_ / seed_h_));
  const int nt = static_cast<int>(std::ceil((t_hi() - t_lo()) / seed_h_));
  bucket_n_ = static_cast<int>(std::ceil(-2.0 * bucket_lo_ / bucket_h_));
  buckets_.assign(static_cast<std::size_t>(bucket_n_ * bucket_n_), {});
  for (int i = 0; i <= nt; ++i) {
    const double t = std::min(t_hi(), t_lo() + i * seed_h_);
    const auto line = normal_line(t, seed_h_, ny);
    for (int k = 0; k < static_cast<int>(line.size()); ++k) {
      const Vec2& x = line[static_cast<std::size_t>(k)].x;
      const int bx = static_cast<int>(std::floor((x.x() - bucket_lo_) / bucket_h_));
      const int by = static_cast<int>(std::floor((x.y() - bucket_lo_) / bucket_h_));
      if (bx < 0 || by < 0 || bx >= bucket_n_ || by >= bucket_n_) continue;
      buckets_[static_cast<std::size_t>(by * bucket_n_ + bx)].push_back(static_cast<int>(seeds_.size()));
      seeds_.push_back({t, (k - ny) * seed_h_});
      seed_x_.push_back(x);
    }
  }
}

Vec2 FermiChart::to_point(double t, double y) const {
  const GeodesicSample s = geo_.at(t);
  if (flat()) return s.x + y * s.e;
  const double sign = y < 0 ? -1.0 : 1.0;
  const int n = static_cast<int>(std::ceil(std::abs(y) / kNormalStep));
  if (n == 0) return s.x;
  const double h = std::abs(y) / n;
  NormalState st{s.x, sign * s.e, 1.0, 0.0};
  for (int k = 0; k < n; ++k) st = normal_step(geo_.manifold, st, h);
  return st.x;
}

Mat2 FermiChart::jacobian(double t, double y) const {
  Mat2 J;
  if (flat()) {
    const GeodesicSample s = geo_.at(t);
    J.col(0) = s.v;
    J.col(1) = s.e;
    return J;
  }
  const double h = 1e-6;
  J.col(0) = (to_point(t + h, y) - to_point(t - h, y)) / (2 * h);
  J.col(1) = (to_point(t, y + h) - to_point(t, y - h)) / (2 * h);
  return J;
}

std::vector<FermiChart::NormalSample> FermiChart::normal_line(double t, double dy, int ny) const {
  std::vector<NormalSample> out(static_cast<std::size_t>(2 * ny + 1));
  const GeodesicSample s = geo_.at(t);
  if (flat()) {
    for (int k = -ny; k <= ny; ++k) out[static_cast<std::size_t>(k + ny)] = {s.x + k * dy * s.e, 1.0, 0.0};
    return out;
  }
  out[static_cast<std::size_t>(ny)] = {s.x, 1.0, 0.0};
  const int sub = std::max(1, static_cast<int>(std::ceil(dy / kNormalStep)));
  const double h = dy / sub;
  for (double sign : {1.0, -1.0}) {
    NormalState st{s.x, sign * s.e, 1.0, 0.0};
    for (int k = 1; k <= ny; ++k) {
      for (int q = 0; q < sub; ++q) st = normal_step(geo_.manifold, st, h);
      out[static_cast<std::size_t>(ny + static_cast<int>(sign) * k)] = {st.x, st.f, sign * st.fy};
    }
  }
  return out;
}

std::vector<FermiPoint> FermiChart::from_point(const Vec2& x) const {
  std::vector<FermiPoint> result;
  if (flat()) {
    const GeodesicSample& s = geo_.samples.front();
    const Vec2 d = x - s.x;
    const FermiPoint p{s.t + d.dot(s.v), d.dot(s.e)};
    if (p.t < t_lo() - 1e-12 || p.t > t_hi() + 1e-12 || std::abs(p.y) > rho_)
      throw OutOfTubeError("point outside the Fermi tube");
    result.push_back(p);
    return result;
  }
  const int bx = static_cast<int>(std::floor((x.x() - bucket_lo_) / bucket_h_));
  const int by = static_cast<int>(std::floor((x.y() - bucket_lo_) / bucket_h_));
  std::vector<std::pair<double, int>> near;
  for (int j = by - 1; j <= by + 1; ++j)
    for (int i = bx - 1; i <= bx + 1; ++i) {
      if (i < 0 || j < 0 || i >= bucket_n_ || j >= bucket_n_) continue;
      for (int k : buckets_[static_cast<std::size_t>(j * bucket_n_ + i)])
        near.push_back({(seed_x_[static_cast<std::size_t>(k)] - x).norm(), k});
    }
  std::sort(near.begin(), near.end());
  // Branches are distinguished by a minimum separation in t.
  const double min_sep = 0.5;
  std::vector<FermiPoint> starts;
  for (const auto& [dist, k] : near) {
    if (dist > 2.0 * seed_h_) break;
    const FermiPoint& s = seeds_[static_cast<std::size_t>(k)];
    bool fresh = true;
    for (const auto& q : starts) fresh = fresh && std::abs(q.t - s.t) > min_sep;
    if (fresh) starts.push_back(s);
  }
  for (FermiPoint p : starts) {
    bool ok = false;
    for (int it = 0; it < 40; ++it) {
      const Vec2 r = to_point(p.t, p.y) - x;
      if (r.norm() < 1e-13) {
        ok = true;
        break;
      }
      const Vec2 d = jacobian(p.t, p.y).fullPivLu().solve(r);
      p.t -= d.x();
      p.y -= d.y();
      if (d.norm() < 1e-14) {
        ok = (to_point(p.t, p.y) - x).norm() < 1e-10;
        break;
      }
    }
    if (!ok || std::abs(p.y) > rho_ || p.t < t_lo() || p.t > t_hi()) continue;
    bool dup = false;
    for (const auto& q : result) dup = dup || std::abs(q.t - p.t) < 1e-6;
    if (!dup) result.push_back(p);
  }
  if (result.empty()) throw OutOfTubeError("point outside the Fermi tube");
  std::sort(result.begin(), result.end(), [](const FermiPoint& a, const FermiPoint& b) { return a.t < b.t; });
  return result;
}

std::vector<FermiPoint> fermi_coordinates(const Geodesic& g, const Vec2& x) {
  return FermiChart(g, 0.0).from_point(x);
}

JacobiField jacobi_field(const Geodesic& g, const Vec2& j0, const Vec2& jdot0, double t0) {
  if (t0 < g.t_min() || t0 > g.t_max()) throw ParameterError("jacobi_field: t0 outside the geodesic");
  auto K = [&](double t) { return g.manifold.gaussian_curvature(g.at(t).x); };
  auto integrate = [&](const std::vector<double>& ts, std::vector<double>& J, std::vector<double>& Jd) {
    double y = j0.y(), yd = jdot0.y();
    double t = t0;
    for (double tn : ts) {
      const double h = tn - t;
      const double km = K(t + 0.5 * h);
      const double k1y = yd, k1d = -K(t) * y;
      const double k2y = yd + 0.5 * h * k1d, k2d = -km * (y + 0.5 * h * k1y);
      const double k3y = yd + 0.5 * h * k2d, k3d = -km * (y + 0.5 * h * k2y);
      const double k4y = yd + h * k3d, k4d = -K(tn) * (y + h * k3y);
      y += h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y);
      yd += h / 6 * (k1d + 2 * k2d + 2 * k3d + k4d);
      t = tn;
      J.push_back(y);
      Jd.push_back(yd);
    }
  };
  std::vector<double> fwd_t, bwd_t;
  for (const auto& s : g.samples) {
    if (s.t > t0 + 1e-14) fwd_t.push_back(s.t);
    if (s.t < t0 - 1e-14) bwd_t.push_back(s.t);
  }
  std::reverse(bwd_t.begin(), bwd_t.end());
  std::vector<double> fJ, fJd, bJ, bJd;
  integrate(fwd_t, fJ, fJd);
  integrate(bwd_t, bJ, bJd);

  JacobiField out;
  for (std::size_t k = bwd_t.size(); k-- > 0;) {
    out.t.push_back(bwd_t[k]);
    out.normal.push_back(bJ[k]);
    out.normal_dot.push_back(bJd[k]);
  }
  out.t.push_back(t0);
  out.normal.push_back(j0.y());
  out.normal_dot.push_back(jdot0.y());
  for (std::size_t k = 0; k < fwd_t.size(); ++k) {
    out.t.push_back(fwd_t[k]);
    out.normal.push_back(fJ[k]);
    out.normal_dot.push_back(fJd[k]);
  }
  for (double t : out.t) out.tangential.push_back(j0.x() + jdot0.x() * (t - t0));
  for (std::size_t k = 1; k < out.t.size(); ++k) {
    if (out.t[k - 1] < t0) continue;
    const double a = out.normal[k - 1], b = out.normal[k];
    if (out.t[k - 1] == t0 && a == 0.0) continue;
    if ((a < 0 && b >= 0) || (a > 0 && b <= 0))
      out.conjugate_times.push_back(out.t[k - 1] + (out.t[k] - out.t[k - 1]) * a / (a - b));
  }
  return out;
}

std::vector<Vec2> perturbed_directions(const Vec2& v1, double eps, const Mat2& g, double eps_max) {
  if (eps == 0.0) throw ParameterError("perturbed_directions: eps = 0 gives a degenerate perturbation");
  if (!(eps > 0.0) || eps > eps_max) throw ParameterError("perturbed_directions: eps outside (0, eps_max]");
  if (std::abs(std::sqrt(v1.dot(g * v1)) - 1.0) > 1e-8) throw ParameterError("perturbed_directions: v1 not unit");
  const Vec2 n = unit_normal(g, v1);
  return {(v1 + eps * n) / std::sqrt(1.0 + eps * eps)};
}

BoundaryChart::BoundaryChart(const ProductManifold& m, const Vec3& x0, double corner_margin_fraction)
    : m_(m), x0_(x0) {
  if (!m.unit_conformal()) throw ChartError("boundary charts require c = 1");
  const double margin = corner_margin_fraction * (m.x1_max - m.x1_min);
  const Vec2 xp = x0.tail<2>();
  const double r = xp.norm();
  if (std::abs(x0.x() - m.x1_min) < 1e-9 || std::abs(x0.x() - m.x1_max) < 1e-9) {
    face_ = std::abs(x0.x() - m.x1_min) < 1e-9 ? BoundaryFace::CapMinus : BoundaryFace::CapPlus;
    if (1.0 - r <= margin) throw ChartError("boundary point within the corner margin");
    const Mat2 g = m.transversal.metric(xp);
    const Vec2 e1 = Vec2(1.0, 0.0) / std::sqrt(g(0, 0));
    cap_frame_.col(0) = e1;
    cap_frame_.col(1) = unit_normal(g, e1);
  } else if (std::abs(r - 1.0) < 1e-9) {
    face_ = BoundaryFace::Lateral;
    if (x0.x() - m.x1_min <= margin || m.x1_max - x0.x() <= margin)
      throw ChartError("boundary point within the corner margin");
    theta0_ = std::atan2(xp.y(), xp.x());
  } else {
    throw DomainError("boundary_normal_chart: point is not on the boundary");
  }
}

Vec2 BoundaryChart::lateral_foot(double sigma, Vec2* inward) const {
  const TransversalManifold& M = m_.transversal;
  double theta = theta0_ + sigma;
  if (M.kind() != MetricKind::Flat) {
    // Invert arclength: d theta / d sigma = 1 / |b'(theta)|_g.
    auto rate = [&](double th) {
      const Vec2 b(std::cos(th), std::sin(th)), tb(-std::sin(th), std::cos(th));
      return 1.0 / std::sqrt(tb.dot(M.metric(b) * tb));
    };
    const int n = std::max(1, static_cast<int>(std::ceil(std::abs(sigma) / 0.002)));
    const double h = sigma / n;
    theta = theta0_;
    for (int k = 0; k < n; ++k) {
      const double k1 = rate(theta), k2 = rate(theta + 0.5 * h * k1), k3 = rate(theta + 0.5 * h * k2),
                   k4 = rate(theta + h * k3);
      theta += h / 6 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
  }
  const Vec2 b(std::cos(theta), std::sin(theta));
  *inward = -M.outward_normal(b);
  return b;
}

Vec3 BoundaryChart::to_point(const Vec3& xc) const {
  const TransversalManifold& M = m_.transversal;
  if (face_ == BoundaryFace::Lateral) {
    Vec2 nu;
    const Vec2 b = lateral_foot(xc.y(), &nu);
    const Vec2 xp = exp_map(M, b, xc.z() * nu);
    return {x0_.x() + xc.x(), xp.x(), xp.y()};
  }
  const Vec2 xp = exp_map(M, x0_.tail<2>(), cap_frame_ * xc.head<2>());
  const double x1 = face_ == BoundaryFace::CapPlus ? m_.x1_max - xc.z() : m_.x1_min + xc.z();
  return {x1, xp.x(), xp.y()};
}

Mat3 BoundaryChart::jacobian(const Vec3& xc) const {
  Mat3 J;
  const double h = 1e-6;
  for (int k = 0; k < 3; ++k) {
    Vec3 d = Vec3::Zero();
    d[k] = h;
    J.col(k) = (to_point(xc + d) - to_point(xc - d)) / (2 * h);
  }
  return J;
}

Mat3 BoundaryChart::metric(const Vec3& xc) const {
  const Mat3 J = jacobian(xc);
  return J.transpose() * m_.metric(to_point(xc)) * J;
}

}  // namespace nlms
