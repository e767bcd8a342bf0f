#include "nlms/scenarios.hpp"

#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <type_traits>

#include "nlms/forward.hpp"
#include "nlms/linearization.hpp"
#include "nlms/quadrature.hpp"
#include "nlms/quasimodes.hpp"
#include "nlms/recovery.hpp"
#include "nlms/svg.hpp"

namespace nlms {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

bool parse_real(const std::string& s, double& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const char* b = t.data();
  const char* e = t.data() + t.size();
  if (*b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e && std::isfinite(out);
}

bool parse_int(const std::string& s, int& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  return ec == std::errc() && p == t.data() + t.size();
}

bool parse_bool(const std::string& s, bool& out) {
  const std::string t = trim(s);
  if (t == "true" || t == "yes" || t == "on" || t == "1") return out = true, true;
  if (t == "false" || t == "no" || t == "off" || t == "0") return out = false, true;
  return false;
}

bool parse_list(const std::string& s, std::vector<double>& out) {
  out.clear();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v;
    if (!parse_real(item, v)) return false;
    out.push_back(v);
  }
  return !out.empty();
}

std::string kind_name(KeyKind k) {
  switch (k) {
    case KeyKind::Text: return "text";
    case KeyKind::Int: return "integer";
    case KeyKind::Real: return "real";
    case KeyKind::RealList: return "list of reals";
    case KeyKind::Bool: return "bool";
    case KeyKind::Point: return "point";
  }
  return "?";
}

// Returns an empty string when the value is acceptable for the key.
std::string validate_value(const KeySpec& k, const std::string& v) {
  switch (k.kind) {
    case KeyKind::Text:
      if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), v) == k.choices.end()) {
        std::string msg = "'" + v + "' is not one of";
        for (const auto& c : k.choices) msg += " " + c;
        return msg;
      }
      return {};
    case KeyKind::Int: {
      int i;
      if (!parse_int(v, i)) return "expected an integer, got '" + v + "'";
      if (k.positive && i <= 0) return "must be positive";
      if (i < 0) return "must not be negative";
      return {};
    }
    case KeyKind::Real: {
      double d;
      if (!parse_real(v, d)) return "expected a real number, got '" + v + "'";
      if (k.positive && d <= 0) return "must be positive";
      return {};
    }
    case KeyKind::Bool: {
      bool b;
      if (!parse_bool(v, b)) return "expected true/false, got '" + v + "'";
      return {};
    }
    case KeyKind::RealList: {
      std::vector<double> l;
      if (!parse_list(v, l)) return "expected a comma-separated list of reals, got '" + v + "'";
      if (k.positive)
        for (double d : l)
          if (d <= 0) return "entries must be positive";
      if (k.monotone && l.size() > 1) {
        const bool up = l[1] > l[0];
        for (std::size_t i = 1; i < l.size(); ++i)
          if ((up && !(l[i] > l[i - 1])) || (!up && !(l[i] < l[i - 1]))) return "grid must be strictly monotone";
      }
      return {};
    }
    case KeyKind::Point: {
      std::vector<double> l;
      if (!parse_list(v, l)) return "expected comma-separated coordinates, got '" + v + "'";
      if (k.size > 0 && static_cast<int>(l.size()) != k.size)
        return "expected " + std::to_string(k.size) + " components, got " + std::to_string(l.size());
      return {};
    }
  }
  return {};
}

KeySpec key(std::string name, KeyKind kind, std::string def, std::string help) {
  KeySpec k;
  k.name = std::move(name);
  k.kind = kind;
  k.default_value = std::move(def);
  k.help = std::move(help);
  return k;
}

KeySpec choice(std::string name, std::string def, std::vector<std::string> choices, std::string help) {
  KeySpec k = key(std::move(name), KeyKind::Text, std::move(def), std::move(help));
  k.choices = std::move(choices);
  return k;
}

KeySpec grid(std::string name, std::string def, std::string help) {
  KeySpec k = key(std::move(name), KeyKind::RealList, std::move(def), std::move(help));
  k.monotone = true;
  k.positive = true;
  return k;
}

KeySpec positive(KeySpec k) {
  k.positive = true;
  return k;
}

KeySpec point(std::string name, int size, std::string def, std::string help) {
  KeySpec k = key(std::move(name), KeyKind::Point, std::move(def), std::move(help));
  k.size = size;
  return k;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(17) << v;
  return o.str();
}

std::string short_num(double v) {
  std::ostringstream o;
  o << std::setprecision(6) << v;
  return o.str();
}

// Shared builders

Exec exec_of(const ResolvedConfig& c) { return c.text("run.exec") == "serial" ? Exec::Serial : Exec::Parallel; }

ProductManifold manifold_of(const ResolvedConfig& c) {
  ProductManifold M;
  M.x1_min = c.real("manifold.x1_min");
  M.x1_max = c.real("manifold.x1_max");
  if (!(M.x1_min < M.x1_max)) throw ConfigError("manifold.x1_min must be below manifold.x1_max");
  const std::string& preset = c.text("manifold.preset");
  if (preset == "bump") M.transversal = TransversalManifold::conformal_bump(c.real("manifold.beta"), c.real("manifold.sigma"));
  else if (preset == "grid") {
    if (c.text("manifold.grid_csv").empty()) throw ConfigError("manifold.preset = grid needs manifold.grid_csv");
    M.transversal = TransversalManifold::load_grid_csv(c.text("manifold.grid_csv"));
  }
  const double eps = c.real("manifold.conformal_eps");
  if (eps != 0.0) M.conformal_c = conformal_bump_factor(eps, Vec3::Zero(), c.real("manifold.conformal_width"));
  return M;
}

const std::vector<KeySpec>& mesh_keys() {
  static const std::vector<KeySpec> k = {
      positive(key("mesh.n_disk", KeyKind::Int, "16", "rings of the disk triangulation")),
      positive(key("mesh.n_x1", KeyKind::Int, "8", "layers along x1")),
  };
  return k;
}

std::vector<KeySpec> potential_keys(const std::string& preset) {
  return {
      choice("potential.preset", preset, potential_preset_names(), "named coefficient preset"),
      key("potential.csv", KeyKind::Text, "", "per-vertex coefficient CSV; replaces the preset when set"),
      key("potential.amplitude", KeyKind::Real, "1", "preset amplitude (real part)"),
      key("potential.amplitude_im", KeyKind::Real, "0", "preset amplitude (imaginary part)"),
      key("potential.width", KeyKind::Real, "0.5", "bump width"),
      key("potential.cx", KeyKind::Real, "0", "bump centre x1"),
      key("potential.cy", KeyKind::Real, "0", "bump centre x2"),
      key("potential.cz", KeyKind::Real, "0", "bump centre x3"),
      key("potential.direction", KeyKind::Int, "2", "covector direction 1..3 of bump-A"),
      key("potential.order", KeyKind::Int, "3", "power of z carrying the bump"),
  };
}

NonlinearPotentials potentials_of(const ResolvedConfig& c, const Mesh& mesh) {
  if (!c.text("potential.csv").empty()) {
    std::ifstream in(c.text("potential.csv"));
    if (!in) throw ConfigError("cannot open potential.csv '" + c.text("potential.csv") + "'");
    NonlinearPotentials p = read_potentials_csv(in, mesh.num_vertices());
    p.validate(mesh.num_vertices());
    return p;
  }
  std::map<std::string, double> params;
  for (const char* k : {"amplitude", "amplitude_im", "width", "cx", "cy", "cz", "direction", "order"}) {
    const std::string full = std::string("potential.") + k;
    if (c.given(full)) params[k] = c.real(full);
  }
  NonlinearPotentials p = potential_preset(c.text("potential.preset"), params).sample(mesh);
  p.validate(mesh.num_vertices());
  return p;
}

// Boundary traces of harmonic polynomials of the flat slab with seeded complex
// coefficients, each scaled to sup norm `amplitude`.
std::vector<CVec> harmonic_traces(const Mesh& mesh, int count, int modes, std::uint64_t seed, double amplitude) {
  static const std::vector<std::function<double(const Vec3&)>> basis = {
      [](const Vec3& x) { return x.x(); },
      [](const Vec3& x) { return x.y(); },
      [](const Vec3& x) { return x.z(); },
      [](const Vec3&) { return 1.0; },
      [](const Vec3& x) { return x.x() * x.y(); },
      [](const Vec3& x) { return x.y() * x.z(); },
      [](const Vec3& x) { return x.x() * x.z(); },
      [](const Vec3& x) { return x.x() * x.x() - x.y() * x.y(); },
      [](const Vec3& x) { return x.y() * x.y() - x.z() * x.z(); },
  };
  modes = std::clamp(modes, 1, static_cast<int>(basis.size()));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<CVec> out;
  for (int t = 0; t < count; ++t) {
    std::vector<cplx> c(static_cast<std::size_t>(modes));
    for (auto& z : c) z = cplx(U(rng), U(rng));
    CVec f(mesh.num_boundary());
    for (int b = 0; b < mesh.num_boundary(); ++b) {
      const Vec3& x = mesh.vertices[static_cast<std::size_t>(mesh.boundary_vertices[static_cast<std::size_t>(b)])];
      cplx v = 0.0;
      for (int j = 0; j < modes; ++j) v += c[static_cast<std::size_t>(j)] * basis[static_cast<std::size_t>(j)](x);
      f[b] = v;
    }
    const double sup = f.cwiseAbs().maxCoeff();
    if (sup > 0) f *= amplitude / sup;
    out.push_back(f);
  }
  return out;
}

double sup_norm(const CVec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// |field| on the mesh layer closest to x1 = 0, nearest-vertex sampled.
svg::Heatmap layer_heatmap(const Mesh& mesh, const CVec& u, const std::string& title, int n = 48) {
  double layer = mesh.vertices.front().x();
  for (const Vec3& v : mesh.vertices)
    if (std::abs(v.x()) < std::abs(layer)) layer = v.x();
  std::vector<int> ids;
  for (int v = 0; v < mesh.num_vertices(); ++v)
    if (std::abs(mesh.vertices[static_cast<std::size_t>(v)].x() - layer) < 1e-12) ids.push_back(v);
  svg::Heatmap h;
  h.title = title;
  h.xlabel = "x2";
  h.ylabel = "x3";
  h.nx = h.ny = n;
  h.x_min = h.y_min = -1;
  h.x_max = h.y_max = 1;
  h.values.assign(static_cast<std::size_t>(n * n), std::nan(""));
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Vec2 z(-1 + (i + 0.5) * 2.0 / n, -1 + (j + 0.5) * 2.0 / n);
      if (z.norm() > 1.0) continue;
      int best = ids.front();
      double bd = INFINITY;
      for (int v : ids) {
        const double d = (mesh.vertices[static_cast<std::size_t>(v)].tail<2>() - z).squaredNorm();
        if (d < bd) bd = d, best = v;
      }
      h.values[static_cast<std::size_t>(j * n + i)] = std::abs(u[best]);
    }
  return h;
}

// forward

void run_forward(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const Mesh mesh = build_mesh(c.integer("mesh.n_disk"), c.integer("mesh.n_x1"), c.real("manifold.x1_min"),
                               c.real("manifold.x1_max"));
  const FEOperator op(mesh, manifold_of(c), exec_of(c));
  const NonlinearPotentials p = potentials_of(c, mesh);
  const CVec f = harmonic_traces(mesh, 1, c.integer("trace.modes"), static_cast<std::uint64_t>(c.integer("run.seed")),
                                 c.real("trace.amplitude"))[0];
  NewtonOptions no;
  no.delta = c.real("newton.delta");
  no.tolerance = c.real("newton.tolerance");
  no.max_iterations = c.integer("newton.max_iterations");
  const DNSample r = solve_nonlinear(op, p, f, no);
  const double margin = zero_eigenvalue_margin(op, p);

  const double fsup = sup_norm(f);
  const double final_res = r.residuals.back();
  ctx.check("newton-converged", final_res <= no.tolerance * fsup, final_res / fsup, no.tolerance,
            "interior nodal residual relative to |f|_inf");
  const std::size_t n = r.residuals.size();
  if (n >= 3) {
    // Observed order log(r_n / r_{n-1}) / log(r_{n-1} / r_{n-2}); the last step
    // usually lands on the rounding floor, so a constant-ratio test is too strict.
    const double order = std::log(r.residuals[n - 1] / r.residuals[n - 2]) /
                         std::log(r.residuals[n - 2] / r.residuals[n - 3]);
    ctx.check("newton-quadratic", order >= 1.5, order, 1.5, "observed convergence order over the last two steps");
  } else {
    ctx.check("newton-quadratic", true, 0.0, 1.5, "converged in one step, no rate to measure");
  }
  ctx.check("zero-eigenvalue-margin", margin > 0.0, margin, 0.0, "smallest Dirichlet eigenvalue of the linearization");

  ctx.results["vertices"] = mesh.num_vertices();
  ctx.results["boundary_vertices"] = mesh.num_boundary();
  ctx.results["h_max"] = mesh.h_max;
  ctx.results["potentials"] = p.provenance;
  ctx.results["trace_sup"] = fsup;
  ctx.results["iterations"] = r.iterations;
  ctx.results["residuals"] = r.residuals;
  ctx.results["stability_constant"] = r.stability_constant;
  ctx.results["eigenvalue_margin"] = margin;

  {
    auto out = ctx.open("dn.csv");
    write_dn_csv(out, op, r);
  }
  {
    auto out = ctx.open("solution.csv");
    write_field_csv(out, r.u);
  }
  {
    auto out = ctx.open("newton.csv");
    out << "step,residual\n";
    for (std::size_t k = 0; k < n; ++k) out << k << ',' << fmt(r.residuals[k]) << '\n';
  }
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Newton residuals", "step", "interior residual", false, true, {}};
    svg::Series s{"residual", {}, {}};
    for (std::size_t k = 0; k < n; ++k) s.x.push_back(double(k)), s.y.push_back(r.residuals[k]);
    plot.series.push_back(s);
    auto out = ctx.open("newton.svg");
    svg::write_line_plot(out, plot);
    auto out2 = ctx.open("solution.svg");
    svg::write_heatmap(out2, layer_heatmap(mesh, r.u, "|u| on the middle x1 layer"));
  }
}

// linearize

void run_linearize(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const Mesh mesh = build_mesh(c.integer("mesh.n_disk"), c.integer("mesh.n_x1"), c.real("manifold.x1_min"),
                               c.real("manifold.x1_max"));
  const FEOperator op(mesh, manifold_of(c), exec_of(c));
  const NonlinearPotentials p = potentials_of(c, mesh);
  const int m = c.integer("linearize.order");
  if (m < 1 || m > kMaxOrder) throw ConfigError("linearize.order must be in 1.." + std::to_string(kMaxOrder));
  const std::vector<CVec> fs = harmonic_traces(mesh, m + 1, c.integer("trace.modes"),
                                               static_cast<std::uint64_t>(c.integer("run.seed")), 1.0);
  LinearizeOptions lo;
  lo.h = c.real("linearize.h_eps");
  lo.richardson = c.flag("linearize.richardson");
  lo.exec = exec_of(c);

  const MultilinearDN d1 = multilinearize_dn(op, p, {fs[0]}, 1, lo);
  const CVec ref = op.normal_derivative(op.harmonic_extension(fs[0]));
  const double e1 = sup_norm(d1.value - ref) / sup_norm(ref);
  ctx.check("order1-harmonic-dn", e1 <= 1e-5, e1, 1e-5, "relative to the normal derivative of the harmonic extension");
  {
    auto out = ctx.open("multilinear_1.csv");
    write_multilinear_csv(out, op, d1);
  }
  json orders = json::array();
  orders.push_back({{"order", 1}, {"sup", sup_norm(d1.value)}, {"noise_floor", d1.noise_floor}, {"warning", d1.warning}});

  bool admissible = true;
  for (const auto& [k, A] : p.A) admissible = admissible && k >= 2;
  for (const auto& [k, V] : p.V) admissible = admissible && k >= 3;
  if (m >= 2) {
    const MultilinearDN d2 = multilinearize_dn(op, p, {fs[0], fs[1]}, 2, lo);
    const double s2 = sup_norm(d2.value);
    if (admissible)
      ctx.check("order2-below-noise", s2 <= 10.0 * d2.noise_floor, s2, 10.0 * d2.noise_floor,
                "second linearization against ten times the stencil noise floor");
    auto out = ctx.open("multilinear_2.csv");
    write_multilinear_csv(out, op, d2);
    orders.push_back({{"order", 2}, {"sup", s2}, {"noise_floor", d2.noise_floor}, {"warning", d2.warning}});
  }
  if (m >= 3) {
    // The identity relates the order-m data to A_{m-1} and V_m only when no
    // lower coefficient is present.
    bool lowest = true;
    for (const auto& [k, A] : p.A) lowest = lowest && k >= m - 1;
    for (const auto& [k, V] : p.V) lowest = lowest && k >= m;
    const std::vector<CVec> inputs(fs.begin(), fs.begin() + m);
    const IdentityFromDN green = identity_from_dn(op, p, {}, inputs, fs[static_cast<std::size_t>(m)], m, lo);
    const int nv = mesh.num_vertices();
    const OneForm A = p.A.count(m - 1) ? p.A.at(m - 1) : OneForm(OneForm::Zero(nv, 3));
    const CVec V = p.V.count(m) ? p.V.at(m) : CVec(CVec::Zero(nv));
    std::vector<CVec> us;
    for (const CVec& t : fs) us.push_back(op.harmonic_extension(t));
    const cplx vol = integral_identity(op, A, V, us, m);
    const double err = std::abs(green.value - vol) / std::max(std::abs(vol), 1e-300);
    if (lowest && std::abs(vol) > 0)
      ctx.check("identity-routes-agree", err <= 0.02, err, 0.02, "boundary route against the volume route");
    {
      auto out = ctx.open("multilinear_" + std::to_string(m) + ".csv");
      write_multilinear_csv(out, op, green.first);
    }
    {
      auto out = ctx.open("identity.csv");
      out << "route,re,im\n" << "boundary," << fmt(green.value.real()) << ',' << fmt(green.value.imag()) << '\n'
          << "volume," << fmt(vol.real()) << ',' << fmt(vol.imag()) << '\n';
    }
    orders.push_back({{"order", m},
                      {"sup", sup_norm(green.first.value)},
                      {"noise_floor", green.first.noise_floor},
                      {"condition", green.first.condition},
                      {"warning", green.first.warning}});
    ctx.results["identity"] = {{"boundary", {green.value.real(), green.value.imag()}},
                               {"volume", {vol.real(), vol.imag()}},
                               {"relative_difference", err}};
  }
  ctx.results["orders"] = orders;
  ctx.results["vertices"] = mesh.num_vertices();
  ctx.results["potentials"] = p.provenance;
}

// beam-residual

Geodesic line_of(const ResolvedConfig& c, const TransversalManifold& T) {
  const auto y0 = c.point("geodesic.start");
  const auto w = c.point("geodesic.direction");
  const Vec2 x(y0[0], y0[1]), v(w[0], w[1]);
  if (v.norm() == 0.0) throw ConfigError("geodesic.direction must be nonzero");
  return shoot_geodesic(T, x, v / T.speed(x, v));
}

void run_beam_residual(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const ProductManifold M = manifold_of(c);
  const Geodesic g = line_of(c, M.transversal);
  const std::vector<double> s_list = c.list("sweep.s_list");
  BeamParams bp;
  bp.alpha = c.real("beam.alpha");
  bp.lambda = c.real("beam.lambda");
  bp.delta_prime = c.real("beam.delta_prime");
  ResidualOptions ro;
  ro.dt = c.real("residual.dt");
  ro.dy = c.real("residual.dy");

  std::vector<ResidualSweep> sweeps;
  std::vector<GaussianBeam> beams;
  for (int order : {0, 1}) {
    bp.order = order;
    beams.emplace_back(g, M, bp);
    sweeps.push_back(residual_sweep(beams.back(), s_list, ro));
  }
  const double im_h = beams[0].min_imag_H();
  ctx.check("imag-H-positive", im_h > 0, im_h, 0.0, "minimum of Im H along the track");
  ctx.check("order0-slope-negative", sweeps[0].slope < 0, sweeps[0].slope, 0.0, "log-log slope of the residual, N = 0");
  const double gap = sweeps[0].slope - sweeps[1].slope;
  ctx.check("order1-slope-gap", gap >= 0.5, gap, 0.5, "N = 1 slope steeper than N = 0 by at least this much");

  ctx.results["slopes"] = {sweeps[0].slope, sweeps[1].slope};
  ctx.results["min_imag_H"] = im_h;
  ctx.results["delta_prime"] = beams[0].delta_prime();
  ctx.results["tube_radius"] = beams[0].chart().tube_radius();
  ctx.results["exit_times"] = {-g.S1, g.S2};
  {
    auto out = ctx.open("residuals.csv");
    out << "order,s,residual,v_l2,v_l4,grid_points\n";
    for (int o = 0; o < 2; ++o)
      for (const ResidualReport& r : sweeps[static_cast<std::size_t>(o)].reports)
        out << o << ',' << fmt(r.s) << ',' << fmt(r.residual) << ',' << fmt(r.v_l2) << ',' << fmt(r.v_l4) << ','
            << r.grid_points << '\n';
  }
  {
    auto out = ctx.open("beam.csv");
    write_beam_csv(out, beams[0]);
  }
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Conjugated beam residual", "s", "L2 residual", true, true, {}};
    for (int o = 0; o < 2; ++o) {
      svg::Series s{"N = " + std::to_string(o), {}, {}};
      for (const ResidualReport& r : sweeps[static_cast<std::size_t>(o)].reports) s.x.push_back(r.s), s.y.push_back(r.residual);
      plot.series.push_back(s);
    }
    auto out = ctx.open("residual.svg");
    svg::write_line_plot(out, plot);

    const int n = 64;
    svg::Heatmap h;
    h.title = "|v| at s = " + fmt(s_list.front());
    h.xlabel = "x'1";
    h.ylabel = "x'2";
    h.nx = h.ny = n;
    h.x_min = h.y_min = -1;
    h.x_max = h.y_max = 1;
    h.values.assign(static_cast<std::size_t>(n * n), std::nan(""));
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) {
        const Vec2 z(-1 + (i + 0.5) * 2.0 / n, -1 + (j + 0.5) * 2.0 / n);
        if (z.norm() <= 1.0) h.values[static_cast<std::size_t>(j * n + i)] = std::abs(beams[0].evaluate(z, s_list.front()).v);
      }
    auto out2 = ctx.open("beam.svg");
    svg::write_heatmap(out2, h);
  }
}

// stationary-phase

void run_stationary_phase(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  Mat2 H;
  H << c.real("phase.h11"), c.real("phase.h12"), c.real("phase.h12"), c.real("phase.h22");
  const auto psi = [H](const Vec2& z) { return 0.5 * z.dot(H * z); };
  const std::string& amp = c.text("amplitude.kind");
  const std::function<double(const Vec2&)> a = amp == "rough" ? std::function<double(const Vec2&)>([](const Vec2& z) { return 1.0 + z.norm(); })
                                                              : std::function<double(const Vec2&)>([](const Vec2&) { return 1.0; });
  StationaryPhaseOptions o;
  o.radius = c.real("grid.radius");
  o.points = c.integer("grid.points");
  o.exec = exec_of(c);
  const StationaryPhaseReport r = rough_stationary_phase(psi, a, c.list("sweep.s_list"), o);
  const double tol = c.real("check.tolerance");
  ctx.check("limit-vs-closed-form", r.relative_error <= tol, r.relative_error, tol,
            "extrapolated limit against 2 pi a(0) / sqrt(det Psi'')");
  ctx.results["limit"] = r.limit;
  ctx.results["closed_form"] = r.closed_form;
  ctx.results["relative_error"] = r.relative_error;
  ctx.results["fitted_exponent"] = r.exponent;
  ctx.results["values"] = r.values;
  {
    auto out = ctx.open("stationary.csv");
    write_stationary_csv(out, r);
  }
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Laplace integral against the closed form", "s", "relative error", true, true, {}};
    svg::Series s{"raw", {}, {}};
    for (std::size_t k = 0; k < r.s.size(); ++k)
      s.x.push_back(r.s[k]), s.y.push_back(std::abs(r.values[k] - r.closed_form) / std::abs(r.closed_form));
    svg::Series e{"extrapolated", {r.s.back()}, {std::max(r.relative_error, 1e-16)}, true, false};
    plot.series = {s, e};
    auto out = ctx.open("stationary.svg");
    svg::write_line_plot(out, plot);
  }
}

// boundary-trace

PacketOptions packet_options(const ResolvedConfig& c) {
  PacketOptions o;
  o.alpha = c.real("packet.alpha");
  o.lambdas = c.list("packet.lambdas");
  o.tangential_nodes = c.integer("packet.tangential_nodes");
  o.normal_nodes = c.integer("packet.normal_nodes");
  return o;
}

Vec3 vec3(const std::vector<double>& v) { return Vec3(v[0], v[1], v[2]); }

// One-sided second-order derivative in the inward chart coordinate.
template <class F>
auto d_inward(const F& f, double h = 1e-4) -> std::decay_t<decltype(f(0.0))> {
  return (-3.0 * f(0.0) + 4.0 * f(h) - f(2 * h)) / (2 * h);
}

struct TraceOutcome {
  double value_error = 0.0, normal_error = 0.0;
};

TraceOutcome scalar_trace_stage(RunContext& ctx, const ProductManifold& M, const ComplexField& V, const Vec3& x0,
                                const PacketOptions& po, double tol_v, double tol_d, const std::string& prefix) {
  const ScalarTraceReport r = boundary_trace_scalar(M, V, x0, po);
  const BoundaryChart chart(M, x0);
  const auto along = [&](double t) { return V(chart.to_point(Vec3(0, 0, t))); };
  const cplx v_true = along(0.0);
  const cplx d_true = d_inward(along);
  // A vanishing jet (zero preset, or a field supported inside) is compared absolutely.
  double scale = std::max(std::abs(v_true), std::abs(d_true));
  if (scale < 1e-12) scale = 1.0;
  TraceOutcome o{std::abs(r.value - v_true) / scale, std::abs(r.d_xn - d_true) / scale};
  ctx.check(prefix + "V-trace", o.value_error <= tol_v, o.value_error, tol_v, "trace error relative to the trace scale");
  ctx.check(prefix + "V-normal-derivative", o.normal_error <= tol_d, o.normal_error, tol_d,
            "inward normal derivative error relative to the trace scale");
  ctx.results[prefix + "scalar"] = {{"value", {r.value.real(), r.value.imag()}},
                                    {"d_xn", {r.d_xn.real(), r.d_xn.imag()}},
                                    {"d_nu", {r.d_nu.real(), r.d_nu.imag()}},
                                    {"true_value", {v_true.real(), v_true.imag()}},
                                    {"true_d_xn", {d_true.real(), d_true.imag()}},
                                    {"fit_residual", r.fit_residual},
                                    {"condition", r.condition},
                                    {"low_confidence", r.low_confidence}};
  auto out = ctx.open(prefix + "scalar_trace.csv");
  out << "lambda,bilinear_re,bilinear_im,scaled_re,scaled_im,mass,moment\n";
  for (std::size_t k = 0; k < r.lambdas.size(); ++k)
    out << fmt(r.lambdas[k]) << ',' << fmt(r.bilinear[k].real()) << ',' << fmt(r.bilinear[k].imag()) << ','
        << fmt(r.scaled[k].real()) << ',' << fmt(r.scaled[k].imag()) << ',' << fmt(r.mass[k]) << ','
        << fmt(r.moment[k]) << '\n';
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Scaled packet pairing", "packet scale", "|scaled pairing|", true, false, {}};
    svg::Series s{"scalar", r.lambdas, {}};
    for (const cplx& z : r.scaled) s.y.push_back(std::abs(z));
    plot.series.push_back(s);
    auto sv = ctx.open(prefix + "scalar_trace.svg");
    svg::write_line_plot(sv, plot);
  }
  return o;
}

TraceOutcome oneform_trace_stage(RunContext& ctx, const ProductManifold& M, const OneFormField& A, const Vec3& x0,
                                 const PacketOptions& po, double tol_v, double tol_d, const std::string& prefix) {
  const OneFormTraceReport r = boundary_trace_oneform(M, A, x0, po);
  const BoundaryChart chart(M, x0);
  const auto along = [&](double t) -> Eigen::Vector3cd {
    const Vec3 xc(0, 0, t);
    return chart.jacobian(xc).transpose().cast<cplx>() * A(chart.to_point(xc));
  };
  const Eigen::Vector3cd v_true = along(0.0);
  const Eigen::Vector3cd d_true = d_inward(along);
  double scale = std::max(v_true.norm(), d_true.norm());
  if (scale < 1e-12) scale = 1.0;
  TraceOutcome o{(r.value - v_true).norm() / scale, (r.d_xn - d_true).norm() / scale};
  ctx.check(prefix + "A-trace", o.value_error <= tol_v, o.value_error, tol_v, "chart components, relative to the trace scale");
  ctx.check(prefix + "A-normal-derivative", o.normal_error <= tol_d, o.normal_error, tol_d,
            "inward derivative of the chart components, relative to the trace scale");
  auto pair = [](const Eigen::Vector3cd& v) {
    json a = json::array();
    for (int k = 0; k < 3; ++k) a.push_back({v[k].real(), v[k].imag()});
    return a;
  };
  ctx.results[prefix + "oneform"] = {{"value", pair(r.value)},   {"d_xn", pair(r.d_xn)},
                                     {"true_value", pair(v_true)}, {"true_d_xn", pair(d_true)},
                                     {"fit_residual", r.fit_residual}, {"condition", r.condition},
                                     {"warning", r.warning}};
  auto out = ctx.open(prefix + "oneform_trace.csv");
  out << "lambda,dir_1,dir_2,scaled_re,scaled_im\n";
  for (std::size_t d = 0; d < r.directions.size(); ++d)
    for (std::size_t k = 0; k < r.lambdas.size(); ++k)
      out << fmt(r.lambdas[k]) << ',' << fmt(r.directions[d].x()) << ',' << fmt(r.directions[d].y()) << ','
          << fmt(r.scaled[d][k].real()) << ',' << fmt(r.scaled[d][k].imag()) << '\n';
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Scaled one-form packet pairing", "packet scale", "|scaled pairing|", true, false, {}};
    for (std::size_t d = 0; d < r.directions.size(); ++d) {
      svg::Series s{"tau' = (" + fmt(r.directions[d].x()) + ", " + fmt(r.directions[d].y()) + ")", r.lambdas, {}};
      for (const cplx& z : r.scaled[d]) s.y.push_back(std::abs(z));
      plot.series.push_back(s);
    }
    auto sv = ctx.open(prefix + "oneform_trace.svg");
    svg::write_line_plot(sv, plot);
  }
  return o;
}

double inward_distance(const ProductManifold& M, const Vec3& x0, const Vec3& x) {
  switch (BoundaryChart(M, x0).face()) {
    case BoundaryFace::CapPlus: return M.x1_max - x.x();
    case BoundaryFace::CapMinus: return x.x() - M.x1_min;
    case BoundaryFace::Lateral: return 1.0 - x.tail<2>().norm();
  }
  return 0.0;
}

void run_boundary_trace(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const ProductManifold M = manifold_of(c);
  const Vec3 x0 = vec3(c.point("trace.point"));
  const PacketOptions po = packet_options(c);
  const std::string& preset = c.text("trace.preset");
  const double kappa = c.real("trace.value");
  const bool scalar = c.text("trace.kind") == "scalar";
  double tol_v = c.real("trace.tol_value"), tol_d = c.real("trace.tol_normal");
  if (tol_v <= 0) tol_v = scalar ? 0.05 : 0.10;
  if (tol_d <= 0) tol_d = scalar ? 0.10 : 0.15;
  const auto xn = [M, x0](const Vec3& x) { return inward_distance(M, x0, x); };
  if (scalar) {
    ComplexField V;
    if (preset == "constant") V = [kappa](const Vec3&) { return cplx(kappa); };
    else if (preset == "xn") V = [xn](const Vec3& x) { return cplx(xn(x)); };
    else if (preset == "zero") V = [](const Vec3&) { return cplx(0.0); };
    else throw ConfigError("trace.preset '" + preset + "' is not a scalar preset (constant, xn, zero)");
    scalar_trace_stage(ctx, M, V, x0, po, tol_v, tol_d, "");
  } else {
    OneFormField A;
    if (preset == "constant") A = [kappa](const Vec3&) -> Eigen::Vector3cd { return Eigen::Vector3cd(kappa, 0, 0); };
    else if (preset == "xn")
      A = [xn](const Vec3& x) -> Eigen::Vector3cd { return Eigen::Vector3cd(xn(x), 0, 0); };
    else if (preset == "zero") A = [](const Vec3&) -> Eigen::Vector3cd { return Eigen::Vector3cd::Zero(); };
    else throw ConfigError("trace.preset '" + preset + "' is not a one-form preset (constant, xn, zero)");
    oneform_trace_stage(ctx, M, A, x0, po, tol_v, tol_d, "");
  }
}

// recovery scenarios

OneFormField bump_oneform(const ResolvedConfig& c) {
  const Vec3 amp = vec3(c.point("a.amplitude"));
  const Vec3 center = vec3(c.point("a.center"));
  const double width = c.real("a.width");
  return [amp, center, width](const Vec3& x) -> Eigen::Vector3cd {
    return (smooth_bump(x, center, width) * amp).cast<cplx>();
  };
}

ComplexField bump_scalar(const ResolvedConfig& c) {
  const double amp = c.real("v.amplitude");
  const Vec3 center = vec3(c.point("v.center"));
  const double width = c.real("v.width");
  return [amp, center, width](const Vec3& x) { return cplx(amp * smooth_bump(x, center, width)); };
}

struct Lines {
  Vec2 p;
  std::vector<Geodesic> lines;
  double L = 2.0;
};

Lines lines_of(const ResolvedConfig& c, const ProductManifold& M) {
  Lines out;
  const auto p = c.point("recovery.p");
  out.p = Vec2(p[0], p[1]);
  for (double deg : c.list("recovery.angles")) {
    const double a = deg * kPi / 180.0;
    const Vec2 v(std::cos(a), std::sin(a));
    out.lines.push_back(shoot_geodesic(M.transversal, out.p, v / M.transversal.speed(out.p, v)));
  }
  if (out.lines.size() < 2) throw ConfigError("recovery.angles needs at least two lines");
  out.L = c.real("recovery.L");
  if (out.L <= 0) {
    const IntersectionSet X = find_intersections(out.lines[0], out.lines[1], 1e-8);
    out.L = choose_L(out.lines[0], out.lines[1], X);
  }
  return out;
}

MomentOptions moment_options(const ResolvedConfig& c) {
  MomentOptions o;
  o.s_list = c.list("moment.s_list");
  o.h = c.real("moment.h");
  o.x1_nodes = c.integer("moment.x1_nodes");
  o.exec = exec_of(c);
  return o;
}

std::vector<double> xi_grid(const ResolvedConfig& c) {
  return uniform_xi_grid(c.real("recovery.xi_max"), c.real("recovery.xi_step"));
}

// Exact x1-Fourier transform of A along the vertical line through p.
std::vector<Eigen::Vector3cd> exact_transform(const OneFormField& A, const ProductManifold& M, const Vec2& p,
                                              const std::vector<double>& xi) {
  const QuadratureRule q = gauss_legendre(400, M.x1_min, M.x1_max);
  std::vector<Eigen::Vector3cd> out;
  for (double x : xi) {
    Eigen::Vector3cd s = Eigen::Vector3cd::Zero();
    for (std::size_t k = 0; k < q.x.size(); ++k)
      s += q.w[k] * std::exp(cplx(0, -x * q.x[k])) * A(Vec3(q.x[k], p.x(), p.y()));
    out.push_back(s);
  }
  return out;
}

void recover_A_stage(RunContext& ctx, const ProductManifold& M, const OneFormField& A, const Lines& L,
                     const std::string& prefix) {
  const ResolvedConfig& c = ctx.config();
  const std::vector<double> xi = xi_grid(c);
  const double tol = c.real("recovery.tolerance");
  std::vector<DirectionalMoment> details;
  const MomentSet ms = collect_moments(A, M, L.lines, L.p, xi, L.L, moment_options(c), &details);

  // Linear-algebra stage on exact moments.
  const std::vector<Eigen::Vector3cd> exact = exact_transform(A, M, L.p, xi);
  MomentSet ex = ms;
  for (std::size_t k = 0; k < xi.size(); ++k)
    for (std::size_t d = 0; d < ms.directions.size(); ++d)
      ex.D(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) =
          -exact[k][0] + cplx(0, 1) * (exact[k][1] * ms.directions[d].x() + exact[k][2] * ms.directions[d].y());
  const CovectorRecovery exr = recover_A_point(ex, 0.0);
  double ex_err = 0.0, ex_scale = 1e-300;
  for (std::size_t k = 0; k < xi.size(); ++k) {
    ex_err = std::max(ex_err, (exr.A_hat[k] - exact[k]).norm());
    ex_scale = std::max(ex_scale, exact[k].norm());
  }
  ctx.check(prefix + "pairing-exact", ex_err / ex_scale <= 1e-10, ex_err / ex_scale, 1e-10,
            "direction solve on exact moments");

  json points = json::array();
  for (double x1 : c.list("recovery.x1")) {
    const CovectorRecovery r = recover_A_point(ms, x1);
    const Vec3 truth = A(Vec3(x1, L.p.x(), L.p.y())).real();
    const double err = (r.A - truth).norm() / std::max(truth.norm(), 1e-12);
    ctx.check(prefix + "A-at-x1=" + short_num(x1), err <= tol, err, tol, "recovered covector relative to the preset");
    points.push_back({{"x1", x1},
                      {"recovered", {r.A[0], r.A[1], r.A[2]}},
                      {"preset", {truth[0], truth[1], truth[2]}},
                      {"relative_error", err},
                      {"condition", r.condition},
                      {"residual", r.residual}});
  }
  ctx.results[prefix + "A"] = {{"L", L.L}, {"directions", ms.directions.size()}, {"xi", xi}, {"points", points}};
  {
    auto out = ctx.open(prefix + "moments.csv");
    write_moment_csv(out, details);
  }
  std::vector<double> xs, rec[3], tru[3];
  {
    auto out = ctx.open(prefix + "A_profile.csv");
    out << "x1,A1,A2,A3,preset1,preset2,preset3\n";
    for (int k = -18; k <= 18; ++k) {
      const double x1 = 0.05 * k;
      const CovectorRecovery r = recover_A_point(ms, x1);
      const Vec3 t = A(Vec3(x1, L.p.x(), L.p.y())).real();
      out << fmt(x1);
      for (int j = 0; j < 3; ++j) out << ',' << fmt(r.A[j]);
      for (int j = 0; j < 3; ++j) out << ',' << fmt(t[j]);
      out << '\n';
      xs.push_back(x1);
      for (int j = 0; j < 3; ++j) rec[j].push_back(r.A[j]), tru[j].push_back(t[j]);
    }
  }
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Recovered covector along x1", "x1", "component", false, false, {}};
    const char* names[3] = {"A1", "A'1", "A'2"};
    for (int j = 0; j < 3; ++j) {
      plot.series.push_back({std::string(names[j]) + " recovered", xs, rec[j], true, false});
      plot.series.push_back({std::string(names[j]) + " preset", xs, tru[j], false, true});
    }
    auto out = ctx.open(prefix + "A_profile.svg");
    svg::write_line_plot(out, plot);
  }
}

void recover_V_stage(RunContext& ctx, const ProductManifold& M, const OneFormField& A, const ComplexField& V,
                     const Lines& L, bool ordering_check, const std::string& prefix) {
  const ResolvedConfig& c = ctx.config();
  const std::vector<double> xi = xi_grid(c);
  const double tol = c.real("recovery.tolerance");
  const MomentOptions mo = moment_options(c);
  const std::vector<double> x1s = c.list("recovery.x1");
  const VRecovery after = recover_V_point({A, V}, A, M, L.lines[0], L.lines[1], L.p, x1s.front(), xi, L.L, mo);
  json points = json::array();
  for (double x1 : x1s) {
    const double truth = V(Vec3(x1, L.p.x(), L.p.y())).real();
    const cplx q = inverse_fourier(xi, after.q_hat, x1);
    const double err = std::abs(q - truth) / std::max(std::abs(truth), 1e-12);
    ctx.check(prefix + "V-at-x1=" + short_num(x1), err <= tol, err, tol, "recovered scalar after removing the A terms");
    points.push_back({{"x1", x1}, {"recovered", {q.real(), q.imag()}}, {"preset", truth}, {"relative_error", err}});
  }
  json out_json = {{"L", L.L}, {"points", points}};
  if (ordering_check) {
    const VRecovery before =
        recover_V_point({A, V}, OneFormField{}, M, L.lines[0], L.lines[1], L.p, x1s.front(), xi, L.L, mo);
    const double truth = V(Vec3(x1s.front(), L.p.x(), L.p.y())).real();
    const double err = std::abs(before.value - truth) / std::max(std::abs(truth), 1e-12);
    ctx.check(prefix + "ordering-regression", err > tol, err, tol,
              "without removing A first the scalar must miss the tolerance");
    out_json["without_subtraction"] = {{"x1", x1s.front()},
                                       {"recovered", {before.value.real(), before.value.imag()}},
                                       {"relative_error", err}};
  }
  ctx.results[prefix + "V"] = out_json;
  {
    auto out = ctx.open(prefix + "V_moments.csv");
    out << "xi,s,D_re,D_im,q_hat_re,q_hat_im\n";
    for (std::size_t k = 0; k < xi.size(); ++k)
      for (std::size_t j = 0; j < after.D[k].size(); ++j)
        out << fmt(xi[k]) << ',' << fmt(mo.s_list[j]) << ',' << fmt(after.D[k][j].real()) << ','
            << fmt(after.D[k][j].imag()) << ',' << fmt(after.q_hat[k].real()) << ',' << fmt(after.q_hat[k].imag())
            << '\n';
  }
  std::vector<double> xs, rec, tru;
  {
    auto out = ctx.open(prefix + "V_profile.csv");
    out << "x1,V_re,V_im,preset\n";
    for (int k = -18; k <= 18; ++k) {
      const double x1 = 0.05 * k;
      const cplx q = inverse_fourier(xi, after.q_hat, x1);
      const double t = V(Vec3(x1, L.p.x(), L.p.y())).real();
      out << fmt(x1) << ',' << fmt(q.real()) << ',' << fmt(q.imag()) << ',' << fmt(t) << '\n';
      xs.push_back(x1), rec.push_back(q.real()), tru.push_back(t);
    }
  }
  if (ctx.svg_enabled()) {
    svg::LinePlot plot{"Recovered scalar along x1", "x1", "V", false, false, {}};
    plot.series.push_back({"recovered", xs, rec, true, false});
    plot.series.push_back({"preset", xs, tru, false, true});
    auto out = ctx.open(prefix + "V_profile.svg");
    svg::write_line_plot(out, plot);
  }
}

void run_recover_A(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const ProductManifold M = manifold_of(c);
  const Lines L = lines_of(c, M);
  recover_A_stage(ctx, M, bump_oneform(c), L, "");
}

void run_recover_V(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const ProductManifold M = manifold_of(c);
  const Lines L = lines_of(c, M);
  recover_V_stage(ctx, M, bump_oneform(c), bump_scalar(c), L, c.flag("recovery.ordering_check"), "");
}

void run_full_pipeline(RunContext& ctx) {
  const ResolvedConfig& c = ctx.config();
  const ProductManifold M = manifold_of(c);
  const OneFormField A = bump_oneform(c);
  const ComplexField V = bump_scalar(c);
  // Stage 1: boundary determination. The presets vanish to first order on the
  // boundary, which is what licenses the interior stages.
  check_zero_boundary_jet(A, M);
  check_zero_boundary_jet([&V](const Vec3& x) -> Eigen::Vector3cd { return Eigen::Vector3cd(V(x), 0, 0); }, M);
  const Vec3 x0 = vec3(c.point("trace.point"));
  const PacketOptions po = packet_options(c);
  const double tol_b = c.real("boundary.tolerance");
  scalar_trace_stage(ctx, M, V, x0, po, tol_b, tol_b, "boundary-");
  oneform_trace_stage(ctx, M, A, x0, po, tol_b, tol_b, "boundary-");
  // Stage 2: interior A. Stage 3: V with the A terms removed.
  const Lines L = lines_of(c, M);
  recover_A_stage(ctx, M, A, L, "interior-");
  recover_V_stage(ctx, M, A, V, L, false, "interior-");
}

// Schemas

std::vector<KeySpec> beam_keys() {
  return {
      point("geodesic.start", 2, "0,0.1", "interior point the geodesic is shot from"),
      point("geodesic.direction", 2, "1,0", "initial direction"),
      grid("sweep.s_list", "8,16,32", "frequencies of the residual sweep"),
      positive(key("beam.alpha", KeyKind::Real, "1", "carrier scale alpha")),
      key("beam.lambda", KeyKind::Real, "0", "imaginary carrier part lambda"),
      key("beam.delta_prime", KeyKind::Real, "0", "cutoff width; 0 picks min(2 rho, 4)"),
      positive(key("residual.dt", KeyKind::Real, "0.01", "Fermi grid step in t")),
      positive(key("residual.dy", KeyKind::Real, "0.01", "Fermi grid step in y")),
  };
}

std::vector<KeySpec> packet_keys(const std::string& lambdas = "0.2,0.1,0.05,0.025,0.0125") {
  KeySpec lam = grid("packet.lambdas", lambdas, "packet scales, geometric");
  return {
      positive(key("packet.alpha", KeyKind::Real, "0.4", "tangential localization exponent, in (0, 1/2)")),
      lam,
      positive(key("packet.tangential_nodes", KeyKind::Int, "32", "Gauss-Legendre nodes per tangential direction")),
      positive(key("packet.normal_nodes", KeyKind::Int, "64", "Gauss-Legendre nodes in the normal direction")),
  };
}

std::vector<KeySpec> recovery_keys(bool with_v) {
  std::vector<KeySpec> k = {
      point("a.amplitude", 3, "0.5,1,-0.7", "covector amplitude of the bump one-form (dx1, dx2, dx3)"),
      point("a.center", 3, "0,0,0", "bump centre"),
      positive(key("a.width", KeyKind::Real, "0.9", "bump width")),
      point("recovery.p", 2, "0,0", "intersection point of the lines"),
      key("recovery.angles", KeyKind::RealList, "0,90", "line directions through p, degrees"),
      key("recovery.L", KeyKind::Real, "0", "frequency ratio; 0 picks the smallest admissible integer"),
      positive(key("recovery.xi_max", KeyKind::Real, "8", "half-width of the x1-frequency grid")),
      positive(key("recovery.xi_step", KeyKind::Real, "1", "x1-frequency step")),
      key("recovery.x1", KeyKind::RealList, "-0.3,0,0.4", "test points along x1"),
      positive(key("recovery.tolerance", KeyKind::Real, "0.1", "relative tolerance at the test points")),
      grid("moment.s_list", "64,128,256", "moment sweep frequencies"),
      positive(key("moment.h", KeyKind::Real, "0.01", "transversal grid spacing of the moment quadrature")),
      positive(key("moment.x1_nodes", KeyKind::Int, "64", "Gauss-Legendre nodes of the x1 reduction")),
  };
  if (with_v) {
    k.push_back(key("v.amplitude", KeyKind::Real, "0.8", "scalar bump amplitude"));
    k.push_back(point("v.center", 3, "0,0,0", "scalar bump centre"));
    k.push_back(positive(key("v.width", KeyKind::Real, "0.9", "scalar bump width")));
  }
  return k;
}

template <class... V>
std::vector<KeySpec> join(V&&... parts) {
  std::vector<KeySpec> out;
  (out.insert(out.end(), parts.begin(), parts.end()), ...);
  return out;
}

std::vector<Scenario> build_scenarios() {
  std::vector<Scenario> s;
  s.push_back({"forward",
               "Newton solve of the nonlinear Dirichlet problem and its DN map on a slab mesh",
               "forward problem: well-posedness for small data, quadratic Newton convergence, DN map, "
               "zero-eigenvalue margin of the linearization",
               join(mesh_keys(), potential_keys("cubic"),
                    std::vector<KeySpec>{
                        positive(key("trace.amplitude", KeyKind::Real, "0.04", "sup norm of the boundary data")),
                        positive(key("trace.modes", KeyKind::Int, "3", "harmonic polynomials mixed into the data")),
                        positive(key("newton.delta", KeyKind::Real, "0.05", "smallness bound on |f|_inf")),
                        positive(key("newton.tolerance", KeyKind::Real, "1e-11", "relative residual tolerance")),
                        positive(key("newton.max_iterations", KeyKind::Int, "25", "Newton step cap")),
                    }),
               run_forward});
  s.push_back({"linearize",
               "Mixed finite differences of the DN map and the integral identity",
               "higher-order linearization: order 1 is the harmonic DN map, order 2 vanishes, order m "
               "satisfies the integral identity against A_{m-1} and V_m",
               join(std::vector<KeySpec>{positive(key("mesh.n_disk", KeyKind::Int, "24", "rings of the disk triangulation")),
                                         positive(key("mesh.n_x1", KeyKind::Int, "12", "layers along x1"))},
                    potential_keys("bump-AV"),
                    std::vector<KeySpec>{
                        positive(key("linearize.order", KeyKind::Int, "3", "order m of the linearization, 1..5")),
                        positive(key("linearize.h_eps", KeyKind::Real, "0.01", "stencil step")),
                        key("linearize.richardson", KeyKind::Bool, "true", "combine steps h and h/2"),
                        positive(key("trace.modes", KeyKind::Int, "4", "harmonic polynomials mixed into each trace")),
                    }),
               run_linearize});
  s.push_back({"beam-residual",
               "Conjugated Gaussian beam residual sweep for amplitude orders 0 and 1",
               "Gaussian beam quasimodes: Riccati phase, transport amplitude, corrector, residual decay in s",
               beam_keys(), run_beam_residual});
  s.push_back({"stationary-phase",
               "Laplace-method limit of a quadratic phase against the closed form",
               "rough stationary phase with a continuous amplitude; Richardson extrapolation in s",
               {key("phase.h11", KeyKind::Real, "1", "Hessian entry (1,1)"),
                key("phase.h12", KeyKind::Real, "0", "Hessian entry (1,2)"),
                key("phase.h22", KeyKind::Real, "1", "Hessian entry (2,2)"),
                choice("amplitude.kind", "one", {"one", "rough"}, "a = 1 or a = 1 + |z|"),
                grid("sweep.s_list", "8,16,32,64", "frequencies"),
                positive(key("grid.radius", KeyKind::Real, "3", "half-width of the square chart")),
                positive(key("grid.points", KeyKind::Int, "1201", "grid points per side (odd)")),
                positive(key("check.tolerance", KeyKind::Real, "0.02", "relative tolerance on the limit"))},
               run_stationary_phase});
  s.push_back({"boundary-trace",
               "Boundary value and normal derivative of a scalar or one-form from packet pairings",
               "boundary determination with oscillatory packets concentrating at a boundary point",
               join(packet_keys(),
                    std::vector<KeySpec>{
                        choice("trace.kind", "scalar", {"scalar", "oneform"}, "field type"),
                        choice("trace.preset", "constant", {"constant", "xn", "zero"},
                               "constant kappa, the inward distance x_n, or zero (one-forms along dx1)"),
                        key("trace.value", KeyKind::Real, "2", "kappa of the constant preset"),
                        point("trace.point", 3, "0,1,0", "boundary point (x1, x2, x3)"),
                        key("trace.tol_value", KeyKind::Real, "0", "tolerance on the trace; 0 picks 5% / 10%"),
                        key("trace.tol_normal", KeyKind::Real, "0", "tolerance on the normal derivative; 0 picks 10% / 15%"),
                    }),
               run_boundary_trace});
  s.push_back({"recover-A",
               "Interior recovery of a one-form from beam moments on crossing lines",
               "interior recovery of A: beam quadruples, stationary-phase moments at the crossing, separation "
               "of A1 from A' by +- directions, choice of L, inverse x1-Fourier synthesis; requires a one-form "
               "preset supported away from the boundary and lines crossing once at p",
               recovery_keys(false), run_recover_A});
  s.push_back({"recover-V",
               "Recovery of the scalar potential after the one-form terms are removed",
               "recovery of V from the order-3 identity once A is known; includes the ordering regression "
               "without the subtraction; requires one-form and scalar presets supported away from the boundary",
               join(recovery_keys(true),
                    std::vector<KeySpec>{key("recovery.ordering_check", KeyKind::Bool, "true",
                                             "also run without removing A and expect a miss")}),
               run_recover_V});
  s.push_back({"full-pipeline",
               "Boundary determination, then interior A, then V",
               "all recovery stages in order: boundary traces at a boundary point, one-form recovery, scalar "
               "recovery with the one-form removed",
               // Packets reach about lambda^alpha inward; the bump presets come within
               // 0.1 of the boundary, so the sweep starts where that reach is small.
               join(recovery_keys(true), packet_keys("0.025,0.0125,0.00625,0.003125"),
                    std::vector<KeySpec>{point("trace.point", 3, "0,1,0", "boundary point (x1, x2, x3)"),
                                         positive(key("boundary.tolerance", KeyKind::Real, "1e-4",
                                                      "absolute tolerance on the vanishing boundary jet"))}),
               run_full_pipeline});
  return s;
}

std::string error_type(const std::exception& e) {
  if (dynamic_cast<const ResolutionError*>(&e)) return "ResolutionError";
  if (dynamic_cast<const ParameterError*>(&e)) return "ParameterError";
  if (dynamic_cast<const DomainError*>(&e)) return "DomainError";
  if (dynamic_cast<const TrappedGeodesicError*>(&e)) return "TrappedGeodesicError";
  if (dynamic_cast<const OutOfTubeError*>(&e)) return "OutOfTubeError";
  if (dynamic_cast<const ChartError*>(&e)) return "ChartError";
  if (dynamic_cast<const MeshError*>(&e)) return "MeshError";
  if (dynamic_cast<const ConvergenceError*>(&e)) return "ConvergenceError";
  if (dynamic_cast<const SmallnessError*>(&e)) return "SmallnessError";
  if (dynamic_cast<const AssumptionError*>(&e)) return "AssumptionError";
  if (dynamic_cast<const ConditioningError*>(&e)) return "ConditioningError";
  if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
  return "Error";
}

// 64-bit FNV-1a of a file, hex encoded; stable across platforms, used to
// compare artifacts between runs.
std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << h;
  return o.str();
}

void write_report(const fs::path& dir, const json& report) {
  std::ofstream out(dir / "report.json");
  out << report.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "report.json").string());
}

}  // namespace

// Config

ExperimentConfig ExperimentConfig::parse(std::istream& in, const std::string& source) {
  ExperimentConfig cfg;
  cfg.source_ = source;
  std::string line, section;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string at = source + ":" + std::to_string(n) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(at + "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (!section.empty() && !valid_key(section)) throw ConfigError(at + "invalid section name '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(at + "expected 'key = value', got '" + line + "'");
    const std::string k = trim(line.substr(0, eq));
    if (!valid_key(k)) throw ConfigError(at + "invalid key '" + k + "'");
    const std::string full = section.empty() ? k : section + "." + k;
    const auto it = cfg.entries_.find(full);
    if (it != cfg.entries_.end())
      throw ConfigError(at + "duplicate key '" + full + "' (first set on line " + std::to_string(it->second.line) + ")");
    cfg.entries_[full] = {trim(line.substr(eq + 1)), n};
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse(in, path.string());
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw ConfigError("--set: invalid key '" + key + "'");
  entries_[key] = {trim(value), 0};
}

std::string ExperimentConfig::scenario() const {
  const auto it = entries_.find("scenario");
  if (it == entries_.end()) throw ConfigError(source_ + ": missing key 'scenario'");
  return it->second.value;
}

std::string ExperimentConfig::where(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end() || it->second.line == 0) return "--set " + key;
  return source_ + ":" + std::to_string(it->second.line) + ": " + key;
}

ResolvedConfig::ResolvedConfig(const ExperimentConfig& cfg, const std::vector<KeySpec>& schema) {
  std::map<std::string, const KeySpec*> by_name;
  for (const KeySpec& k : schema) by_name[k.name] = &k;
  for (const auto& [name, entry] : cfg.entries()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError(cfg.where(name) + ": unknown key for this scenario");
    const std::string msg = validate_value(*it->second, entry.value);
    if (!msg.empty()) throw ConfigError(cfg.where(name) + ": " + msg);
    values_[name] = entry.value;
    given_.insert(name);
  }
  for (const KeySpec& k : schema)
    if (!values_.count(k.name)) values_[k.name] = k.default_value;
}

const std::string& ResolvedConfig::text(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("internal: key '" + key + "' is not in the schema");
  return it->second;
}

int ResolvedConfig::integer(const std::string& key) const {
  int v = 0;
  if (!parse_int(text(key), v)) throw ConfigError(key + ": expected an integer");
  return v;
}

double ResolvedConfig::real(const std::string& key) const {
  double v = 0;
  if (!parse_real(text(key), v)) throw ConfigError(key + ": expected a real number");
  return v;
}

bool ResolvedConfig::flag(const std::string& key) const {
  bool v = false;
  if (!parse_bool(text(key), v)) throw ConfigError(key + ": expected true/false");
  return v;
}

std::vector<double> ResolvedConfig::list(const std::string& key) const {
  std::vector<double> v;
  if (!parse_list(text(key), v)) throw ConfigError(key + ": expected a list of reals");
  return v;
}

std::vector<double> ResolvedConfig::point(const std::string& key) const { return list(key); }

std::ofstream RunContext::open(const std::string& name) {
  std::ofstream out(dir_ / name);
  if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
  out << std::setprecision(17);
  artifacts_.push_back(name);
  return out;
}

void RunContext::check(const std::string& name, bool passed, double value, double tolerance, const std::string& detail) {
  checks_.push_back({name, passed, value, tolerance, detail});
}

// Registry

const std::vector<KeySpec>& common_keys() {
  static const std::vector<KeySpec> k = [] {
    std::vector<std::string> names;
    for (const Scenario& s : scenarios()) names.push_back(s.name);
    return std::vector<KeySpec>{
        choice("scenario", "", names, "scenario to run"),
        key("run.seed", KeyKind::Int, "1", "seed of the random boundary data"),
        key("run.jobs", KeyKind::Int, "0", "worker threads; 0 keeps the OpenMP default"),
        choice("run.exec", "parallel", {"parallel", "serial"}, "OpenMP kernels or their serial reference"),
        key("output.dir", KeyKind::Text, "", "artifact directory under the output root; empty uses the scenario name"),
        key("output.svg", KeyKind::Bool, "true", "write SVG plots"),
        choice("manifold.preset", "flat", {"flat", "bump", "grid"}, "transversal metric g0"),
        key("manifold.beta", KeyKind::Real, "0.1", "bump metric amplitude"),
        positive(key("manifold.sigma", KeyKind::Real, "0.5", "bump metric width")),
        key("manifold.grid_csv", KeyKind::Text, "", "metric grid CSV x,y,g11,g12,g22 for preset grid"),
        key("manifold.x1_min", KeyKind::Real, "-1", "slab start"),
        key("manifold.x1_max", KeyKind::Real, "1", "slab end"),
        key("manifold.conformal_eps", KeyKind::Real, "0", "conformal factor c = 1 + eps bump"),
        positive(key("manifold.conformal_width", KeyKind::Real, "0.5", "width of the conformal bump")),
    };
  }();
  return k;
}

const std::vector<Scenario>& scenarios() {
  static const std::vector<Scenario> s = build_scenarios();
  return s;
}

std::vector<std::string> list_scenarios() {
  std::vector<std::string> out;
  for (const Scenario& s : scenarios()) out.push_back(s.name);
  return out;
}

const Scenario& find_scenario(const std::string& name) {
  for (const Scenario& s : scenarios())
    if (s.name == name) return s;
  throw ConfigError("unknown scenario '" + name + "'");
}

std::vector<KeySpec> scenario_schema(const Scenario& s) {
  std::vector<KeySpec> out = common_keys();
  out.insert(out.end(), s.keys.begin(), s.keys.end());
  return out;
}

std::string describe(const std::string& name) {
  const Scenario& s = find_scenario(name);
  std::ostringstream o;
  o << s.name << ": " << s.summary << "\n";
  o << "exercises: " << s.exercises << "\n";
  o << "keys:\n";
  for (const KeySpec& k : scenario_schema(s)) {
    o << "  " << std::left << std::setw(26) << k.name << std::setw(14) << kind_name(k.kind);
    if (k.name == "scenario") o << "(required)";
    else o << "default " << (k.default_value.empty() ? std::string("(empty)") : k.default_value);
    o << "  " << k.help;
    if (!k.choices.empty()) {
      o << " [";
      for (std::size_t i = 0; i < k.choices.size(); ++i) o << (i ? "|" : "") << k.choices[i];
      o << "]";
    }
    o << "\n";
  }
  return o.str();
}

// Runner

fs::path default_output_root() {
  const char* env = std::getenv("NLMS_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("nlms-out");
}

Mesh mesh_from_config(const ExperimentConfig& cfg) {
  std::vector<KeySpec> schema = scenario_schema(find_scenario(cfg.scenario()));
  for (const KeySpec& k : mesh_keys())
    if (std::none_of(schema.begin(), schema.end(), [&](const KeySpec& s) { return s.name == k.name; })) schema.push_back(k);
  const ResolvedConfig c(cfg, schema);
  return build_mesh(c.integer("mesh.n_disk"), c.integer("mesh.n_x1"), c.real("manifold.x1_min"),
                    c.real("manifold.x1_max"));
}

RunResult run_experiment(const ExperimentConfig& cfg, const fs::path& output_root) {
  const Scenario& sc = find_scenario(cfg.scenario());
  const ResolvedConfig c(cfg, scenario_schema(sc));
  // Cheap semantic checks that do not need the modules.
  if (!(c.real("manifold.x1_min") < c.real("manifold.x1_max")))
    throw ConfigError(cfg.where("manifold.x1_max") + ": must exceed manifold.x1_min");
  if (c.text("manifold.preset") == "grid" && c.text("manifold.grid_csv").empty())
    throw ConfigError(cfg.source() + ": manifold.preset = grid needs manifold.grid_csv");

  const std::string dir_name = c.text("output.dir").empty() ? sc.name : c.text("output.dir");
  const fs::path final_dir = output_root / dir_name;
  const fs::path stage = output_root / (".stage-" + fs::path(dir_name).filename().string() + "-" + std::to_string(::getpid()));
  fs::remove_all(stage);
  fs::create_directories(stage);

  if (c.integer("run.jobs") > 0) set_thread_count(c.integer("run.jobs"));

  json report;
  report["schema"] = "nlms-report/1";
  report["scenario"] = sc.name;
  json config = json::object();
  for (const auto& [k, v] : c.values()) config[k] = v;
  report["config"] = config;

  RunContext ctx(c, stage);
  int code = kExitPass;
  json error = nullptr;
  try {
    sc.run(ctx);
    for (const Check& ch : ctx.checks())
      if (!ch.passed) code = kExitCheckFailed;
  } catch (const ConfigError&) {
    fs::remove_all(stage);
    throw;
  } catch (const std::exception& e) {
    code = kExitRuntimeError;
    error = {{"type", error_type(e)}, {"message", e.what()}};
    // Keep only the report: the artifacts of an aborted run are incomplete.
    fs::remove_all(stage);
    fs::create_directories(stage);
  }

  json checks = json::array();
  for (const Check& ch : ctx.checks())
    checks.push_back({{"name", ch.name},
                      {"passed", ch.passed},
                      {"value", ch.value},
                      {"tolerance", ch.tolerance},
                      {"detail", ch.detail}});
  report["status"] = code == kExitPass ? "pass" : code == kExitCheckFailed ? "fail" : "error";
  report["exit_code"] = code;
  report["checks"] = code == kExitRuntimeError ? json::array() : checks;
  report["results"] = code == kExitRuntimeError ? json::object() : ctx.results;
  json artifacts = json::array();
  if (code != kExitRuntimeError)
    for (const std::string& a : ctx.artifacts())
      artifacts.push_back({{"name", a}, {"bytes", fs::file_size(stage / a)}, {"fnv1a64", file_hash(stage / a)}});
  report["artifacts"] = artifacts;
  report["error"] = error;
  write_report(stage, report);

  fs::remove_all(final_dir);
  fs::create_directories(final_dir.parent_path().empty() ? fs::path(".") : final_dir.parent_path());
  fs::rename(stage, final_dir);
  return {code, final_dir, report};
}

}  // namespace nlms
