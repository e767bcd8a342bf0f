#include "nlms/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

namespace nlms {

namespace {

constexpr double kPi = 3.14159265358979323846;

double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

struct Disk {
  std::vector<Vec2> points;
  std::vector<std::array<int, 3>> triangles;
  std::vector<int> outer;  // boundary ring in angular order
};

// Rings at radius j/R with 6j points; consecutive rings are stitched by
// advancing whichever ring has the smaller next angle.
Disk triangulate_disk(int rings) {
  Disk d;
  std::vector<std::vector<int>> ring(static_cast<std::size_t>(rings + 1));
  d.points.push_back(Vec2::Zero());
  ring[0] = {0};
  for (int j = 1; j <= rings; ++j) {
    const int n = 6 * j;
    for (int k = 0; k < n; ++k) {
      const double th = 2.0 * kPi * k / n;
      ring[static_cast<std::size_t>(j)].push_back(static_cast<int>(d.points.size()));
      d.points.emplace_back(std::cos(th) * j / rings, std::sin(th) * j / rings);
    }
  }
  auto add = [&](int a, int b, int c) {
    const Vec2 u = d.points[static_cast<std::size_t>(b)] - d.points[static_cast<std::size_t>(a)];
    const Vec2 v = d.points[static_cast<std::size_t>(c)] - d.points[static_cast<std::size_t>(a)];
    if (u.x() * v.y() - u.y() * v.x() < 0) std::swap(b, c);
    d.triangles.push_back({a, b, c});
  };
  for (int k = 0; k < 6; ++k) add(0, ring[1][static_cast<std::size_t>(k)], ring[1][static_cast<std::size_t>((k + 1) % 6)]);
  for (int j = 2; j <= rings; ++j) {
    const auto& A = ring[static_cast<std::size_t>(j - 1)];
    const auto& B = ring[static_cast<std::size_t>(j)];
    const int na = static_cast<int>(A.size()), nb = static_cast<int>(B.size());
    int ia = 0, ib = 0;
    while (ia < na || ib < nb) {
      const double ta = ia < na ? static_cast<double>(ia + 1) / na : 2.0;
      const double tb = ib < nb ? static_cast<double>(ib + 1) / nb : 2.0;
      if (tb <= ta) {
        add(A[static_cast<std::size_t>(ia % na)], B[static_cast<std::size_t>(ib % nb)],
            B[static_cast<std::size_t>((ib + 1) % nb)]);
        ++ib;
      } else {
        add(A[static_cast<std::size_t>(ia % na)], B[static_cast<std::size_t>(ib % nb)],
            A[static_cast<std::size_t>((ia + 1) % na)]);
        ++ia;
      }
    }
  }
  d.outer = ring[static_cast<std::size_t>(rings)];
  return d;
}

}  // namespace

void Mesh::finalize() {
  const int n = num_vertices();
  vertex_tags.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const std::uint8_t bit = face_tags[f] == FaceTag::CapMinus ? kOnCapMinus
                             : face_tags[f] == FaceTag::CapPlus ? kOnCapPlus
                                                                : kOnLateral;
    for (int v : faces[f]) vertex_tags[static_cast<std::size_t>(v)] |= bit;
  }
  boundary_vertices.clear();
  interior_vertices.clear();
  boundary_index.assign(static_cast<std::size_t>(n), -1);
  interior_index.assign(static_cast<std::size_t>(n), -1);
  for (int v = 0; v < n; ++v) {
    if (vertex_tags[static_cast<std::size_t>(v)]) {
      boundary_index[static_cast<std::size_t>(v)] = static_cast<int>(boundary_vertices.size());
      boundary_vertices.push_back(v);
    } else {
      interior_index[static_cast<std::size_t>(v)] = static_cast<int>(interior_vertices.size());
      interior_vertices.push_back(v);
    }
  }
  h_max = 0.0;
  for (const auto& c : cells) {
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        h_max = std::max(h_max, (vertices[static_cast<std::size_t>(c[a])] - vertices[static_cast<std::size_t>(c[b])]).norm());
    const double vol = signed_volume(vertices[static_cast<std::size_t>(c[0])], vertices[static_cast<std::size_t>(c[1])],
                                     vertices[static_cast<std::size_t>(c[2])], vertices[static_cast<std::size_t>(c[3])]);
    if (!(vol > 1e-14)) throw MeshError("degenerate or inverted cell");
  }
}

Mesh build_mesh(int n_disk, int n_x1, double x1_min, double x1_max) {
  if (n_disk < 8 || n_x1 < 4) throw ParameterError("build_mesh needs n_disk >= 8 and n_x1 >= 4");
  if (!(x1_max > x1_min)) throw ParameterError("build_mesh: empty x1 interval");
  const Disk disk = triangulate_disk(n_disk / 2);
  const int nd = static_cast<int>(disk.points.size());

  Mesh m;
  m.n_disk = n_disk;
  m.n_x1 = n_x1;
  m.x1_min = x1_min;
  m.x1_max = x1_max;
  for (int l = 0; l <= n_x1; ++l) {
    const double x1 = l == n_x1 ? x1_max : x1_min + (x1_max - x1_min) * l / n_x1;
    for (const Vec2& p : disk.points) m.vertices.emplace_back(x1, p.x(), p.y());
  }
  auto vid = [nd](int l, int d) { return l * nd + d; };
  for (int l = 0; l < n_x1; ++l) {
    for (auto tri : disk.triangles) {
      std::sort(tri.begin(), tri.end());
      const int a = vid(l, tri[0]), b = vid(l, tri[1]), c = vid(l, tri[2]);
      const int A = vid(l + 1, tri[0]), B = vid(l + 1, tri[1]), C = vid(l + 1, tri[2]);
      // Quad diagonals always join the lower-index bottom vertex to the
      // higher-index top vertex, so neighbouring prisms agree.
      for (std::array<int, 4> t : {std::array<int, 4>{a, b, c, C}, std::array<int, 4>{a, b, B, C},
                                   std::array<int, 4>{a, A, B, C}}) {
        const double vol = signed_volume(m.vertices[static_cast<std::size_t>(t[0])], m.vertices[static_cast<std::size_t>(t[1])],
                                         m.vertices[static_cast<std::size_t>(t[2])], m.vertices[static_cast<std::size_t>(t[3])]);
        if (vol < 0) std::swap(t[2], t[3]);
        m.cells.push_back(t);
      }
    }
  }
  for (const auto& tri : disk.triangles) {
    m.faces.push_back({vid(0, tri[0]), vid(0, tri[1]), vid(0, tri[2])});
    m.face_tags.push_back(FaceTag::CapMinus);
    m.faces.push_back({vid(n_x1, tri[0]), vid(n_x1, tri[1]), vid(n_x1, tri[2])});
    m.face_tags.push_back(FaceTag::CapPlus);
  }
  const int no = static_cast<int>(disk.outer.size());
  for (int l = 0; l < n_x1; ++l)
    for (int k = 0; k < no; ++k) {
      int p = disk.outer[static_cast<std::size_t>(k)], q = disk.outer[static_cast<std::size_t>((k + 1) % no)];
      if (p > q) std::swap(p, q);
      m.faces.push_back({vid(l, p), vid(l, q), vid(l + 1, q)});
      m.face_tags.push_back(FaceTag::Lateral);
      m.faces.push_back({vid(l, p), vid(l + 1, q), vid(l + 1, p)});
      m.face_tags.push_back(FaceTag::Lateral);
    }
  m.finalize();
  return m;
}

void write_mesh(const Mesh& mesh, std::ostream& out) {
  out.precision(17);
  out << "nlms-mesh 1\n";
  out << "resolution " << mesh.n_disk << " " << mesh.n_x1 << " " << mesh.x1_min << " " << mesh.x1_max << "\n";
  out << "vertices " << mesh.vertices.size() << "\n";
  for (const Vec3& v : mesh.vertices) out << v.x() << " " << v.y() << " " << v.z() << "\n";
  out << "cells " << mesh.cells.size() << "\n";
  for (const auto& c : mesh.cells) out << c[0] << " " << c[1] << " " << c[2] << " " << c[3] << "\n";
  out << "boundary " << mesh.faces.size() << "\n";
  static const char* names[] = {"cap-", "cap+", "lateral"};
  for (std::size_t f = 0; f < mesh.faces.size(); ++f)
    out << mesh.faces[f][0] << " " << mesh.faces[f][1] << " " << mesh.faces[f][2] << " "
        << names[static_cast<int>(mesh.face_tags[f])] << "\n";
}

Mesh read_mesh(std::istream& in) {
  Mesh m;
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != "nlms-mesh" || version != 1) throw MeshError("not an nlms-mesh v1 file");
  std::size_t n = 0;
  if (!(in >> word >> m.n_disk >> m.n_x1 >> m.x1_min >> m.x1_max) || word != "resolution")
    throw MeshError("missing resolution line");
  if (!(in >> word >> n) || word != "vertices") throw MeshError("missing vertices section");
  m.vertices.resize(n);
  for (auto& v : m.vertices)
    if (!(in >> v.x() >> v.y() >> v.z())) throw MeshError("truncated vertices section");
  if (!(in >> word >> n) || word != "cells") throw MeshError("missing cells section");
  m.cells.resize(n);
  for (auto& c : m.cells)
    if (!(in >> c[0] >> c[1] >> c[2] >> c[3])) throw MeshError("truncated cells section");
  if (!(in >> word >> n) || word != "boundary") throw MeshError("missing boundary section");
  m.faces.resize(n);
  m.face_tags.resize(n);
  for (std::size_t f = 0; f < n; ++f) {
    std::string tag;
    if (!(in >> m.faces[f][0] >> m.faces[f][1] >> m.faces[f][2] >> tag)) throw MeshError("truncated boundary section");
    if (tag == "cap-") m.face_tags[f] = FaceTag::CapMinus;
    else if (tag == "cap+") m.face_tags[f] = FaceTag::CapPlus;
    else if (tag == "lateral") m.face_tags[f] = FaceTag::Lateral;
    else throw MeshError("unknown boundary tag " + tag);
  }
  const int nv = static_cast<int>(m.vertices.size());
  for (const auto& c : m.cells)
    for (int v : c)
      if (v < 0 || v >= nv) throw MeshError("cell references a missing vertex");
  m.finalize();
  return m;
}

}  // namespace nlms
