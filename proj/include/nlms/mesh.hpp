#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "nlms/geometry.hpp"

namespace nlms {

enum class FaceTag : std::uint8_t { CapMinus = 0, CapPlus = 1, Lateral = 2 };

// Bit flags per vertex: which tagged faces it touches.
constexpr std::uint8_t kOnCapMinus = 1;
constexpr std::uint8_t kOnCapPlus = 2;
constexpr std::uint8_t kOnLateral = 4;

// P1 tetrahedral mesh of [x1_min, x1_max] x unit disk. The disk is triangulated
// by rings (ring j carries 6j vertices), each x1 layer is copied and every
// prism is split into three tetrahedra with globally consistent diagonals.
struct Mesh {
  int n_disk = 0;
  int n_x1 = 0;
  double x1_min = -1.0;
  double x1_max = 1.0;
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> cells;
  std::vector<std::array<int, 3>> faces;
  std::vector<FaceTag> face_tags;

  std::vector<std::uint8_t> vertex_tags;
  std::vector<int> boundary_vertices;  // ascending vertex ids
  std::vector<int> interior_vertices;  // ascending vertex ids
  std::vector<int> boundary_index;     // vertex id -> position in boundary_vertices or -1
  std::vector<int> interior_index;     // vertex id -> position in interior_vertices or -1
  double h_max = 0.0;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_boundary() const { return static_cast<int>(boundary_vertices.size()); }
  int num_interior() const { return static_cast<int>(interior_vertices.size()); }
  // Rebuild vertex tags, boundary/interior lists and h_max from cells/faces.
  void finalize();
};

Mesh build_mesh(int n_disk, int n_x1, double x1_min = -1.0, double x1_max = 1.0);

void write_mesh(const Mesh& mesh, std::ostream& out);
Mesh read_mesh(std::istream& in);

}  // namespace nlms
