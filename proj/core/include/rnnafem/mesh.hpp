#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace rnnafem {

using VertexId = std::uint32_t;
using ElementId = std::uint32_t;
inline constexpr std::int64_t kNoNeighbor = -1;

struct Point {
  double x = 0;
  double y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Position of an element in the refinement forest rooted at the initial mesh.
/// Bit i of `path` (counting from the least significant end) is the child index
/// taken at depth level-i.
struct ForestKey {
  std::uint32_t root = 0;
  std::uint32_t level = 0;
  std::uint64_t path = 0;

  ForestKey child(unsigned which) const { return {root, level + 1, (path << 1) | which}; }
  ForestKey parent() const { return {root, level - 1, path >> 1}; }
  /// True if this element is `other` or lies inside it.
  bool descends_from(const ForestKey& other) const {
    return root == other.root && level >= other.level && (path >> (level - other.level)) == other.path;
  }
  friend bool operator==(const ForestKey&, const ForestKey&) = default;
};

/// Triangle (v[0]; v[1], v[2]): v[0] is the newest vertex and (v[1], v[2]) the
/// refinement edge. Vertices are counter-clockwise.
struct Element {
  std::array<VertexId, 3> v{};
  ForestKey key;

  std::uint32_t level() const { return key.level; }
};

struct Mesh {
  std::vector<Point> vertices;
  std::vector<Element> elements;
  std::vector<std::array<VertexId, 2>> boundary_edges;
  int generation = 0;

  std::size_t num_elements() const { return elements.size(); }
  std::size_t num_vertices() const { return vertices.size(); }
  std::array<Point, 3> corners(ElementId e) const {
    const auto& el = elements[e];
    return {vertices[el.v[0]], vertices[el.v[1]], vertices[el.v[2]]};
  }
};

struct ElementGeometry {
  double area = 0;
  double diam = 0;      // Euclidean diameter (longest edge)
  double diam_inf = 0;  // max over vertex pairs of the max-norm distance
  double perimeter = 0;
};

ElementGeometry element_geometry(const std::array<Point, 3>& corners);
ElementGeometry element_geometry(const Mesh& mesh, ElementId e);

// Initial triangulations with compatible refinement edges.
Mesh unit_square();  // 2 elements, shared diagonal (0,0)-(1,1)
Mesh l_shape();      // (-1,1)^2 minus [0,1]x[-1,0], 6 elements
Mesh z_shape();      // (-1,1)^2 minus conv{(0,0),(-1,0),(-1,-1/5)}

enum class DomainName { unit_square, l_shape, z_shape };
Mesh make_initial_mesh(DomainName name);

/// Recomputes boundary_edges from element adjacency.
void rebuild_boundary(Mesh& mesh);

/// Re-labels every element so that its refinement edge is its longest edge,
/// then repairs pairs whose shared longest edges disagree.
void label_longest_edges(Mesh& mesh);

/// Newest-vertex bisection of `marked` plus closure. Surviving elements keep
/// their index, the first child of a bisected element takes its parent's slot
/// and the second child is appended.
Mesh refine_nvb(const Mesh& mesh, std::span<const ElementId> marked);
Mesh uniform_refine(const Mesh& mesh);

/// Single bisection without closure (the result may have hanging nodes).
void bisect_in_place(Mesh& mesh, ElementId e, std::vector<ElementId>* created = nullptr);

/// neighbors[e][j] is the element across the edge opposite v[j], or kNoNeighbor.
std::vector<std::array<std::int64_t, 3>> edge_neighbors(const Mesh& mesh);
std::vector<ElementId> element_patch(const Mesh& mesh, ElementId e);

/// True if no vertex sits in the relative interior of another element's edge.
bool is_conforming(const Mesh& mesh);
double total_area(const Mesh& mesh);

void write_mesh(std::ostream& out, const Mesh& mesh);
Mesh read_mesh(std::istream& in);

}  // namespace rnnafem
